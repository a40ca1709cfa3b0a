//! Vision transformer over non-overlapping square patches, with optional
//! masked-patch replacement and layer-wise text injection.

use ndarray::{Array3, ArrayD, IxDyn};
use std::ops::Range;

use super::layers::{attention, key_padding_bias, layer_norm, linear, mlp};
use super::{ImageBatch, SeqVar};
use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, CHANNELS};
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::params::Bound;

/// Flattened patch pixels `(B, N, 3*P*P)`, patches in row-major grid order,
/// values ordered channel, row, column within a patch.
pub fn patch_pixels(images: &ImageBatch, patch: usize) -> Array3<f64> {
    let px = &images.pixels;
    let (b, _, h, w) = px.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array3::zeros((b, gh * gw, CHANNELS * patch * patch));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let n = gy * gw + gx;
                let mut k = 0;
                for c in 0..CHANNELS {
                    for y in 0..patch {
                        for x in 0..patch {
                            out[[bi, n, k]] = px[[bi, c, gy * patch + y, gx * patch + x]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn patch_linear(g: &mut Graph, p: &Bound, cfg: &ModelConfig, images: &ImageBatch) -> Var {
    let pixels = g.constant(patch_pixels(images, cfg.patch_size).into_dyn());
    linear(g, p, "image.patch", pixels)
}

#[derive(Default)]
pub struct ImageEncodeOptions<'a> {
    /// Text features appended to the attention sequence from
    /// `inject_start_layer` onward.
    pub text: Option<&'a SeqVar>,
    /// Per-row masked patches, replaced by the mask token before layer 1.
    pub mask: Option<&'a [PatchMask]>,
    /// Receives the visual output of every layer.
    pub taps: Option<&'a mut Vec<Var>>,
}

/// Input sequence `(B, 1+N, D)`: CLS plus patch embeddings (masked slots
/// replaced by the mask token) plus positional terms.
pub fn image_embed(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    images: &ImageBatch,
    mask: Option<&[PatchMask]>,
) -> Result<Var> {
    images.check(cfg)?;
    let b = images.batch();
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let mut x = patch_linear(g, p, cfg, images);

    if let Some(masks) = mask {
        if masks.len() != b {
            return Err(Error::Shape(format!("{} masks for a batch of {b}", masks.len())));
        }
        let mut sel = ArrayD::zeros(IxDyn(&[b, n, 1]));
        for (bi, m) in masks.iter().enumerate() {
            for &i in &m.indices {
                if i >= n {
                    return Err(Error::Input(format!("masked patch index {i} outside 0..{n}")));
                }
                sel[[bi, i, 0]] = 1.0;
            }
        }
        let keep = sel.mapv(|v| 1.0 - v);
        let sel = g.constant(sel);
        let keep = g.constant(keep);
        let token = p.get("image.mask_token");
        let kept = g.mul(x, keep);
        let filled = g.mul(token, sel);
        x = g.add(kept, filled);
    }

    let zeros = g.constant(ArrayD::zeros(IxDyn(&[b, 1, d])));
    let cls = p.get("image.cls");
    let cls = g.add(zeros, cls);
    let x = g.concat(&[cls, x], 1);
    let pos = p.get("image.pos");
    Ok(g.add(x, pos))
}

fn image_block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    text: Option<&SeqVar>,
) -> Var {
    let pre = format!("image.blocks.{layer}");
    let ln1 = format!("{pre}.ln1");
    let xn = layer_norm(g, p, &ln1, x);
    let (kv, bias) = match text {
        Some(t) => {
            // Visual queries attend over [visual; text]; the text slots are
            // not carried past this layer.
            let tn = layer_norm(g, p, &ln1, t.var);
            let kv = g.concat(&[xn, tn], 1);
            let tv = g.shape(x)[1];
            let tt = g.shape(t.var)[1];
            let valid: Vec<Vec<bool>> = t
                .lengths
                .iter()
                .map(|&len| (0..tv + tt).map(|j| j < tv || j - tv < len).collect())
                .collect();
            (kv, key_padding_bias(g, cfg.heads, &valid))
        }
        None => (xn, None),
    };
    let a = attention(g, p, &format!("{pre}.attn"), xn, kv, cfg.heads, bias);
    let x = g.add(x, a);
    let h = layer_norm(g, p, &format!("{pre}.ln2"), x);
    let h = mlp(g, p, &format!("{pre}.mlp"), h);
    g.add(x, h)
}

/// Runs layers `range` (0-based). Text, if given, is injected into every
/// layer whose 1-based index is at least `inject_start_layer`.
pub fn image_layers(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    mut x: Var,
    range: Range<usize>,
    text: Option<&SeqVar>,
    mut taps: Option<&mut Vec<Var>>,
) -> Var {
    for l in range {
        let inject = text.filter(|_| l + 1 >= cfg.inject_start_layer);
        x = image_block(g, p, cfg, l, x, inject);
        if let Some(t) = taps.as_deref_mut() {
            t.push(x);
        }
    }
    x
}

pub fn image_final(g: &mut Graph, p: &Bound, x: Var) -> Var {
    layer_norm(g, p, "image.ln_f", x)
}

/// Full image encoder. The returned sequence holds only the `1+N` visual slots.
pub fn encode_image_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    images: &ImageBatch,
    opts: ImageEncodeOptions<'_>,
) -> Result<SeqVar> {
    cfg.validate()?;
    if let Some(t) = opts.text {
        let s = g.shape(t.var);
        if s.len() != 3 || s[2] != cfg.embed_dim {
            return Err(Error::Shape(format!(
                "text features of shape {s:?} do not have width {}",
                cfg.embed_dim
            )));
        }
        if s[0] != images.batch() {
            return Err(Error::Shape(format!(
                "text batch {} vs image batch {}",
                s[0],
                images.batch()
            )));
        }
    }
    let x = image_embed(g, p, cfg, images, opts.mask)?;
    let x = image_layers(g, p, cfg, x, 0..cfg.image_layers, opts.text, opts.taps);
    let x = image_final(g, p, x);
    Ok(SeqVar {
        var: x,
        lengths: vec![1 + cfg.num_patches(); images.batch()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureSequence, SemMimModel};
    use ndarray::{s, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            image_layers: 3,
            inject_start_layer: 2,
            heads: 2,
            ..Default::default()
        }
    }

    fn random_images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_simple_fn((b, 3, size, size), || rng.random())).unwrap()
    }

    #[test]
    fn grid_has_expected_patch_count() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_images(&mut rng, 2, 32);
        assert_eq!(patch_pixels(&img, 8).dim(), (2, 16, 192));
        let m = SemMimModel::new(cfg, &mut rng).unwrap();
        assert_eq!(m.patchify(&img).unwrap().dim(), (2, 16, 64));
    }

    #[test]
    fn blank_image_embeds_to_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        m.params.tensor_mut("image.pos").fill(0.0);
        m.params.tensor_mut("image.patch.b").mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let bias = m.params.get("image.patch.b").unwrap().clone();
        let img = ImageBatch::new(Array4::zeros((1, 3, 32, 32))).unwrap();
        let emb = m.patchify(&img).unwrap();
        for n in 0..16 {
            for (a, b) in emb.slice(s![0, n, ..]).iter().zip(bias.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn swapping_patches_swaps_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        m.params.tensor_mut("image.pos").fill(0.0);
        let img = random_images(&mut rng, 1, 32);
        // Swap patch (0,0) with patch (2,3) pixel by pixel.
        let mut swapped = img.clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let a = img.pixels[[0, c, y, x]];
                    let b = img.pixels[[0, c, 16 + y, 24 + x]];
                    swapped.pixels[[0, c, y, x]] = b;
                    swapped.pixels[[0, c, 16 + y, 24 + x]] = a;
                }
            }
        }
        let e = m.patchify(&img).unwrap();
        let f = m.patchify(&swapped).unwrap();
        let (i, j) = (0, 2 * 4 + 3);
        for n in 0..16 {
            let src = if n == i { j } else if n == j { i } else { n };
            assert_eq!(f.slice(s![0, n, ..]), e.slice(s![0, src, ..]));
        }
    }

    #[test]
    fn absent_text_is_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        let img = random_images(&mut rng, 2, 32);
        let a = m.encode_image(&img, None, None).unwrap();
        let b = m.encode_image(&img, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.dim(), (2, 17, 16));
    }

    #[test]
    fn fully_padded_text_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        let img = random_images(&mut rng, 2, 32);
        let text = FeatureSequence {
            values: Array3::zeros((2, 5, 16)),
            lengths: vec![0, 0],
        };
        let plain = m.encode_image(&img, None, None).unwrap();
        let with = m.encode_image(&img, Some(&text), None).unwrap();
        let diff = (&plain.values - &with.values).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn layers_before_injection_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        let img = random_images(&mut rng, 2, 32);
        let text = FeatureSequence::full(Array3::from_shape_simple_fn((2, 4, 16), || rng.random_range(-1.0..1.0)));
        let (_, plain) = m.encode_image_with_taps(&img, None, None).unwrap();
        let (_, with) = m.encode_image_with_taps(&img, Some(&text), None).unwrap();
        assert_eq!(plain[0], with[0]);
        assert_ne!(plain[1], with[1]);
        assert_ne!(plain[2], with[2]);
    }

    #[test]
    fn text_width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        let img = random_images(&mut rng, 1, 32);
        let text = FeatureSequence::full(Array3::zeros((1, 3, 8)));
        assert!(matches!(m.encode_image(&img, Some(&text), None), Err(Error::Shape(_))));
    }

    #[test]
    fn out_of_range_injection_layer_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = SemMimModel::new(small_cfg(), &mut rng).unwrap();
        m.cfg.inject_start_layer = m.cfg.image_layers + 1;
        let img = random_images(&mut rng, 1, 32);
        assert!(matches!(m.encode_image(&img, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn masked_slots_carry_mask_token_plus_position() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = SemMimModel::new(cfg.clone(), &mut rng).unwrap();
        let img = random_images(&mut rng, 1, 32);
        let mask = PatchMask::from_indices(vec![1, 5, 9], 16, 0.2);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &m.params, false);
        let plain = image_embed(&mut g, &p, &cfg, &img, None).unwrap();
        let masked = image_embed(&mut g, &p, &cfg, &img, Some(std::slice::from_ref(&mask))).unwrap();
        let token = m.params.get("image.mask_token").unwrap();
        let pos = m.params.get("image.pos").unwrap();
        let mv = g.value(masked).clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let pv = g.value(plain).clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        for slot in 1..17 {
            let got: ndarray::Array1<f64> = mv.slice(s![0, slot, ..]).to_owned();
            if mask.indices.contains(&(slot - 1)) {
                let want = token + &pos.index_axis(ndarray::Axis(0), slot);
                assert_eq!(got.into_dyn(), want);
            } else {
                assert_eq!(got, pv.slice(s![0, slot, ..]));
            }
        }
    }
}
