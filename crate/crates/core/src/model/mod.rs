//! The trainable networks: image encoder, text encoder, fusion encoder and
//! decoder, plus the encoding head and the small task heads.
//!
//! Every network is written against the autodiff [`Graph`] with parameters
//! looked up by name from a [`Bound`] set, so the same code serves the
//! student (trainable leaves), the momentum teacher (constant leaves) and
//! plain inference.

mod decoder;
mod fusion;
mod image;
pub mod layers;
mod text;

pub use decoder::{decode_graph, greedy_decode};
pub use fusion::{fuse_graph, FuseOptions};
pub use image::{
    encode_image_graph, image_embed, image_final, image_layers, patch_pixels, ImageEncodeOptions,
};
pub use text::encode_text_graph;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{MimTarget, ModelConfig, CHANNELS};
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::params::{Bound, Initializer, ParamStore};

/// Parameter name prefixes owned by the image encoder and the encoding head;
/// these are the tensors the momentum teacher tracks.
pub const TEACHER_PREFIXES: [&str; 2] = ["image.", "head."];

/// Pixels of a batch of RGB images, `(B, 3, H, W)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>) -> Result<Self> {
        let shape = pixels.shape();
        if shape[1] != CHANNELS {
            return Err(Error::Shape(format!("expected {CHANNELS} channels, got {}", shape[1])));
        }
        if shape[2] != shape[3] {
            return Err(Error::Shape(format!("non-square image {}x{}", shape[2], shape[3])));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.size() != cfg.image_size {
            return Err(Error::Config(format!(
                "image is {}x{} but the model expects {}x{}",
                self.size(),
                self.size(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(())
    }

    /// Rows `idx` of the batch, in order.
    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            pixels: self.pixels.select(Axis(0), idx),
        }
    }
}

/// Token ids `(B, T)`: column 0 holds CLS, valid tokens occupy the first
/// `lengths[b]` columns and the rest carry the pad id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Array2<usize>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads `rows` (each starting with CLS) to a common width.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("empty token batch".into()));
        }
        let width = rows.iter().map(|r| r.len()).max().unwrap();
        if width == 0 {
            return Err(Error::Input("token rows must contain at least CLS".into()));
        }
        let mut ids = Array2::from_elem((rows.len(), width), vocab::PAD);
        for (i, r) in rows.iter().enumerate() {
            for (j, &t) in r.iter().enumerate() {
                ids[[i, j]] = t;
            }
        }
        let batch = Self {
            ids,
            lengths: rows.iter().map(|r| r.len()).collect(),
        };
        Ok(batch)
    }

    pub fn batch(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<usize> {
        self.ids.row(i).iter().take(self.lengths[i]).copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> TokenBatch {
        TokenBatch {
            ids: self.ids.select(Axis(0), idx),
            lengths: idx.iter().map(|&i| self.lengths[i]).collect(),
        }
    }

    pub fn check(&self, cfg: &ModelConfig, require_cls: bool) -> Result<()> {
        if self.lengths.len() != self.batch() {
            return Err(Error::Input("lengths do not match the batch".into()));
        }
        if self.width() > cfg.text_width() {
            return Err(Error::Input(format!(
                "token grid width {} exceeds CLS + {} word slots",
                self.width(),
                cfg.max_text_len
            )));
        }
        for (i, row) in self.ids.rows().into_iter().enumerate() {
            let len = self.lengths[i];
            if len == 0 || len > self.width() {
                return Err(Error::Input(format!("row {i} has invalid length {len}")));
            }
            if require_cls && row[0] != vocab::CLS {
                return Err(Error::Input(format!("row {i} does not start with CLS")));
            }
            for (j, &t) in row.iter().enumerate() {
                if t >= cfg.vocab_size {
                    return Err(Error::Input(format!(
                        "token id {t} at ({i}, {j}) outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                if j >= len && t != vocab::PAD {
                    return Err(Error::Input(format!("non-pad id at padded position ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Token features `(B, 1 + slots, D)`; slot 0 is CLS. Only the first
/// `lengths[b]` slots of a row take part in attention downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub values: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl FeatureSequence {
    pub fn full(values: Array3<f64>) -> Self {
        let lengths = vec![values.shape()[1]; values.shape()[0]];
        Self { values, lengths }
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// CLS features `(B, D)`.
    pub fn cls(&self) -> Array2<f64> {
        self.values.index_axis(Axis(1), 0).to_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_var(&self, g: &mut Graph) -> SeqVar {
        SeqVar {
            var: g.constant(self.values.clone().into_dyn()),
            lengths: self.lengths.clone(),
        }
    }

    pub fn from_var(g: &Graph, s: &SeqVar) -> Self {
        Self {
            values: g
                .value(s.var)
                .clone()
                .into_dimensionality()
                .expect("sequence is 3-d"),
            lengths: s.lengths.clone(),
        }
    }
}

/// A feature sequence living on a graph.
#[derive(Clone, Debug)]
pub struct SeqVar {
    pub var: Var,
    pub lengths: Vec<usize>,
}

impl SeqVar {
    /// CLS slot as `(B, D)`.
    pub fn cls(&self, g: &mut Graph) -> Var {
        let (b, d) = {
            let s = g.shape(self.var);
            (s[0], s[2])
        };
        let c = g.narrow(self.var, 1, 0, 1);
        g.reshape(c, &[b, d])
    }

    /// Slots `1..` (patches or words), `(B, slots-1, D)`.
    pub fn body(&self, g: &mut Graph) -> Var {
        let t = g.shape(self.var)[1];
        g.narrow(self.var, 1, 1, t - 1)
    }

    pub fn select_rows(&self, g: &mut Graph, rows: &[usize]) -> SeqVar {
        SeqVar {
            var: g.select_rows(self.var, rows),
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
        }
    }
}

/// Logits of the encoding head for every slot of `x` (`(.., D) -> (.., K)`).
pub fn head_logits(g: &mut Graph, p: &Bound, x: Var) -> Var {
    let h = layers::linear(g, p, "head.fc1", x);
    let h = g.gelu(h);
    layers::linear(g, p, "head.fc2", h)
}

/// Builds every parameter of the model for `cfg`.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_ratio * d;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, rng, 0.02);

    init.linear("image.patch", cfg.patch_dim(), d);
    init.normal("image.cls", &[d]);
    init.normal("image.pos", &[1 + cfg.num_patches(), d]);
    init.normal("image.mask_token", &[d]);
    for l in 0..cfg.image_layers {
        let pre = format!("image.blocks.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d);
        layers::init_attention(&mut init, &format!("{pre}.attn"), d);
        init.layer_norm(&format!("{pre}.ln2"), d);
        layers::init_mlp(&mut init, &format!("{pre}.mlp"), d, hidden);
    }
    init.layer_norm("image.ln_f", d);

    init.linear_fan_in("head.fc1", d, cfg.head_hidden);
    init.linear_fan_in("head.fc2", cfg.head_hidden, cfg.code_dim);

    init.normal("text.tok", &[cfg.vocab_size, d]);
    init.normal("text.pos", &[cfg.text_width(), d]);
    for l in 0..cfg.text_layers {
        let pre = format!("text.blocks.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d);
        layers::init_attention(&mut init, &format!("{pre}.attn"), d);
        init.layer_norm(&format!("{pre}.ln2"), d);
        layers::init_mlp(&mut init, &format!("{pre}.mlp"), d, hidden);
    }
    init.layer_norm("text.ln_f", d);

    for l in 0..cfg.fusion_layers {
        let pre = format!("fusion.blocks.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d);
        layers::init_attention(&mut init, &format!("{pre}.self_attn"), d);
        init.layer_norm(&format!("{pre}.ln2"), d);
        layers::init_attention(&mut init, &format!("{pre}.cross_attn"), d);
        init.layer_norm(&format!("{pre}.ln3"), d);
        layers::init_mlp(&mut init, &format!("{pre}.mlp"), d, hidden);
    }
    init.layer_norm("fusion.ln_f", d);

    init.normal("decoder.tok", &[cfg.vocab_size, d]);
    init.normal("decoder.pos", &[cfg.text_width(), d]);
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.blocks.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d);
        layers::init_attention(&mut init, &format!("{pre}.self_attn"), d);
        init.layer_norm(&format!("{pre}.ln2"), d);
        layers::init_attention(&mut init, &format!("{pre}.cross_attn"), d);
        init.layer_norm(&format!("{pre}.ln3"), d);
        layers::init_mlp(&mut init, &format!("{pre}.mlp"), d, hidden);
    }
    init.layer_norm("decoder.ln_f", d);
    init.linear("decoder.lm_head", d, cfg.vocab_size);

    init.linear("itc.image_proj", d, d);
    init.linear("itc.text_proj", d, d);
    init.constant("itc.temp", &[], cfg.itc_temp);
    init.linear("itm.head", d, 2);
    init.linear("mlm.head", d, cfg.vocab_size);
    if cfg.mim_target == MimTarget::Pixel {
        init.linear("mim_pixel.head", d, cfg.patch_dim());
    }
    store
}

/// The student model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SemMimModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl SemMimModel {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, rng);
        Ok(Self { cfg, params })
    }

    fn frozen(&self, g: &mut Graph) -> Bound {
        Bound::new(g, &self.params, false)
    }

    /// Patch embeddings `(B, N, D)`: linear map of flattened pixels plus the
    /// positional term of each patch slot.
    pub fn patchify(&self, images: &ImageBatch) -> Result<Array3<f64>> {
        images.check(&self.cfg)?;
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let x = image::patch_linear(&mut g, &p, &self.cfg, images);
        let pos = p.get("image.pos");
        let pos = g.narrow(pos, 0, 1, self.cfg.num_patches());
        let y = g.add(x, pos);
        Ok(g.value(y).clone().into_dimensionality().unwrap())
    }

    pub fn encode_image(
        &self,
        images: &ImageBatch,
        text: Option<&FeatureSequence>,
        mask: Option<&[PatchMask]>,
    ) -> Result<FeatureSequence> {
        Ok(self.encode_image_with_taps(images, text, mask)?.0)
    }

    /// Like [`encode_image`](Self::encode_image), also returning the output
    /// of every layer (visual slots only).
    pub fn encode_image_with_taps(
        &self,
        images: &ImageBatch,
        text: Option<&FeatureSequence>,
        mask: Option<&[PatchMask]>,
    ) -> Result<(FeatureSequence, Vec<Array3<f64>>)> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let text = text.map(|t| t.to_var(&mut g));
        let mut taps = Vec::new();
        let out = encode_image_graph(
            &mut g,
            &p,
            &self.cfg,
            images,
            ImageEncodeOptions {
                text: text.as_ref(),
                mask,
                taps: Some(&mut taps),
            },
        )?;
        let taps = taps
            .into_iter()
            .map(|v| g.value(v).clone().into_dimensionality().unwrap())
            .collect();
        Ok((FeatureSequence::from_var(&g, &out), taps))
    }

    pub fn encode_text(&self, tokens: &TokenBatch) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let out = encode_text_graph(&mut g, &p, &self.cfg, tokens)?;
        Ok(FeatureSequence::from_var(&g, &out))
    }

    pub fn fuse(&self, image: &FeatureSequence, text: &FeatureSequence) -> Result<FeatureSequence> {
        self.fuse_with(image, text, FuseOptions::default())
    }

    pub fn fuse_with(
        &self,
        image: &FeatureSequence,
        text: &FeatureSequence,
        opts: FuseOptions,
    ) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let iv = image.to_var(&mut g);
        let tv = text.to_var(&mut g);
        let out = fuse_graph(&mut g, &p, &self.cfg, &iv, &tv, opts)?;
        Ok(FeatureSequence::from_var(&g, &out))
    }

    /// Causal logits `(B, T, V)` for a decoder input grid; position `t`
    /// predicts token `t + 1`.
    pub fn decode(&self, fused: &FeatureSequence, input: &TokenBatch) -> Result<Array3<f64>> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let fv = fused.to_var(&mut g);
        let logits = decode_graph(&mut g, &p, &self.cfg, &fv, input)?;
        Ok(g.value(logits).clone().into_dimensionality().unwrap())
    }

    /// Per-slot categorical codes of the student encoding head.
    pub fn head_codes(
        &self,
        features: &FeatureSequence,
        temperature: f64,
    ) -> Result<crate::distill::CategoricalCode> {
        crate::distill::head_forward(&self.params, features, temperature, None)
    }
}
