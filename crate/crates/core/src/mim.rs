//! One masked-image-modeling step: text-guided masks on the second view, the
//! masked student pass with text injection, the dual teacher pass, and the
//! CLS agreement and masked-patch losses.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{MaskingStrategy, MimTarget, ModelConfig, CHANNELS};
use crate::data::ViewPair;
use crate::distill::{soft_cross_entropy, teacher_forward_dual, CategoricalCode, TeacherCodes, TeacherState};
use crate::error::{Error, Result};
use crate::masking::{random_mask, text_guided_masks, PatchMask};
use crate::model::{
    encode_image_graph, encode_text_graph, head_logits, layers::linear, patch_pixels, FeatureSequence,
    ImageBatch, ImageEncodeOptions, SemMimModel, SeqVar, TokenBatch,
};
use crate::params::Bound;

/// Losses and masks of one MIM step.
#[derive(Clone, Debug, PartialEq)]
pub struct MimResult {
    pub loss_cls: f64,
    pub loss_patch: f64,
    pub masks: Vec<PatchMask>,
    /// Per-patch reconstruction loss `(B, N)`, masked or not.
    pub per_patch: Array2<f64>,
}

/// `(1/M) * sum over masked slots of -sum_k teacher * ln(student)`, averaged
/// over the batch.
pub fn mim_loss(student: &CategoricalCode, teacher: &CategoricalCode, masks: &[PatchMask]) -> Result<f64> {
    student.check()?;
    teacher.check_target()?;
    if student.probs.dim() != teacher.probs.dim() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.probs.dim(),
            teacher.probs.dim()
        )));
    }
    if masks.len() != student.batch() {
        return Err(Error::Shape(format!("{} masks for a batch of {}", masks.len(), student.batch())));
    }
    let mut total = 0.0;
    for (b, m) in masks.iter().enumerate() {
        if m.count() == 0 {
            return Err(Error::Input("empty patch mask".into()));
        }
        let mut row = 0.0;
        for &i in &m.indices {
            if i >= student.slots() {
                return Err(Error::Input(format!("masked patch {i} outside 0..{}", student.slots())));
            }
            let s = student.probs.slice(ndarray::s![b, i, ..]);
            let t = teacher.probs.slice(ndarray::s![b, i, ..]);
            row -= t.iter().zip(s.iter()).map(|(&t, &s)| t * s.ln()).sum::<f64>();
        }
        total += row / m.count() as f64;
    }
    Ok(total / masks.len() as f64)
}

/// Per-slot weights `1 / (B * M_b)` on masked slots, zero elsewhere.
pub fn mask_weights(masks: &[PatchMask], n: usize) -> Array2<f64> {
    let b = masks.len();
    let mut w = Array2::zeros((b, n));
    for (bi, m) in masks.iter().enumerate() {
        let v = 1.0 / (b * m.count()) as f64;
        for &i in &m.indices {
            w[[bi, i]] = v;
        }
    }
    w
}

/// Draws the masks for `view2`. Text-guided masks score the patches of a
/// text-free, unmasked student pass against the text CLS feature; nothing
/// here is differentiated.
pub fn select_masks<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    view2: &ImageBatch,
    text: &SeqVar,
    rng: &mut R,
) -> Result<Vec<PatchMask>> {
    let n = cfg.num_patches();
    match cfg.masking {
        MaskingStrategy::Random => (0..view2.batch()).map(|_| random_mask(n, cfg.mask_ratio, rng)).collect(),
        MaskingStrategy::TextGuided => {
            // Values only: these nodes never feed a loss.
            let out = encode_image_graph(g, p, cfg, view2, ImageEncodeOptions::default())?;
            let pre = FeatureSequence::from_var(g, &out);
            let patches = pre.values.slice(ndarray::s![.., 1.., ..]).to_owned();
            let text_cls: Array2<f64> = g.value(text.var).index_axis(Axis(1), 0).to_owned().into_dimensionality().unwrap();
            text_guided_masks(&patches, &text_cls, cfg.mask_ratio, rng)
        }
    }
}

/// Patch pixels normalised per patch, `(B, N, 3*P*P)`.
pub fn pixel_targets(view: &ImageBatch, patch: usize) -> Array3<f64> {
    let mut t = patch_pixels(view, patch);
    for mut lane in t.lanes_mut(Axis(2)) {
        let mean = lane.mean().unwrap();
        let var = lane.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let sd = (var + 1e-6).sqrt();
        lane.mapv_inplace(|v| (v - mean) / sd);
    }
    t
}

/// One-hot codes of the mean patch colour under a uniform per-channel
/// quantiser with `q = floor(cbrt(K))` levels.
pub fn color_codes(view: &ImageBatch, patch: usize, k: usize) -> Array3<f64> {
    let q = ((k as f64).cbrt() + 1e-9).floor().max(1.0) as usize;
    let px = patch_pixels(view, patch);
    let (b, n, dim) = px.dim();
    let per = dim / CHANNELS;
    let mut out = Array3::zeros((b, n, k));
    for bi in 0..b {
        for i in 0..n {
            let lane = px.slice(ndarray::s![bi, i, ..]);
            let mut code = 0;
            for c in 0..CHANNELS {
                let mean = lane.slice(ndarray::s![c * per..(c + 1) * per]).mean().unwrap();
                let level = ((mean * q as f64) as usize).min(q - 1);
                code = code * q + level;
            }
            out[[bi, i, code]] = 1.0;
        }
    }
    out
}

/// Graph nodes and side products of the MIM part of a training step.
pub struct MimGraph {
    pub loss_cls: Var,
    pub loss_patch: Var,
    /// Student features of the clean first view, reused by the other losses.
    pub view1: SeqVar,
    /// Student head logits (or pixel predictions) for every patch of the
    /// masked view.
    pub patch_out: Var,
    pub patch_targets: Array3<f64>,
    pub masks: Vec<PatchMask>,
    pub teacher: TeacherCodes,
}

/// Masked-patch loss of the student on `view2` against fixed targets.
#[allow(clippy::too_many_arguments)]
pub fn patch_loss_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    view2: &ImageBatch,
    text: Option<&SeqVar>,
    masks: &[PatchMask],
    targets: &Array3<f64>,
) -> Result<(Var, Var)> {
    let n = cfg.num_patches();
    let student = encode_image_graph(
        g,
        p,
        cfg,
        view2,
        ImageEncodeOptions {
            text,
            mask: Some(masks),
            taps: None,
        },
    )?;
    let body = student.body(g);
    let weights = mask_weights(masks, n);
    match cfg.mim_target {
        MimTarget::Semantic | MimTarget::ColorQuantizer => {
            let logits = head_logits(g, p, body);
            let loss = soft_cross_entropy(g, logits, cfg.student_temp, targets, &weights);
            Ok((loss, logits))
        }
        MimTarget::Pixel => {
            let pred = linear(g, p, "mim_pixel.head", body);
            let dim = targets.shape()[2];
            let t = g.constant(targets.clone().into_dyn());
            let diff = g.sub(pred, t);
            let sq = g.mul(diff, diff);
            let w = weights.into_shape_with_order((masks.len(), n, 1)).unwrap() / dim as f64;
            let w = g.constant(w.into_dyn());
            let weighted = g.mul(sq, w);
            Ok((g.sum(weighted), pred))
        }
    }
}

/// Per-step quantities the MIM losses treat as constants. Each is computed
/// when absent; supplying them pins a step, e.g. for finite differences.
#[derive(Clone, Debug, Default)]
pub struct MimFixed {
    pub masks: Option<Vec<PatchMask>>,
    pub teacher: Option<TeacherCodes>,
}

/// Builds the MIM losses on `g`. `text` is the student text encoding of the
/// captions.
#[allow(clippy::too_many_arguments)]
pub fn mim_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    views: &ViewPair,
    text: &SeqVar,
    teacher: &TeacherState,
    fixed: MimFixed,
    rng: &mut R,
) -> Result<MimGraph> {
    let b = views.view1.batch();
    if views.view2.batch() != b || g.shape(text.var)[0] != b {
        return Err(Error::Shape("views and captions disagree on batch size".into()));
    }
    let teacher_codes = match fixed.teacher {
        Some(t) => t,
        None => {
            let text_values = FeatureSequence::from_var(g, text);
            teacher_forward_dual(&views.view2, cfg.inject_text.then_some(&text_values), teacher, cfg)?
        }
    };

    let masks = match fixed.masks {
        Some(m) => m,
        None => select_masks(g, p, cfg, &views.view2, text, rng)?,
    };

    let targets = match cfg.mim_target {
        MimTarget::Semantic => teacher_codes.patches.probs.clone(),
        MimTarget::Pixel => pixel_targets(&views.view2, cfg.patch_size),
        MimTarget::ColorQuantizer => color_codes(&views.view2, cfg.patch_size, cfg.code_dim),
    };
    let (loss_patch, patch_out) = patch_loss_graph(
        g,
        p,
        cfg,
        &views.view2,
        cfg.inject_text.then_some(text),
        &masks,
        &targets,
    )?;

    let view1 = encode_image_graph(g, p, cfg, &views.view1, ImageEncodeOptions::default())?;
    let cls = g.narrow(view1.var, 1, 0, 1);
    let cls_logits = head_logits(g, p, cls);
    let w = Array2::from_elem((b, 1), 1.0 / b as f64);
    let loss_cls = soft_cross_entropy(g, cls_logits, cfg.student_temp, &teacher_codes.cls.probs, &w);

    Ok(MimGraph {
        loss_cls,
        loss_patch,
        view1,
        patch_out,
        patch_targets: targets,
        masks,
        teacher: teacher_codes,
    })
}

/// Per-patch loss of every slot, for diagnostics.
pub fn per_patch_losses(cfg: &ModelConfig, out: &Array3<f64>, targets: &Array3<f64>) -> Array2<f64> {
    match cfg.mim_target {
        MimTarget::Pixel => {
            let d = out - targets;
            d.mapv(|v| v * v).mean_axis(Axis(2)).unwrap()
        }
        _ => {
            let mut z = out.mapv(|v| v / cfg.student_temp).into_dyn();
            crate::autograd::softmax_last_inplace(&mut z);
            let z: Array3<f64> = z.into_dimensionality().unwrap();
            let mut ce = Array2::zeros((out.shape()[0], out.shape()[1]));
            ndarray::Zip::from(&mut ce)
                .and(z.lanes(Axis(2)))
                .and(targets.lanes(Axis(2)))
                .for_each(|c, s, t| {
                    *c = -t.iter().zip(s.iter()).map(|(&t, &s)| t * s.max(f64::MIN_POSITIVE).ln()).sum::<f64>()
                });
            ce
        }
    }
}

/// Runs one MIM step without updating anything.
pub fn mim_step<R: Rng + ?Sized>(
    views: &ViewPair,
    tokens: &TokenBatch,
    student: &SemMimModel,
    teacher: &TeacherState,
    rng: &mut R,
) -> Result<MimResult> {
    let cfg = &student.cfg;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &student.params, false);
    let text = encode_text_graph(&mut g, &p, cfg, tokens)?;
    let out = mim_forward(&mut g, &p, cfg, views, &text, teacher, MimFixed::default(), rng)?;
    let patch_out: Array3<f64> = g.value(out.patch_out).clone().into_dimensionality().unwrap();
    Ok(MimResult {
        loss_cls: g.item(out.loss_cls),
        loss_patch: g.item(out.loss_patch),
        per_patch: per_patch_losses(cfg, &patch_out, &out.patch_targets),
        masks: out.masks,
    })
}
