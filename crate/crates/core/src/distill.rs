//! Momentum self-distillation: the EMA teacher, the encoding head that maps
//! features onto the K-simplex, the CLS agreement loss, and the dual teacher
//! pass that yields a text-free CLS target alongside text-conditioned patch
//! targets.

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::autograd::{softmax_last_inplace, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{
    head_logits, image_embed, image_final, image_layers, FeatureSequence, ImageBatch, TEACHER_PREFIXES,
};
use crate::params::{Bound, ParamStore};

const SIMPLEX_TOL: f64 = 1e-5;

/// Per-slot categorical distributions `(B, slots, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalCode {
    pub probs: Array3<f64>,
}

impl CategoricalCode {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let code = Self { probs };
        code.check()?;
        Ok(code)
    }

    /// Every entry strictly positive and every K-vector summing to one.
    pub fn check(&self) -> Result<()> {
        self.check_with(|p| p > 0.0)
    }

    /// Like [`check`](Self::check) but admits zero entries, as in one-hot
    /// targets.
    pub fn check_target(&self) -> Result<()> {
        self.check_with(|p| p >= 0.0)
    }

    fn check_with(&self, admissible: impl Fn(f64) -> bool) -> Result<()> {
        for lane in self.probs.lanes(Axis(2)) {
            let sum: f64 = lane.sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL || lane.iter().any(|&p| !admissible(p)) {
                return Err(Error::Input(format!(
                    "categorical code off the simplex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Most likely code id per slot, `(B, slots)`; ties go to the lower id.
    pub fn argmax(&self) -> Array2<usize> {
        let (b, s, _) = self.probs.dim();
        Array2::from_shape_fn((b, s), |(i, j)| {
            let lane = self.probs.slice(ndarray::s![i, j, ..]);
            let mut best = 0;
            for (k, &p) in lane.iter().enumerate() {
                if p > lane[best] {
                    best = k;
                }
            }
            best
        })
    }

    /// Shannon entropy of each slot, `(B, slots)`.
    pub fn entropy(&self) -> Array2<f64> {
        self.probs
            .map_axis(Axis(2), |lane| -lane.iter().map(|&p| p * p.ln()).sum::<f64>())
    }
}

/// Momentum copy of the image encoder and encoding head plus the running
/// center of teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub center: Array1<f64>,
}

impl TeacherState {
    /// Teacher initialised as an exact copy of the student.
    pub fn from_student(student: &ParamStore, code_dim: usize) -> Self {
        Self {
            params: student.subset(&TEACHER_PREFIXES),
            center: Array1::zeros(code_dim),
        }
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise, for every
/// teacher tensor. `student` may be the full model store; only the tracked
/// tensors are read. The center is left alone.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    let tracked = student
        .names()
        .filter(|n| TEACHER_PREFIXES.iter().any(|p| n.starts_with(p)))
        .count();
    if tracked != teacher.params.len() {
        return Err(Error::Structure(format!(
            "teacher holds {} tensors, student snapshot {tracked}",
            teacher.params.len()
        )));
    }
    for (name, t) in teacher.params.iter() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::Structure(format!("student has no tensor `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(Error::Structure(format!(
                "`{name}`: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }
    let keep = 1.0 - m;
    for (name, t) in teacher.params.iter_mut() {
        let s = student.get(name).unwrap();
        // Written as a step toward the student so that equal tensors stay
        // bit-identical; m = 0 copies outright.
        if m == 0.0 {
            t.assign(s);
        } else {
            Zip::from(t).and(s).for_each(|a, &b| *a += keep * (b - *a));
        }
    }
    Ok(())
}

/// `center <- cm * center + (1 - cm) * mean(rows of logits)`.
pub fn update_center(teacher: &mut TeacherState, batch_logits: &Array2<f64>, center_momentum: f64) {
    if batch_logits.nrows() == 0 {
        return;
    }
    let mean = batch_logits.mean_axis(Axis(0)).unwrap();
    let keep = 1.0 - center_momentum;
    Zip::from(&mut teacher.center)
        .and(&mean)
        .for_each(|c, &x| *c = center_momentum * *c + keep * x);
}

/// Converts head logits into codes: optional centering, division by the
/// temperature, softmax per slot.
pub fn codes_from_logits(
    logits: &Array3<f64>,
    temperature: f64,
    center: Option<&Array1<f64>>,
) -> Result<CategoricalCode> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut z = logits.clone();
    if let Some(c) = center {
        z -= c;
    }
    z.mapv_inplace(|v| v / temperature);
    let mut z = z.into_dyn();
    softmax_last_inplace(&mut z);
    // Saturated softmax can underflow to exactly zero; keep entries positive.
    z.mapv_inplace(|p| p.max(f64::MIN_POSITIVE));
    Ok(CategoricalCode {
        probs: z.into_dimensionality().unwrap(),
    })
}

/// Encoding head over every slot of `features`.
pub fn head_forward(
    params: &ParamStore,
    features: &FeatureSequence,
    temperature: f64,
    center: Option<&Array1<f64>>,
) -> Result<CategoricalCode> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let logits = head_logits_values(params, &features.values);
    codes_from_logits(&logits, temperature, center)
}

fn head_logits_values(params: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params.subset(&["head."]), false);
    let xv = g.constant(x.clone().into_dyn());
    let l = head_logits(&mut g, &p, xv);
    g.value(l).clone().into_dimensionality().unwrap()
}

/// Mean over batch (and slots) of `-sum_k teacher[k] * ln(student[k])`.
pub fn agreement_loss(student_cls: &CategoricalCode, teacher_cls: &CategoricalCode) -> Result<f64> {
    student_cls.check()?;
    teacher_cls.check_target()?;
    if student_cls.probs.dim() != teacher_cls.probs.dim() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student_cls.probs.dim(),
            teacher_cls.probs.dim()
        )));
    }
    let rows = (student_cls.batch() * student_cls.slots()) as f64;
    let total: f64 = Zip::from(&student_cls.probs)
        .and(&teacher_cls.probs)
        .fold(0.0, |acc, &s, &t| acc - t * s.ln());
    Ok(total / rows)
}

/// Weighted soft-target cross entropy on the graph:
/// `-sum_{b,s} w[b,s] * sum_k target[b,s,k] * log_softmax(logits / temp)[b,s,k]`.
/// Targets are constants, so no gradient reaches the teacher side.
pub fn soft_cross_entropy(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    targets: &Array3<f64>,
    weights: &Array2<f64>,
) -> Var {
    let scaled = g.scale(logits, 1.0 / temperature);
    let logp = g.log_softmax(scaled);
    let (b, s, _) = targets.dim();
    let w = weights.clone().into_shape_with_order((b, s, 1)).unwrap();
    let tw = targets * &w;
    let tw = g.constant(tw.into_dyn());
    let prod = g.mul(logp, tw);
    let total = g.sum(prod);
    g.scale(total, -1.0)
}

/// Outputs of the dual teacher pass.
#[derive(Clone, Debug)]
pub struct TeacherCodes {
    /// CLS code of the text-free pass, `(B, 1, K)`.
    pub cls: CategoricalCode,
    /// Patch codes `(B, N, K)`: text-conditioned when pass B ran, otherwise
    /// the text-free patches.
    pub patches: CategoricalCode,
    /// Patch codes of the text-free pass.
    pub plain_patches: CategoricalCode,
    /// Raw head logits behind `cls` and `patches`, for the center update.
    pub cls_logits: Array3<f64>,
    pub patch_logits: Array3<f64>,
}

/// Pass A runs the teacher text-free end to end and yields the CLS code.
/// Pass B (when `text` is given) resumes from the hidden state entering
/// layer `inject_start_layer` and re-runs the remaining layers with the text
/// appended, yielding patch codes. Both use the same momentum head.
pub fn teacher_forward_dual(
    view2: &ImageBatch,
    text: Option<&FeatureSequence>,
    teacher: &TeacherState,
    cfg: &ModelConfig,
) -> Result<TeacherCodes> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &teacher.params, false);
    let start = cfg.inject_start_layer - 1;
    let x0 = image_embed(&mut g, &p, cfg, view2, None)?;
    let shared = image_layers(&mut g, &p, cfg, x0, 0..start, None, None);

    let xa = image_layers(&mut g, &p, cfg, shared, start..cfg.image_layers, None, None);
    let xa = image_final(&mut g, &p, xa);
    let logits_a = head_logits(&mut g, &p, xa);
    let logits_a: Array3<f64> = g.value(logits_a).clone().into_dimensionality().unwrap();

    let n = cfg.num_patches();
    let cls_logits = logits_a.slice(ndarray::s![.., 0..1, ..]).to_owned();
    let plain_patch_logits = logits_a.slice(ndarray::s![.., 1.., ..]).to_owned();

    let patch_logits = match text {
        Some(t) => {
            if t.batch() != view2.batch() || t.dim() != cfg.embed_dim {
                return Err(Error::Shape(format!(
                    "text features {:?} for a batch of {}",
                    t.values.dim(),
                    view2.batch()
                )));
            }
            let tv = t.to_var(&mut g);
            let xb = image_layers(&mut g, &p, cfg, shared, start..cfg.image_layers, Some(&tv), None);
            let xb = image_final(&mut g, &p, xb);
            let body = g.narrow(xb, 1, 1, n);
            let l = head_logits(&mut g, &p, body);
            g.value(l).clone().into_dimensionality().unwrap()
        }
        None => plain_patch_logits.clone(),
    };

    let center = cfg.centering.then_some(&teacher.center);
    Ok(TeacherCodes {
        cls: codes_from_logits(&cls_logits, cfg.teacher_temp, center)?,
        patches: codes_from_logits(&patch_logits, cfg.teacher_temp, center)?,
        plain_patches: codes_from_logits(&plain_patch_logits, cfg.teacher_temp, center)?,
        cls_logits,
        patch_logits,
    })
}

/// Stacks `(B, S, K)` logit blocks into rows of K for [`update_center`].
pub fn logit_rows(blocks: &[&Array3<f64>]) -> Array2<f64> {
    let k = blocks[0].shape()[2];
    let rows: usize = blocks.iter().map(|b| b.shape()[0] * b.shape()[1]).sum();
    let mut out = Array2::zeros((rows, k));
    let mut r = 0;
    for blk in blocks {
        for lane in blk.lanes(Axis(2)) {
            out.row_mut(r).assign(&lane);
            r += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SemMimModel;
    use ndarray::{arr1, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(rows: &[&[f64]]) -> CategoricalCode {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        CategoricalCode::new(Array3::from_shape_vec((rows.len(), 1, k), flat).unwrap()).unwrap()
    }

    #[test]
    fn ema_fixed_points_and_arithmetic() {
        let mut store = ParamStore::new();
        store.insert("image.w", arr1(&[4.0, -1.0]).into_dyn());
        store.insert("head.b", arr1(&[0.5]).into_dyn());
        store.insert("text.x", arr1(&[9.0]).into_dyn());
        let mut student = store.clone();
        *student.tensor_mut("image.w") = arr1(&[2.0, 3.0]).into_dyn();
        *student.tensor_mut("head.b") = arr1(&[1.5]).into_dyn();

        let base = TeacherState::from_student(&store, 4);
        assert_eq!(base.params.len(), 2);

        let mut t = base.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, base);

        let mut t = base.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.params.get("image.w").unwrap(), student.get("image.w").unwrap());

        let mut t = base.clone();
        ema_update(&mut t, &student, 0.5).unwrap();
        assert_eq!(t.params.get("image.w").unwrap()[0], 3.0);
        assert_eq!(t.center, base.center);
    }

    #[test]
    fn ema_rejects_mismatched_snapshots() {
        let mut store = ParamStore::new();
        store.insert("image.w", arr1(&[1.0, 2.0]).into_dyn());
        let mut t = TeacherState::from_student(&store, 2);
        let mut other = ParamStore::new();
        other.insert("image.w", arr1(&[1.0, 2.0, 3.0]).into_dyn());
        assert!(matches!(ema_update(&mut t, &other, 0.5), Err(Error::Structure(_))));
        let mut renamed = ParamStore::new();
        renamed.insert("image.v", arr1(&[1.0, 2.0]).into_dyn());
        assert!(matches!(ema_update(&mut t, &renamed, 0.5), Err(Error::Structure(_))));
    }

    #[test]
    fn center_update_arithmetic() {
        let store = ParamStore::new();
        let mut t = TeacherState::from_student(&store, 1);
        update_center(&mut t, &Array2::from_elem((3, 1), 4.0), 0.5);
        assert_eq!(t.center[0], 2.0);
        update_center(&mut t, &Array2::from_elem((2, 1), 8.0), 0.5);
        assert_eq!(t.center[0], 5.0);
        update_center(&mut t, &Array2::from_elem((2, 1), 100.0), 1.0);
        assert_eq!(t.center[0], 5.0);
        update_center(&mut t, &Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(t.center[0], 2.0);
    }

    #[test]
    fn softmax_codes() {
        let logits = Array3::from_shape_vec((1, 1, 4), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let c = codes_from_logits(&logits, 1.0, None).unwrap();
        // exp(2) / (exp(2) + 3) and 1 / (exp(2) + 3)
        let z = 2f64.exp() + 3.0;
        assert!((c.probs[[0, 0, 0]] - 2f64.exp() / z).abs() < 1e-12);
        assert!((c.probs[[0, 0, 0]] - 0.7113).abs() < 1e-4);
        assert!((c.probs[[0, 0, 1]] - 0.0962).abs() < 1e-4);

        let flat = Array3::from_elem((2, 3, 5), 1.7);
        let u = codes_from_logits(&flat, 0.04, None).unwrap();
        assert!(u.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));

        assert!(matches!(codes_from_logits(&flat, 0.0, None), Err(Error::Config(_))));
    }

    #[test]
    fn head_forward_rejects_non_positive_temperature() {
        let m = SemMimModel::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = FeatureSequence::full(Array3::zeros((1, 2, 64)));
        assert!(matches!(head_forward(&m.params, &f, -1.0, None), Err(Error::Config(_))));
        let c = head_forward(&m.params, &f, 0.1, None).unwrap();
        assert_eq!(c.probs.dim(), (1, 2, 64));
    }

    #[test]
    fn agreement_loss_examples() {
        let uniform = code(&[&[0.25; 4]]);
        let any = code(&[&[0.1, 0.2, 0.3, 0.4]]);
        assert!((agreement_loss(&uniform, &any).unwrap() - 4f64.ln()).abs() < 1e-12);

        let student = code(&[&[0.7, 0.1, 0.1, 0.1]]);
        let onehot = CategoricalCode {
            probs: Array3::from_shape_vec((1, 1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        };
        let ce = agreement_loss(&student, &onehot).unwrap();
        assert!((ce + 0.7f64.ln()).abs() < 1e-12);
        assert!((ce - 0.3567).abs() < 1e-4);
        // A one-hot student would need ln(0).
        assert!(matches!(agreement_loss(&onehot, &student), Err(Error::Input(_))));

        let half = code(&[&[0.5, 0.5]]);
        assert!((agreement_loss(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn agreement_loss_bounded_by_teacher_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut draw = || {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let s = code(&[&draw()]);
            let t = code(&[&draw()]);
            let h = t.entropy()[[0, 0]];
            assert!(agreement_loss(&s, &t).unwrap() >= h - 1e-12);
            assert!((agreement_loss(&t, &t).unwrap() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_pass_shapes_and_no_leak() {
        let cfg = ModelConfig {
            embed_dim: 16,
            heads: 2,
            image_layers: 3,
            inject_start_layer: 2,
            code_dim: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = SemMimModel::new(cfg.clone(), &mut rng).unwrap();
        let teacher = TeacherState::from_student(&m.params, cfg.code_dim);
        let img = ImageBatch::new(Array4::from_shape_simple_fn((2, 3, 32, 32), || rng.random())).unwrap();
        let text = FeatureSequence::full(Array3::from_shape_simple_fn((2, 5, 16), || rng.random_range(-1.0..1.0)));
        let with = teacher_forward_dual(&img, Some(&text), &teacher, &cfg).unwrap();
        let without = teacher_forward_dual(&img, None, &teacher, &cfg).unwrap();
        assert_eq!(with.cls.probs.dim(), (2, 1, 8));
        assert_eq!(with.patches.probs.dim(), (2, 16, 8));
        assert_eq!(with.cls, without.cls);
        assert_ne!(with.patches, without.patches);
        assert_eq!(with.plain_patches, without.patches);
    }

    #[test]
    fn dual_pass_with_inert_text_matches_plain_pass() {
        let cfg = ModelConfig {
            embed_dim: 16,
            heads: 2,
            image_layers: 2,
            inject_start_layer: 2,
            code_dim: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = SemMimModel::new(cfg.clone(), &mut rng).unwrap();
        let teacher = TeacherState::from_student(&m.params, cfg.code_dim);
        let img = ImageBatch::new(Array4::from_shape_simple_fn((2, 3, 32, 32), || rng.random())).unwrap();
        let text = FeatureSequence {
            values: Array3::zeros((2, 4, 16)),
            lengths: vec![0, 0],
        };
        let out = teacher_forward_dual(&img, Some(&text), &teacher, &cfg).unwrap();
        let diff = (&out.patches.probs - &out.plain_patches.probs)
            .mapv(f64::abs)
            .fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }
}
