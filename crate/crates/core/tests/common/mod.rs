//! Fixtures shared by the integration targets.
#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semmim::autograd::Graph;
use semmim::config::{AugmentMode, MimTarget, ModelConfig, RunConfig, TrainConfig};
use semmim::data::augment::ViewPair;
use semmim::data::vocab;
use semmim::distill::{TeacherCodes, TeacherState};
use semmim::gradcheck::{check_gradients, GradCheckReport};
use semmim::masking::{random_mask, PatchMask};
use semmim::mim::{patch_loss_graph, MimFixed};
use semmim::model::{encode_text_graph, init_params, ImageBatch, TokenBatch};
use semmim::optim::{AdamW, AdamWConfig};
use semmim::params::{Bound, ParamStore};
use semmim::train::build_losses;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;
/// Below this magnitude gradients are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Model small enough for exhaustive finite differences.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        embed_dim: 3,
        image_layers: 2,
        text_layers: 1,
        fusion_layers: 1,
        decoder_layers: 1,
        heads: 1,
        mlp_ratio: 1,
        vocab_size: 8,
        max_text_len: 3,
        code_dim: 4,
        head_hidden: 2,
        inject_start_layer: 2,
        mask_ratio: 0.5,
        ..ModelConfig::default()
    }
}

pub fn random_images(b: usize, size: usize, rng: &mut impl Rng) -> ImageBatch {
    ImageBatch::new(Array4::from_shape_simple_fn((b, 3, size, size), || rng.random::<f64>())).unwrap()
}

/// Inputs for the loss-level gradient checks: three pairs, captions of
/// different lengths, two masked patches per image.
pub struct GradFixture {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub teacher: TeacherState,
    pub views: ViewPair,
    pub tokens: TokenBatch,
    pub masks: Vec<PatchMask>,
    /// Teacher codes of the unperturbed student, held fixed so finite
    /// differences see the same stop-gradient as the analytic pass.
    pub codes: TeacherCodes,
}

impl GradFixture {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng);
        // A teacher that differs from the student gives non-trivial targets.
        let other = init_params(&cfg, &mut rng);
        let mut teacher = TeacherState::from_student(&other, cfg.code_dim);
        teacher.center.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let views = ViewPair {
            view1: random_images(3, cfg.image_size, &mut rng),
            view2: random_images(3, cfg.image_size, &mut rng),
        };
        let w = vocab::SPECIAL_TOKENS;
        let tokens = TokenBatch::from_rows(&[
            vec![vocab::CLS, w, w + 1, w + 2],
            vec![vocab::CLS, w + 3, w],
            vec![vocab::CLS, w + 2, w + 3, w + 1],
        ])
        .unwrap();
        let n = cfg.num_patches();
        let masks = vec![
            PatchMask::from_indices(vec![0, 3], n, cfg.mask_ratio),
            PatchMask::from_indices(vec![1, 2], n, cfg.mask_ratio),
            PatchMask::from_indices(vec![2, 3], n, cfg.mask_ratio),
        ];
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &params, false);
        let fixed = MimFixed {
            masks: Some(masks.clone()),
            teacher: None,
        };
        let codes = build_losses(&mut g, &p, &cfg, &views, &tokens, &teacher, fixed, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .mim
            .teacher;
        Self {
            cfg,
            params,
            teacher,
            views,
            tokens,
            masks,
            codes,
        }
    }

    pub fn fixed(&self) -> MimFixed {
        MimFixed {
            masks: Some(self.masks.clone()),
            teacher: Some(self.codes.clone()),
        }
    }

    /// Value and parameter gradient of loss `part` (0..6) or of the total
    /// (`None`). The RNG is reseeded so every evaluation draws the same
    /// negatives, word masks and split points.
    pub fn loss_and_grad(&self, params: &ParamStore, part: Option<usize>, want_grad: bool) -> (f64, Option<ParamStore>) {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, want_grad);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let losses = build_losses(
            &mut g,
            &p,
            &self.cfg,
            &self.views,
            &self.tokens,
            &self.teacher,
            self.fixed(),
            &mut rng,
        )
        .unwrap();
        let root = match part {
            Some(i) => losses.parts[i].expect("loss present"),
            None => losses.total,
        };
        let value = g.item(root);
        let grad = want_grad.then(|| {
            let grads = g.backward(root);
            p.gradients(&g, &grads, params)
        });
        (value, grad)
    }

    pub fn check(&self, part: Option<usize>) -> GradCheckReport {
        let (_, grad) = self.loss_and_grad(&self.params, part, true);
        check_gradients(
            &self.params,
            &grad.unwrap(),
            |ps| Ok(self.loss_and_grad(ps, part, false).0),
            GRAD_STEP,
            GRAD_FLOOR,
            |_| true,
        )
        .unwrap()
    }
}

/// Configuration for short end-to-end runs.
pub fn small_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            image_layers: 2,
            text_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            code_dim: 16,
            head_hidden: 16,
            inject_start_layer: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 8,
            steps: 6,
            warmup_steps: 2,
            corpus_size: 24,
            heldout: 8,
            ..TrainConfig::default()
        },
    }
}

/// Classes used by the text-recovery construction.
pub const RECOVERY_CLASSES: usize = 4;

/// Model for the text-recovery construction.
pub fn recovery_config(inject_text: bool) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 32,
        image_layers: 2,
        text_layers: 1,
        fusion_layers: 1,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        code_dim: 8,
        head_hidden: 32,
        inject_start_layer: 2,
        inject_text,
        mim_target: MimTarget::Semantic,
        ..ModelConfig::default()
    }
}

/// L_patch before and after training on a batch whose patch targets can be
/// recovered only from the caption: pixels are fresh noise at every step,
/// the caption names one of [`RECOVERY_CLASSES`] classes, and every patch of
/// a class-`c` image has the one-hot target `c`. Only the patch loss is
/// trained. Before and after values use fixed held-out noise and masks.
pub struct RecoveryOutcome {
    pub initial: f64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
}

pub fn text_recovery(inject_text: bool, steps: usize, seed: u64) -> RecoveryOutcome {
    let cfg = recovery_config(inject_text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let b = 16;
    let n = cfg.num_patches();
    let classes: Vec<usize> = (0..b).map(|i| i % RECOVERY_CLASSES).collect();
    let rows: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| vec![vocab::CLS, vocab::SPECIAL_TOKENS + c])
        .collect();
    let tokens = TokenBatch::from_rows(&rows).unwrap();
    let mut targets = Array3::zeros((b, n, cfg.code_dim));
    for (i, &c) in classes.iter().enumerate() {
        for s in 0..n {
            targets[[i, s, c]] = 1.0;
        }
    }

    let loss_of = |params: &ParamStore, images: &ImageBatch, masks: &[PatchMask], grad: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, grad);
        let text = encode_text_graph(&mut g, &p, &cfg, &tokens).unwrap();
        let (loss, _) = patch_loss_graph(
            &mut g,
            &p,
            &cfg,
            images,
            cfg.inject_text.then_some(&text),
            masks,
            &targets,
        )
        .unwrap();
        let value = g.item(loss);
        let grads = grad.then(|| {
            let gr = g.backward(loss);
            p.gradients(&g, &gr, params)
        });
        (value, grads)
    };

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
    let eval_sets: Vec<(ImageBatch, Vec<PatchMask>)> = (0..4)
        .map(|_| {
            let images = random_images(b, cfg.image_size, &mut eval_rng);
            let masks = (0..b).map(|_| random_mask(n, cfg.mask_ratio, &mut eval_rng).unwrap()).collect();
            (images, masks)
        })
        .collect();
    let evaluate = |params: &ParamStore| {
        eval_sets.iter().map(|(i, m)| loss_of(params, i, m, false).0).sum::<f64>() / eval_sets.len() as f64
    };

    let initial = evaluate(&params);
    let mut optim = AdamW::new(
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        &params,
    );
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let images = random_images(b, cfg.image_size, &mut rng);
        let masks: Vec<PatchMask> = (0..b).map(|_| random_mask(n, cfg.mask_ratio, &mut rng).unwrap()).collect();
        let (value, grads) = loss_of(&params, &images, &masks, true);
        curve.push(value);
        optim.step(&mut params, &grads.unwrap(), |_| 1e-3).unwrap();
    }
    RecoveryOutcome {
        initial,
        final_loss: evaluate(&params),
        curve,
    }
}

/// Draws used by the masking-statistics checks.
pub const MASK_DRAWS: usize = 100_000;

/// Inclusion probability of each index when two are drawn sequentially
/// without replacement, by enumerating all ordered pairs.
pub fn exact_inclusion_two(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut inc = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pr = p[i] * p[j] / (1.0 - p[i]);
                inc[i] += pr;
                inc[j] += pr;
            }
        }
    }
    inc
}

/// Fraction of draws that include each index.
pub fn frequencies(n: usize, draws: usize, mut draw: impl FnMut() -> Vec<usize>) -> Vec<f64> {
    let mut hits = vec![0usize; n];
    for _ in 0..draws {
        for i in draw() {
            hits[i] += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / draws as f64).collect()
}

/// Largest deviation of a frequency from its expectation, in binomial
/// standard deviations.
pub fn max_sigma(freq: &[f64], expect: &[f64], draws: usize) -> f64 {
    freq.iter()
        .zip(expect)
        .map(|(&f, &q)| (f - q).abs() / (q * (1.0 - q) / draws as f64).sqrt())
        .fold(0.0, f64::max)
}

/// Seeded run configuration with identity augmentation, for exact
/// reproducibility checks that do not depend on augmentation.
pub fn identity_augment(mut run: RunConfig) -> RunConfig {
    run.train.augment = AugmentMode::Identity;
    run
}
