//! Training state, the six-loss training step and the pre-training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::vocab;
use crate::data::{augment_two_views, generate_synthetic_corpus, DatasetManifest, Record, Split, ViewPair};
use crate::distill::{ema_update, logit_rows, update_center, TeacherState};
use crate::error::{Error, Result};
use crate::mim::{mim_forward, MimFixed, MimGraph};
use crate::model::{encode_text_graph, ImageBatch, SemMimModel, TokenBatch};
use crate::objectives::{
    cosine_matrix, itc_embeddings, itc_loss_graph, itm_forward, mlm_forward, plm_forward, total_loss, LossBundle,
    LOSS_NAMES,
};
use crate::optim::{group_rates, AdamW, AdamWConfig, IMAGE_GROUP_PREFIX};
use crate::params::Bound;

/// Bounds kept on the learnable contrastive temperature.
pub const ITC_TEMP_RANGE: (f64, f64) = (0.001, 0.5);

/// Images with their tokenised captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: ImageBatch,
    pub tokens: TokenBatch,
}

/// A rendered, tokenised split of a manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub images: ImageBatch,
    pub tokens: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, cfg: &ModelConfig) -> Result<Self> {
        if manifest.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "manifest images are {}px, model expects {}px",
                manifest.image_size, cfg.image_size
            )));
        }
        let records = manifest.split(split);
        let tokens = records
            .iter()
            .map(|r| vocab::tokenize(&r.caption, cfg.max_text_len, cfg.vocab_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images: manifest.images(&records),
            records: records.into_iter().cloned().collect(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| self.tokens[i].clone()).collect();
        Ok(Batch {
            images: self.images.select(idx),
            tokens: TokenBatch::from_rows(&rows)?,
        })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub run: RunConfig,
    pub model: SemMimModel,
    pub teacher: TeacherState,
    pub optim: AdamW,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: parameters drawn from `seed`, teacher a copy of the
    /// student, and the step RNG on its own stream of the same seed.
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.model.validate()?;
        run.train.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SemMimModel::new(run.model.clone(), &mut init_rng)?;
        let teacher = TeacherState::from_student(&model.params, run.model.code_dim);
        let optim = AdamW::new(AdamWConfig::from(&run.train), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            step: 0,
            seed,
            run,
            model,
            teacher,
            optim,
            rng,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn config_hash(&self) -> String {
        self.run.hash()
    }
}

/// The six loss nodes of one step; a skipped loss is `None`.
pub struct LossGraph {
    pub parts: [Option<Var>; 6],
    pub total: Var,
    pub mim: MimGraph,
}

impl LossGraph {
    /// Values of the parts and their sum; fails naming the first non-finite
    /// component.
    pub fn bundle(&self, g: &Graph) -> Result<LossBundle> {
        let mut values = [0.0; 6];
        for (v, part) in values.iter_mut().zip(&self.parts) {
            if let Some(var) = part {
                *v = g.item(*var);
            }
        }
        total_loss(values)
    }
}

/// Builds all six losses of a step on `g`. Randomness (masks, negatives,
/// word masking, split points) is drawn from `rng` in a fixed order;
/// `fixed` pins the masks and teacher codes instead.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<R: rand::Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    views: &ViewPair,
    tokens: &TokenBatch,
    teacher: &TeacherState,
    fixed: MimFixed,
    rng: &mut R,
) -> Result<LossGraph> {
    tokens.check(cfg, true)?;
    let text = encode_text_graph(g, p, cfg, tokens)?;
    let mim = mim_forward(g, p, cfg, views, &text, teacher, fixed, rng)?;

    let (ie, te) = itc_embeddings(g, p, &mim.view1, &text);
    let temp = p.get("itc.temp");
    let itc = itc_loss_graph(g, ie, te, temp);

    let sim = cosine_matrix(&to2(g, ie), &to2(g, te));
    let temp_value = g.item(temp);
    let itm = itm_forward(g, p, cfg, &mim.view1, &text, &sim, temp_value, rng)?;
    let mlm = mlm_forward(g, p, cfg, tokens, &mim.view1, rng)?;
    let plm = plm_forward(g, p, cfg, tokens, &mim.view1, rng)?;

    let parts = [Some(mim.loss_cls), Some(mim.loss_patch), Some(itc), Some(itm), mlm, plm];
    let mut total = mim.loss_cls;
    for part in parts.iter().skip(1).flatten() {
        total = g.add(total, *part);
    }
    Ok(LossGraph { parts, total, mim })
}

fn to2(g: &Graph, v: Var) -> Array2<f64> {
    g.value(v).clone().into_dimensionality().expect("2-d features")
}

/// One optimisation step: all six losses, backward, AdamW with the two
/// learning-rate groups, then the teacher EMA and center updates. On error
/// the parameters, teacher and optimizer are left as they were.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBundle> {
    let cfg = state.model.cfg.clone();
    let views = augment_two_views(&batch.images, state.run.train.augment, &mut state.rng);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &state.model.params, true);
    let losses = build_losses(&mut g, &p, &cfg, &views, &batch.tokens, &state.teacher, MimFixed::default(), &mut state.rng)?;
    let bundle = losses.bundle(&g)?;
    let grads = g.backward(losses.total);
    let grads = p.gradients(&g, &grads, &state.model.params);

    let (lr_image, lr_rest) = group_rates(&state.run.train, state.step as usize);
    state.optim.step(&mut state.model.params, &grads, |name| {
        if name.starts_with(IMAGE_GROUP_PREFIX) {
            lr_image
        } else {
            lr_rest
        }
    })?;
    state
        .model
        .params
        .tensor_mut("itc.temp")
        .mapv_inplace(|t| t.clamp(ITC_TEMP_RANGE.0, ITC_TEMP_RANGE.1));

    ema_update(&mut state.teacher, &state.model.params, cfg.momentum)?;
    if cfg.centering {
        let t = &losses.mim.teacher;
        update_center(
            &mut state.teacher,
            &logit_rows(&[&t.cls_logits, &t.patch_logits]),
            cfg.center_momentum,
        );
    }
    state.step += 1;
    Ok(bundle)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr_image: f64,
    pub lr_rest: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Draws a batch of distinct indices from the training corpus.
pub fn sample_batch(state: &mut TrainState, corpus: &Corpus) -> Result<Batch> {
    let b = state.run.train.batch_size.min(corpus.len());
    let idx = rand::seq::index::sample(&mut state.rng, corpus.len(), b).into_vec();
    corpus.batch(&idx)
}

/// Runs `steps` training steps, appending one JSON line per step to `log`.
pub fn run_steps(
    state: &mut TrainState,
    corpus: &Corpus,
    steps: usize,
    mut log: Option<&mut dyn Write>,
    mut after_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossBundle>> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = state.step;
        let (lr_image, lr_rest) = group_rates(&state.run.train, step as usize);
        let batch = sample_batch(state, corpus)?;
        let losses = train_step(state, &batch).inspect_err(|e| log::error!("step {step} aborted: {e}"))?;
        if let Some(w) = log.as_deref_mut() {
            let rec = LogRecord {
                step,
                lr_image,
                lr_rest,
                losses,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        log::info!(
            "step {step}: total {:.4} ({})",
            losses.total,
            LOSS_NAMES
                .iter()
                .zip(losses.components())
                .map(|(n, v)| format!("{n} {v:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        out.push(losses);
        after_step(state)?;
    }
    Ok(out)
}

/// Files written by [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub losses: Vec<LossBundle>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.smim";
pub const MANIFEST_FILE: &str = "manifest.json";

/// The corpus a run with this configuration and seed trains on.
pub fn corpus_for(run: &RunConfig, seed: u64) -> Result<DatasetManifest> {
    generate_synthetic_corpus(run.train.corpus_size, run.train.heldout, run.model.image_size, seed)
}

/// Trains `state` for `steps` steps on the training split of `manifest`,
/// writing the log, the manifest and checkpoints under `out`.
pub fn pretrain_from(
    mut state: TrainState,
    manifest: &DatasetManifest,
    steps: usize,
    out: &Path,
) -> Result<(TrainState, PretrainOutput)> {
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    let corpus = Corpus::from_manifest(manifest, Split::Train, state.cfg())?;
    let log_path = out.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(state.step > 0)
            .write(true)
            .truncate(state.step == 0)
            .open(&log_path)?,
    );
    let every = state.run.train.checkpoint_every;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let losses = run_steps(&mut state, &corpus, steps, Some(&mut log), |s| {
        if every > 0 && s.step % every as u64 == 0 {
            checkpoint::save(s, &out.join(format!("checkpoint_{:06}.smim", s.step)))?;
        }
        Ok(())
    });
    log.flush()?;
    let losses = losses?;
    checkpoint::save(&state, &ckpt_path)?;
    Ok((
        state,
        PretrainOutput {
            checkpoint: ckpt_path,
            log: log_path,
            manifest: manifest_path,
            losses,
        },
    ))
}

/// Fresh run: generates the corpus from `seed` and trains.
pub fn pretrain(run: RunConfig, seed: u64, steps: usize, out: &Path) -> Result<(TrainState, PretrainOutput)> {
    let manifest = corpus_for(&run, seed)?;
    let state = TrainState::new(run, seed)?;
    pretrain_from(state, &manifest, steps, out)
}

/// Mean of `values[from..from + len]`.
pub fn window_mean(values: &[f64], from: usize, len: usize) -> f64 {
    let w = &values[from.min(values.len())..(from + len).min(values.len())];
    w.iter().sum::<f64>() / w.len().max(1) as f64
}
