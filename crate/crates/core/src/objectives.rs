//! Image-text contrastive, image-text matching, masked and prefix language
//! modeling losses, and their unweighted sum.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, NegativeSampling};
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::masking::mask_count;
use crate::model::{decode_graph, encode_text_graph, fuse_graph, layers::linear, FuseOptions, SeqVar, TokenBatch};
use crate::params::Bound;

pub const LOSS_NAMES: [&str; 6] = ["cls", "patch", "itc", "itm", "mlm", "plm"];

/// The six pre-training losses of one step and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub patch: f64,
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub plm: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 6] {
        [self.cls, self.patch, self.itc, self.itm, self.mlm, self.plm]
    }
}

/// Equal-weight sum. A non-finite component aborts with its name.
pub fn total_loss(components: [f64; 6]) -> Result<LossBundle> {
    for (name, v) in LOSS_NAMES.iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let [cls, patch, itc, itm, mlm, plm] = components;
    Ok(LossBundle {
        cls,
        patch,
        itc,
        itm,
        mlm,
        plm,
        total: cls + patch + itc + itm + mlm + plm,
    })
}

/// Mean cross entropy against integer targets `(row, position, token)` over
/// logits `(B, T, V)`.
pub fn token_cross_entropy(g: &mut Graph, logits: Var, targets: &[(usize, usize, usize)]) -> Var {
    let shape = g.shape(logits).to_vec();
    let mut w = ArrayD::zeros(IxDyn(&shape));
    let scale = 1.0 / targets.len() as f64;
    for &(b, t, tok) in targets {
        w[[b, t, tok]] += scale;
    }
    let logp = g.log_softmax(logits);
    let w = g.constant(w);
    let prod = g.mul(logp, w);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}

// ---------------------------------------------------------------- ITC

/// Symmetric InfoNCE over in-batch pairs on L2-normalised features.
/// `temperature` is a scalar node so it can be learned.
pub fn itc_loss_graph(g: &mut Graph, image_cls: Var, text_cls: Var, temperature: Var) -> Var {
    let b = g.shape(image_cls)[0];
    let i = g.l2_normalize(image_cls);
    let t = g.l2_normalize(text_cls);
    let tt = g.permute(t, &[1, 0]);
    let sim = g.matmul(i, tt);
    let inv = g.recip(temperature);
    let logits = g.mul(sim, inv);
    let diag: Vec<(usize, usize, usize)> = (0..b).map(|k| (0, k, k)).collect();
    let l3 = g.reshape(logits, &[1, b, b]);
    let i2t = token_cross_entropy(g, l3, &diag);
    let lt = g.permute(logits, &[1, 0]);
    let lt3 = g.reshape(lt, &[1, b, b]);
    let t2i = token_cross_entropy(g, lt3, &diag);
    let s = g.add(i2t, t2i);
    g.scale(s, 0.5)
}

pub fn itc_loss(image_cls: &Array2<f64>, text_cls: &Array2<f64>, temperature: f64) -> Result<f64> {
    if image_cls.dim() != text_cls.dim() || image_cls.nrows() == 0 {
        return Err(Error::Shape(format!("{:?} vs {:?}", image_cls.dim(), text_cls.dim())));
    }
    let mut g = Graph::new();
    let i = g.constant(image_cls.clone().into_dyn());
    let t = g.constant(text_cls.clone().into_dyn());
    let temp = g.scalar(temperature);
    let l = itc_loss_graph(&mut g, i, t, temp);
    Ok(g.item(l))
}

/// Cosine similarity matrix `(B_img, B_txt)`.
pub fn cosine_matrix(image: &Array2<f64>, text: &Array2<f64>) -> Array2<f64> {
    let norm = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        m
    };
    norm(image).dot(&norm(text).t())
}

/// Projected ITC embeddings on the graph: `(image, text)`, not normalised.
pub fn itc_embeddings(g: &mut Graph, p: &Bound, image: &SeqVar, text: &SeqVar) -> (Var, Var) {
    let ic = image.cls(g);
    let tc = text.cls(g);
    (
        linear(g, p, "itc.image_proj", ic),
        linear(g, p, "itc.text_proj", tc),
    )
}

// ---------------------------------------------------------------- ITM

/// For every image a negative text, and for every text a negative image,
/// drawn from the other rows of the batch. With `Hard` sampling the draw is
/// weighted by `softmax(sim / temp)` over the off-diagonal entries.
/// Returns `None` for a batch of one.
pub fn sample_itm_negatives<R: Rng + ?Sized>(
    sim: &Array2<f64>,
    temperature: f64,
    strategy: NegativeSampling,
    rng: &mut R,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let b = sim.nrows();
    if b < 2 {
        return None;
    }
    let draw = |row: Vec<f64>, own: usize, rng: &mut R| -> usize {
        let weights: Vec<f64> = match strategy {
            NegativeSampling::Uniform => (0..b).map(|j| if j == own { 0.0 } else { 1.0 }).collect(),
            NegativeSampling::Hard => {
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != own)
                    .map(|(_, &v)| v / temperature)
                    .fold(f64::NEG_INFINITY, f64::max);
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| if j == own { 0.0 } else { (v / temperature - max).exp() })
                    .collect()
            }
        };
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = if own == 0 { 1 } else { 0 };
        for (j, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = j;
                if u < acc {
                    break;
                }
            }
        }
        pick
    };
    let neg_text: Vec<usize> = (0..b).map(|i| draw(sim.row(i).to_vec(), i, rng)).collect();
    let neg_image: Vec<usize> = (0..b).map(|j| draw(sim.column(j).to_vec(), j, rng)).collect();
    Some((neg_text, neg_image))
}

/// Binary cross entropy of the two-way matching head, averaged over rows.
/// `labels[i]` is true for a matched pair.
pub fn itm_loss_graph(g: &mut Graph, logits: Var, labels: &[bool]) -> Var {
    let n = labels.len();
    let l3 = g.reshape(logits, &[1, n, 2]);
    let targets: Vec<_> = labels.iter().enumerate().map(|(i, &y)| (0, i, y as usize)).collect();
    token_cross_entropy(g, l3, &targets)
}

pub fn itm_loss(logits: &Array2<f64>, labels: &[bool]) -> Result<f64> {
    if logits.ncols() != 2 || logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("ITM logits {:?} for {} labels", logits.dim(), labels.len())));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone().into_dyn());
    let loss = itm_loss_graph(&mut g, l, labels);
    Ok(g.item(loss))
}

/// ITM on `B` positives plus up to `2B` negatives; fused CLS through the
/// matching head. Hard negatives are weighted by `softmax(itc_sim / temp)`.
#[allow(clippy::too_many_arguments)]
pub fn itm_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &SeqVar,
    text: &SeqVar,
    itc_sim: &Array2<f64>,
    temp: f64,
    rng: &mut R,
) -> Result<Var> {
    let b = itc_sim.nrows();
    let mut img_rows: Vec<usize> = (0..b).collect();
    let mut txt_rows: Vec<usize> = (0..b).collect();
    let mut labels = vec![true; b];
    if let Some((neg_text, neg_image)) = sample_itm_negatives(itc_sim, temp, cfg.itm_negatives, rng) {
        for (i, &t) in neg_text.iter().enumerate() {
            img_rows.push(i);
            txt_rows.push(t);
            labels.push(false);
        }
        for (j, &im) in neg_image.iter().enumerate() {
            img_rows.push(im);
            txt_rows.push(j);
            labels.push(false);
        }
    }
    let iv = image.select_rows(g, &img_rows);
    let tv = text.select_rows(g, &txt_rows);
    let fused = fuse_graph(g, p, cfg, &iv, &tv, FuseOptions::default())?;
    let cls = fused.cls(g);
    let logits = linear(g, p, "itm.head", cls);
    Ok(itm_loss_graph(g, logits, &labels))
}

// ---------------------------------------------------------------- MLM

/// A corrupted token grid and the positions to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmMasking {
    pub input: TokenBatch,
    /// `(row, position, original token)`.
    pub targets: Vec<(usize, usize, usize)>,
}

/// Picks `round(ratio * eligible)` (at least one) word positions per row and
/// corrupts them: 80% become MASK, 10% a random word, 10% stay. CLS and
/// padding are never picked. `None` when no row has an eligible position.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &TokenBatch,
    ratio: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Option<MlmMasking> {
    let mut input = tokens.clone();
    let mut targets = Vec::new();
    for b in 0..tokens.batch() {
        let eligible: Vec<usize> = (1..tokens.lengths[b]).collect();
        if eligible.is_empty() {
            continue;
        }
        let m = mask_count(eligible.len(), ratio);
        let picks = rand::seq::index::sample(rng, eligible.len(), m);
        let mut picked: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();
        picked.sort_unstable();
        for pos in picked {
            let original = tokens.ids[[b, pos]];
            let r: f64 = rng.random();
            input.ids[[b, pos]] = if r < 0.8 {
                vocab::MASK
            } else if r < 0.9 {
                rng.random_range(vocab::SPECIAL_TOKENS..vocab_size)
            } else {
                original
            };
            targets.push((b, pos, original));
        }
    }
    if targets.is_empty() {
        None
    } else {
        Some(MlmMasking { input, targets })
    }
}

/// MLM loss on the fusion encoder output of the corrupted text and the
/// image. `Ok(None)` when nothing was maskable.
pub fn mlm_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    image: &SeqVar,
    rng: &mut R,
) -> Result<Option<Var>> {
    let Some(masking) = mask_tokens(tokens, cfg.mlm_ratio, cfg.vocab_size, rng) else {
        log::warn!("MLM skipped: no maskable tokens in the batch");
        return Ok(None);
    };
    Ok(Some(mlm_forward_masked(g, p, cfg, &masking, image)?))
}

pub fn mlm_forward_masked(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    masking: &MlmMasking,
    image: &SeqVar,
) -> Result<Var> {
    let text = encode_text_graph(g, p, cfg, &masking.input)?;
    let fused = fuse_graph(g, p, cfg, image, &text, FuseOptions::default())?;
    let logits = linear(g, p, "mlm.head", fused.var);
    Ok(token_cross_entropy(g, logits, &masking.targets))
}

// ---------------------------------------------------------------- PLM

/// Prefix / suffix split of a token batch for prefix language modeling.
#[derive(Clone, Debug, PartialEq)]
pub struct PlmSplit {
    /// Batch rows that took part (rows with fewer than two tokens do not).
    pub rows: Vec<usize>,
    pub prefix: TokenBatch,
    /// Teacher-forced decoder input: BOS then all but the last suffix token.
    pub decoder_input: TokenBatch,
    /// `(row in the split batch, decoder position, suffix token)`.
    pub targets: Vec<(usize, usize, usize)>,
}

/// Splits each row at the given point `s` (`1 <= s < len`): prefix is
/// `ids[..s]`, suffix `ids[s..len]`.
pub fn split_at(tokens: &TokenBatch, splits: &[Option<usize>]) -> Result<Option<PlmSplit>> {
    let mut rows = Vec::new();
    let mut prefixes = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (b, split) in splits.iter().enumerate() {
        let Some(s) = *split else { continue };
        let row = tokens.row(b);
        if s == 0 || s >= row.len() {
            return Err(Error::Input(format!("split {s} outside 1..{}", row.len())));
        }
        let suffix = &row[s..];
        let r = rows.len();
        rows.push(b);
        prefixes.push(row[..s].to_vec());
        let mut input = vec![vocab::CLS];
        input.extend_from_slice(&suffix[..suffix.len() - 1]);
        inputs.push(input);
        for (t, &tok) in suffix.iter().enumerate() {
            targets.push((r, t, tok));
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(PlmSplit {
        rows,
        prefix: TokenBatch::from_rows(&prefixes)?,
        decoder_input: TokenBatch::from_rows(&inputs)?,
        targets,
    }))
}

/// Split points drawn uniformly from `[1, len - 1]` per row.
pub fn sample_splits<R: Rng + ?Sized>(tokens: &TokenBatch, rng: &mut R) -> Vec<Option<usize>> {
    tokens
        .lengths
        .iter()
        .map(|&len| (len >= 2).then(|| rng.random_range(1..len)))
        .collect()
}

/// Prefix LM: the prefix is encoded and fused with the image; the decoder
/// predicts the suffix with teacher forcing. `Ok(None)` when no row is long
/// enough to split.
pub fn plm_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    image: &SeqVar,
    rng: &mut R,
) -> Result<Option<Var>> {
    let splits = sample_splits(tokens, rng);
    let Some(split) = split_at(tokens, &splits)? else {
        log::warn!("PLM skipped: no caption has two or more tokens");
        return Ok(None);
    };
    Ok(Some(plm_forward_split(g, p, cfg, &split, image)?))
}

pub fn plm_forward_split(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    split: &PlmSplit,
    image: &SeqVar,
) -> Result<Var> {
    let image = image.select_rows(g, &split.rows);
    let prefix = encode_text_graph(g, p, cfg, &split.prefix)?;
    let fused = fuse_graph(g, p, cfg, &image, &prefix, FuseOptions::default())?;
    let logits = decode_graph(g, p, cfg, &fused, &split.decoder_input)?;
    Ok(token_cross_entropy(g, logits, &split.targets))
}
