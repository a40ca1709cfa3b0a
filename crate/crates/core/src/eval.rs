//! Retrieval evaluation and patch-code pattern analysis.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{patch_labels, vocab, DatasetManifest, Record, Split};
use crate::masking::{patch_text_similarity, sample_mask, sampling_probabilities};
use crate::distill::{teacher_forward_dual, TeacherState};
use crate::error::{Error, Result};
use crate::model::{
    encode_image_graph, encode_text_graph, fuse_graph, layers::linear, FeatureSequence, FuseOptions, ImageBatch,
    ImageEncodeOptions, SemMimModel, TokenBatch,
};
use crate::objectives::{cosine_matrix, itc_embeddings};
use crate::params::Bound;
use crate::train::Corpus;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recall@{1,5,10} as fractions in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub pairs: usize,
    pub image_to_text: [f64; 3],
    pub text_to_image: [f64; 3],
}

impl RecallTable {
    pub fn r1(&self) -> (f64, f64) {
        (self.image_to_text[0], self.text_to_image[0])
    }
}

/// 0-based rank of candidate `truth` in `scores`: the number of candidates
/// scoring higher, plus equal-scoring candidates at lower indices.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

fn recalls(ranks: &[usize]) -> [f64; 3] {
    RECALL_KS.map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// Recall table of a square similarity matrix (rows images, columns texts,
/// true pairs on the diagonal).
pub fn recall_at_k(sim: &Array2<f64>) -> Result<RecallTable> {
    recall_directions(sim, sim)
}

/// Image-to-text ranks from the rows of `i2t`, text-to-image ranks from the
/// columns of `t2i`.
pub fn recall_directions(i2t: &Array2<f64>, t2i: &Array2<f64>) -> Result<RecallTable> {
    let n = i2t.nrows();
    for m in [i2t, t2i] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::Shape(format!("similarity matrix {:?} is not {n}x{n}", m.dim())));
        }
    }
    if n < 2 {
        return Err(Error::Input(format!("retrieval needs at least 2 pairs, got {n}")));
    }
    let ranks_i2t: Vec<usize> = (0..n).map(|i| rank_of(&i2t.row(i).to_vec(), i)).collect();
    let ranks_t2i: Vec<usize> = (0..n).map(|j| rank_of(&t2i.column(j).to_vec(), j)).collect();
    Ok(RecallTable {
        pairs: n,
        image_to_text: recalls(&ranks_i2t),
        text_to_image: recalls(&ranks_t2i),
    })
}

/// ITC embeddings `(images, texts)` of a batch.
pub fn itc_features(model: &SemMimModel, images: &ImageBatch, tokens: &TokenBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &model.params, false);
    let iv = encode_image_graph(&mut g, &p, &model.cfg, images, ImageEncodeOptions::default())?;
    let tv = encode_text_graph(&mut g, &p, &model.cfg, tokens)?;
    let (ie, te) = itc_embeddings(&mut g, &p, &iv, &tv);
    let conv = |v| g.value(v).clone().into_dimensionality().expect("2-d");
    Ok((conv(ie), conv(te)))
}

/// Matching score (logit of "matched" minus "not matched") for every
/// `(image, text)` pair listed.
pub fn itm_scores(model: &SemMimModel, images: &FeatureSequence, texts: &FeatureSequence, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &model.params, false);
    let iv = images.to_var(&mut g);
    let tv = texts.to_var(&mut g);
    let (ir, tr): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let iv = iv.select_rows(&mut g, &ir);
    let tv = tv.select_rows(&mut g, &tr);
    let fused = fuse_graph(&mut g, &p, &model.cfg, &iv, &tv, FuseOptions::default())?;
    let cls = fused.cls(&mut g);
    let logits = linear(&mut g, &p, "itm.head", cls);
    let l = g.value(logits);
    Ok((0..pairs.len()).map(|i| l[[i, 1]] - l[[i, 0]]).collect())
}

/// Retrieval on a split: ITC cosine similarity, optionally reranking the
/// top `rerank` candidates of every query by the matching head.
pub fn eval_retrieval(model: &SemMimModel, manifest: &DatasetManifest, split: Split, rerank: Option<usize>) -> Result<RecallTable> {
    let corpus = Corpus::from_manifest(manifest, split, &model.cfg)?;
    if corpus.len() < 2 {
        return Err(Error::Input(format!("split {split:?} has {} pairs; need at least 2", corpus.len())));
    }
    let batch = corpus.all()?;
    let (ie, te) = itc_features(model, &batch.images, &batch.tokens)?;
    let sim = cosine_matrix(&ie, &te);
    match rerank.filter(|&k| k > 0) {
        None => recall_at_k(&sim),
        Some(k) => {
            let images = model.encode_image(&batch.images, None, None)?;
            let texts = model.encode_text(&batch.tokens)?;
            let (i2t, t2i) = rerank_similarity(model, &sim, &images, &texts, k)?;
            recall_directions(&i2t, &t2i)
        }
    }
}

/// Rescores each query's ITC top-`k` candidates with the matching head.
/// Candidates outside the top-k stay below every reranked one, in ITC order.
fn rerank_similarity(
    model: &SemMimModel,
    sim: &Array2<f64>,
    images: &FeatureSequence,
    texts: &FeatureSequence,
    k: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = sim.nrows();
    let k = k.min(n);
    let top = |scores: Vec<f64>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    };
    // Cosines lie in [-1, 1]; shifting them down keeps them under any score.
    let mut i2t = sim.mapv(|v| v - 1e6);
    let mut t2i = i2t.clone();
    for i in 0..n {
        let cands = top(sim.row(i).to_vec());
        let pairs: Vec<_> = cands.iter().map(|&j| (i, j)).collect();
        for (&j, s) in cands.iter().zip(itm_scores(model, images, texts, &pairs)?) {
            i2t[[i, j]] = s;
        }
    }
    for j in 0..n {
        let cands = top(sim.column(j).to_vec());
        let pairs: Vec<_> = cands.iter().map(|&i| (i, j)).collect();
        for (&i, s) in cands.iter().zip(itm_scores(model, images, texts, &pairs)?) {
            t2i[[i, j]] = s;
        }
    }
    Ok((i2t, t2i))
}

/// Patch-code layouts and clusters of a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub grid: usize,
    pub code_dim: usize,
    /// Per image, the argmax code of each patch in row-major order.
    pub layouts: Vec<Vec<usize>>,
    /// Per image, the ground-truth label of each patch.
    pub labels: Vec<Vec<u8>>,
    /// Code id to its member patches as `(image, patch)`.
    pub clusters: BTreeMap<usize, Vec<(usize, usize)>>,
    pub purity: f64,
}

impl PatternReport {
    /// Layout of one image as `grid` rows of code ids.
    pub fn layout_grid(&self, image: usize) -> Vec<Vec<usize>> {
        self.layouts[image].chunks(self.grid).map(|c| c.to_vec()).collect()
    }
}

/// Fraction of patches whose label equals the majority label of their code,
/// pooled over the whole dataset.
pub fn purity(codes: &[usize], labels: &[u8]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
    for (&c, &l) in codes.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / codes.len() as f64
}

/// Teacher patch codes of every record from the text-free pass, their
/// argmax layouts, clusters and purity against the rendered labels.
pub fn pattern_report(teacher: &TeacherState, cfg: &crate::ModelConfig, manifest: &DatasetManifest, records: &[&Record]) -> Result<PatternReport> {
    let n = cfg.num_patches();
    let mut layouts = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let images = manifest.images(chunk);
        let codes = teacher_forward_dual(&images, None, teacher, cfg)?;
        let arg = codes.plain_patches.argmax();
        for (row, r) in arg.rows().into_iter().zip(chunk) {
            layouts.push(row.to_vec());
            let (_, lab) = r.scene.render(cfg.image_size);
            labels.push(patch_labels(&lab, cfg.patch_size));
        }
    }
    let mut clusters: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (img, layout) in layouts.iter().enumerate() {
        debug_assert_eq!(layout.len(), n);
        for (patch, &c) in layout.iter().enumerate() {
            clusters.entry(c).or_default().push((img, patch));
        }
    }
    let flat_codes: Vec<usize> = layouts.iter().flatten().copied().collect();
    let flat_labels: Vec<u8> = labels.iter().flatten().copied().collect();
    Ok(PatternReport {
        grid: cfg.grid(),
        code_dim: cfg.code_dim,
        purity: purity(&flat_codes, &flat_labels),
        layouts,
        labels,
        clusters,
    })
}

/// Pattern report over one split of a manifest.
pub fn pattern_report_split(teacher: &TeacherState, cfg: &crate::ModelConfig, manifest: &DatasetManifest, split: Option<Split>) -> Result<PatternReport> {
    let records: Vec<&Record> = match split {
        Some(s) => manifest.split(s),
        None => manifest.records.iter().collect(),
    };
    pattern_report(teacher, cfg, manifest, &records)
}

/// What text-guided masking would do to one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDebugRecord {
    pub image_idx: usize,
    pub caption: String,
    pub num_patches: usize,
    pub mask_count: usize,
    pub similarity: Vec<f64>,
    pub probs: Vec<f64>,
    /// Sorted 0-based patch indices.
    pub indices: Vec<usize>,
}

/// Scores the patches of record `idx` against its caption with the student
/// encoders and draws one mask from `seed`.
pub fn mask_debug(model: &SemMimModel, manifest: &DatasetManifest, idx: usize, seed: u64) -> Result<MaskDebugRecord> {
    let record = manifest
        .records
        .get(idx)
        .ok_or_else(|| Error::Input(format!("image index {idx} outside 0..{}", manifest.records.len())))?;
    let cfg = &model.cfg;
    let images = manifest.images(&[record]);
    let tokens = TokenBatch::from_rows(&[vocab::tokenize(&record.caption, cfg.max_text_len, cfg.vocab_size)?])?;
    let feats = model.encode_image(&images, None, None)?;
    let text = model.encode_text(&tokens)?;
    let patches = feats.values.slice(ndarray::s![.., 1.., ..]).to_owned();
    let sim = patch_text_similarity(&patches, &text.cls())?;
    let similarity = sim.row(0).to_vec();
    let probs = sampling_probabilities(&similarity);
    let mask = sample_mask(&probs, cfg.mask_ratio, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(MaskDebugRecord {
        image_idx: idx,
        caption: record.caption.clone(),
        num_patches: cfg.num_patches(),
        mask_count: mask.count(),
        similarity,
        probs,
        indices: mask.indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn identity_similarity_is_perfect() {
        let t = recall_at_k(&Array2::eye(6)).unwrap();
        assert_eq!(t.image_to_text, [1.0; 3]);
        assert_eq!(t.text_to_image, [1.0; 3]);
    }

    #[test]
    fn constant_similarity_matches_enumeration() {
        for n in [2usize, 7, 12] {
            let t = recall_at_k(&Array2::from_elem((n, n), 0.3)).unwrap();
            // With lower-index tie breaking, pair i sits at rank i.
            for (slot, k) in RECALL_KS.iter().enumerate() {
                let hits = (0..n).filter(|i| i < k).count() as f64 / n as f64;
                assert_eq!(t.image_to_text[slot], hits);
                assert_eq!(t.text_to_image[slot], hits);
            }
            assert_eq!(t.image_to_text[0], 1.0 / n as f64);
        }
    }

    #[test]
    fn recalls_are_monotone() {
        let sim = Array2::from_shape_fn((15, 15), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let t = recall_at_k(&sim).unwrap();
        for r in [t.image_to_text, t.text_to_image] {
            assert!(r[0] <= r[1] && r[1] <= r[2]);
        }
    }

    #[test]
    fn small_splits_are_rejected() {
        assert!(matches!(recall_at_k(&Array2::eye(1)), Err(Error::Input(_))));
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 0, 0, 0], &[1, 1, 0, 0]), 0.5);
        assert_eq!(purity(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(purity(&[0, 1, 2], &[0, 0, 0]), 1.0);
    }
}
