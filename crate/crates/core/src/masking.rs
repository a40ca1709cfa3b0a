//! Masked-patch selection: text-guided (similarity-weighted) and uniform.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Masked patches of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    /// Sorted, distinct 0-based patch indices (sequence slot minus one).
    pub indices: Vec<usize>,
    /// Sampling distribution the indices were drawn from, length N.
    pub probs: Vec<f64>,
    pub ratio: f64,
}

impl PatchMask {
    /// A mask with explicit indices and a uniform `probs` record.
    pub fn from_indices(mut indices: Vec<usize>, n: usize, ratio: f64) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            indices,
            probs: vec![1.0 / n as f64; n],
            ratio,
        }
    }

    /// Number of masked patches M.
    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn num_patches(&self) -> usize {
        self.probs.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// `round(ratio * n)` with halves rounded up and a floor of one.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Cosine similarity of every patch feature with the text's global feature,
/// `(B, N, D) x (B, D) -> (B, N)`. A zero-norm vector gives similarity 0.
pub fn patch_text_similarity(patch_feats: &Array3<f64>, text_global: &Array2<f64>) -> Result<Array2<f64>> {
    let (b, n, d) = patch_feats.dim();
    if text_global.dim() != (b, d) {
        return Err(Error::Shape(format!(
            "text global features {:?} for patches {:?}",
            text_global.dim(),
            (b, n, d)
        )));
    }
    let mut out = Array2::zeros((b, n));
    for bi in 0..b {
        let t = text_global.row(bi);
        let tn = t.dot(&t).sqrt();
        for i in 0..n {
            let p = patch_feats.slice(ndarray::s![bi, i, ..]);
            let pn = p.dot(&p).sqrt();
            out[[bi, i]] = if pn == 0.0 || tn == 0.0 {
                0.0
            } else {
                (p.dot(&t) / (pn * tn)).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(out)
}

/// Softmax of the similarity scores.
pub fn sampling_probabilities(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Draws `mask_count(N, ratio)` distinct patches one at a time, each with
/// probability proportional to `probs` among the patches not yet drawn.
/// If the positive mass runs out early, the remaining draws are uniform over
/// the patches still available.
pub fn sample_mask<R: Rng + ?Sized>(probs: &[f64], ratio: f64, rng: &mut R) -> Result<PatchMask> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::Input("no patches to mask".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Input("sampling probabilities are not on the simplex".into()));
    }
    let m = mask_count(n, ratio);
    let positive = probs.iter().filter(|&&p| p > 0.0).count();
    if positive < m {
        log::warn!(
            "only {positive} patches have positive probability for {m} draws; \
             falling back to uniform draws for the rest"
        );
    }

    let mut weights = probs.to_vec();
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    for _ in 0..m {
        let mass: f64 = weights.iter().sum();
        let pick = if mass > 0.0 {
            let u = rng.random::<f64>() * mass;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            pick.unwrap()
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        weights[pick] = 0.0;
        indices.push(pick);
    }
    indices.sort_unstable();
    Ok(PatchMask {
        indices,
        probs: probs.to_vec(),
        ratio,
    })
}

/// Uniform masking baseline.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<PatchMask> {
    if n == 0 {
        return Err(Error::Input("no patches to mask".into()));
    }
    sample_mask(&vec![1.0 / n as f64; n], ratio, rng)
}

/// Text-guided masks for a whole batch: similarity, softmax, then sampling,
/// row by row in batch order.
pub fn text_guided_masks<R: Rng + ?Sized>(
    patch_feats: &Array3<f64>,
    text_global: &Array2<f64>,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<PatchMask>> {
    let sims = patch_text_similarity(patch_feats, text_global)?;
    sims.axis_iter(Axis(0))
        .map(|row| {
            let probs = sampling_probabilities(&row.to_vec());
            sample_mask(&probs, ratio, rng)
        })
        .collect()
}
