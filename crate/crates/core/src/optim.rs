//! AdamW with decoupled weight decay, two learning-rate groups, and a
//! linear-warmup cosine schedule.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Parameters whose names start with this prefix train at the image rate.
pub const IMAGE_GROUP_PREFIX: &str = "image.";

/// Linear warmup over `warmup` steps to `peak`, then cosine decay to
/// `peak * min_ratio` at `total` steps. `step` is 0-based.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let floor = peak * min_ratio;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Learning rates of the two groups at `step`: `(image, rest)`.
pub fn group_rates(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    let f = |peak| lr_at(step, peak, cfg.warmup_steps, cfg.steps, cfg.min_lr_ratio);
    (f(cfg.lr_image), f(cfg.lr_rest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        }
    }
}

/// Optimizer state: first and second moments per parameter and the number
/// of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut out = ParamStore::new();
            for (k, v) in p.iter() {
                out.insert(k.clone(), v.mapv(|_| 0.0));
            }
            out
        };
        Self {
            cfg,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    /// One update. `lr_of` maps a parameter name to its learning rate. Weight
    /// decay applies to matrices only, not to biases, norms or scalars.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr_of: impl Fn(&str) -> f64) -> Result<()> {
        params.check_same_structure(grads)?;
        params.check_same_structure(&self.m)?;
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap();
            let lr = lr_of(name);
            let decay = if p.ndim() == 2 { weight_decay } else { 0.0 };
            let m = self.m.tensor_mut(name);
            let v = self.v.tensor_mut(name);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn schedule_shape() {
        let peak = 1e-3;
        assert!((lr_at(0, peak, 50, 200, 1e-2) - peak / 50.0).abs() < 1e-15);
        assert!((lr_at(49, peak, 50, 200, 1e-2) - peak).abs() < 1e-15);
        assert!((lr_at(50, peak, 50, 200, 1e-2) - peak).abs() < 1e-15);
        assert!((lr_at(200, peak, 50, 200, 1e-2) - peak * 1e-2).abs() < 1e-15);
        assert!((lr_at(500, peak, 50, 200, 1e-2) - peak * 1e-2).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 50..=200 {
            let lr = lr_at(s, peak, 50, 200, 1e-2);
            assert!(lr <= prev);
            prev = lr;
        }
        let cfg = TrainConfig::default();
        let (a, b) = group_rates(&cfg, 60);
        assert!((b / a - cfg.lr_rest / cfg.lr_image).abs() < 1e-9);
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", arr2(&[[1.0, -2.0], [0.5, 3.0]]).into_dyn());
        p.insert("b", arr1(&[0.1, -0.1]).into_dyn());
        p
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = store();
        let before = p.clone();
        let mut g = store();
        for (_, t) in g.iter_mut() {
            t.fill(0.3);
        }
        let mut opt = AdamW::new(AdamWConfig::from(&TrainConfig::default()), &p);
        opt.step(&mut p, &g, |_| 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store();
        let mut g = store();
        for (_, t) in g.iter_mut() {
            t.mapv_inplace(|v| v * 10.0);
        }
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 0.0,
            weight_decay: 0.0,
        };
        let before = p.clone();
        AdamW::new(cfg, &p).step(&mut p, &g, |_| 0.01).unwrap();
        for (name, t) in p.iter() {
            let b = before.get(name).unwrap();
            for (x, y) in t.iter().zip(b.iter()) {
                assert!(((y - x) - 0.01 * y.signum()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut p = store();
        let mut g = store();
        for (_, t) in g.iter_mut() {
            t.fill(0.0);
        }
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let before = p.clone();
        AdamW::new(cfg, &p).step(&mut p, &g, |_| 0.1).unwrap();
        assert_eq!(p.get("b"), before.get("b"));
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = store();
        let mut g = store();
        g.tensor_mut("b")[[0]] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::from(&TrainConfig::default()), &p);
        assert!(matches!(opt.step(&mut p, &g, |_| 0.1), Err(Error::NonFinite(_))));
    }
}
