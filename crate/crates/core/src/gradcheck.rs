//! Central finite-difference checks of analytic parameter gradients.

use crate::error::Result;
use crate::params::ParamStore;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Scalar entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries whose true
/// gradient is zero from turning rounding noise into a large ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grad` against the five-point central difference
/// `(f(p-2h) - 8f(p-h) + 8f(p+h) - f(p+2h)) / 12h` for every entry of every
/// parameter selected by `include`. Its truncation error is O(h^4), which
/// matters around layer norms of nearly constant inputs.
pub fn check_gradients(
    params: &ParamStore,
    grad: &ParamStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
    floor: f64,
    include: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let names: Vec<String> = params.names().filter(|n| include(n)).cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().as_slice().unwrap()[i];
            let mut at = |offset: f64| {
                work.tensor_mut(&name).as_slice_mut().unwrap()[i] = orig + offset;
                loss(&work)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
            work.tensor_mut(&name).as_slice_mut().unwrap()[i] = orig;
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            let analytic = grad.get(&name).map_or(0.0, |g| g.as_slice().unwrap()[i]);
            let err = relative_error(analytic, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut p = ParamStore::new();
        p.insert("x", arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let f = |s: &ParamStore| Ok(s.get("x").unwrap().iter().map(|v| v * v * v).sum::<f64>());
        let mut g = ParamStore::new();
        g.insert("x", arr1(&[3.0, 12.0, 0.75]).into_dyn());
        let r = check_gradients(&p, &g, f, 1e-5, 1e-8, |_| true).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "{r:?}");

        g.tensor_mut("x")[[1]] = 11.0;
        let r = check_gradients(&p, &g, f, 1e-5, 1e-8, |_| true).unwrap();
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst.unwrap().1, 1);
    }

    #[test]
    fn floor_bounds_noise_on_zero_gradients() {
        assert!((relative_error(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-15);
        assert_eq!(relative_error(2.0, 1.0, 1e-8), 0.5);
    }
}
