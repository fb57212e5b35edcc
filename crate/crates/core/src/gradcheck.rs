//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward code it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradCheckTolerance {
    pub rel: f64,
    /// Absolute error accepted near zero.
    pub abs: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: GradCheckTolerance,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| !c.ok)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Coordinates checked for one tensor.
    pub fn count_for(&self, tensor: usize) -> usize {
        self.checks.iter().filter(|c| c.tensor == tensor).count()
    }
}

pub fn compare(analytic: f64, numeric: f64, tol: GradCheckTolerance) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    let ok = diff.is_finite() && (diff <= tol.abs || rel <= tol.rel);
    (rel, ok)
}

/// Compares `eval`'s analytic gradients against central differences with step
/// `h`.
///
/// `eval(params, with_grads)` returns the objective and, when `with_grads` is
/// set, one gradient vector per parameter (empty when a parameter received no
/// gradient). Tensors with more than `max_per_tensor` entries are subsampled:
/// half of the picks come from coordinates with a nonzero analytic gradient,
/// the rest uniformly.
pub fn check_gradient<F>(
    params: &[Tensor],
    eval: F,
    h: f64,
    tol: GradCheckTolerance,
    max_per_tensor: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&[Tensor], bool) -> (f64, Vec<Vec<f64>>),
{
    let (_, grads) = eval(params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut work = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let analytic = grads.get(ti).filter(|g| !g.is_empty()).cloned().unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            let nonzero: Vec<usize> = (0..n).filter(|&i| analytic[i] != 0.0).collect();
            let want_nz = (max_per_tensor / 2).min(nonzero.len());
            let mut picked: Vec<usize> = sample(&mut rng, nonzero.len(), want_nz)
                .into_iter()
                .map(|i| nonzero[i])
                .collect();
            for i in sample(&mut rng, n, max_per_tensor - want_nz) {
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let orig = p.data()[idx];
            work[ti].data_mut()[idx] = orig + h;
            let (fp, _) = eval(&work, false);
            work[ti].data_mut()[idx] = orig - h;
            let (fm, _) = eval(&work, false);
            work[ti].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let (rel_error, ok) = compare(analytic[idx], numeric, tol);
            checks.push(CoordinateCheck {
                tensor: ti,
                index: idx,
                analytic: analytic[idx],
                numeric,
                rel_error,
                ok,
            });
        }
    }
    GradCheckReport { tolerance: tol, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let f = |ps: &[Tensor]| ps[0].data().iter().map(|x| x * x * x).sum::<f64>();
        let good = check_gradient(
            &p,
            |ps, _| (f(ps), vec![ps[0].data().iter().map(|x| 3.0 * x * x).collect()]),
            1e-5,
            GradCheckTolerance::default(),
            10,
            0,
        );
        assert!(good.passed(), "{good:?}");
        let bad = check_gradient(
            &p,
            |ps, _| (f(ps), vec![ps[0].data().iter().map(|x| 2.0 * x * x).collect()]),
            1e-5,
            GradCheckTolerance::default(),
            10,
            0,
        );
        assert!(!bad.passed());
        assert_eq!(bad.failures().count(), 3);
    }

    #[test]
    fn near_zero_uses_absolute_tolerance() {
        let tol = GradCheckTolerance::default();
        assert!(compare(1e-9, 5e-8, tol).1);
        assert!(!compare(1e-3, 2e-3, tol).1);
    }

    #[test]
    fn subsampling_respects_budget() {
        let p = vec![Tensor::zeros(vec![100])];
        let rep = check_gradient(&p, |ps, _| (ps[0].data().iter().sum(), vec![vec![1.0; 100]]), 1e-5, GradCheckTolerance::default(), 8, 3);
        assert!(rep.count_for(0) <= 8 && rep.count_for(0) >= 4);
        assert!(rep.passed());
    }
}
