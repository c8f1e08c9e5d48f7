//! Central finite-difference gradient oracle.
//!
//! This path never calls a backward pass: it only evaluates the loss at
//! perturbed parameter values, so it stays independent of the analytic
//! gradients it checks.

use serde::Serialize;

use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Step for the fourth-order central stencil. Truncation error is
/// `O(ε⁴)`, so a fairly large step keeps round-off small without biasing
/// the estimate.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Floor on the `|a| + |n|` denominator. Entries whose gradient is smaller
/// than this (e.g. a bias feeding straight into batch norm, whose true
/// gradient is zero) are held to an absolute error of `tolerance · REL_FLOOR`
/// instead of amplifying finite-difference round-off.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference from the four values
/// `f(x + 2ε), f(x + ε), f(x − ε), f(x − 2ε)`.
pub fn stencil(plus2: f64, plus1: f64, minus1: f64, minus2: f64, eps: f64) -> f64 {
    (-plus2 + 8.0 * plus1 - 8.0 * minus1 + minus2) / (12.0 * eps)
}

/// Central-difference estimate of `∂f/∂x_i` for every coordinate of `x`.
pub fn central_diff(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            let mut at = |v: f64| {
                probe.data_mut()[i] = v;
                f(&probe)
            };
            let d = stencil(at(orig + 2.0 * eps), at(orig + eps), at(orig - eps), at(orig - 2.0 * eps), eps);
            probe.data_mut()[i] = orig;
            d
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the loss or a gradient was not finite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    fn failed(tolerance: f64, why: String) -> Self {
        Self {
            tensors: Vec::new(),
            tolerance,
            passed: false,
            failure: Some(why),
        }
    }
}

/// Compares the analytic gradients returned by `loss_fn` against central
/// differences of its loss, for every scalar of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, tolerance: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    let (loss, grads) = match loss_fn(store) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(tolerance, format!("loss evaluation failed: {e}")),
    };
    if !loss.is_finite() {
        return GradCheckReport::failed(tolerance, format!("non-finite loss {loss}"));
    }
    if !grads.is_finite() {
        return GradCheckReport::failed(tolerance, "non-finite analytic gradient".into());
    }

    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let analytic = match grads.get(name) {
            Ok(g) => g.clone(),
            Err(e) => return GradCheckReport::failed(tolerance, e.to_string()),
        };
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for i in 0..analytic.len() {
            let orig = probe.get(name).expect("known name").data()[i];
            let mut eval = |v: f64| -> Option<f64> {
                probe.get_mut(name).expect("known name").data_mut()[i] = v;
                loss_fn(&probe).ok().map(|(l, _)| l).filter(|l| l.is_finite())
            };
            let values = [eval(orig + 2.0 * eps), eval(orig + eps), eval(orig - eps), eval(orig - 2.0 * eps)];
            probe.get_mut(name).expect("known name").data_mut()[i] = orig;
            let [Some(p2), Some(p1), Some(m1), Some(m2)] = values else {
                return GradCheckReport::failed(
                    tolerance,
                    format!("non-finite loss while perturbing {name}[{i}]"),
                );
            };
            let numeric = stencil(p2, p1, m1, m2, eps);
            let a = analytic.data()[i];
            let err = rel_err(a, numeric);
            if err > worst.0 || i == 0 {
                worst = (err, i, a, numeric);
            }
        }
        tensors.push(TensorReport {
            name: name.clone(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            passed: worst.0 <= tolerance,
        });
    }
    let passed = tensors.iter().all(|t| t.passed);
    GradCheckReport {
        tensors,
        tolerance,
        passed,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("w", Tensor::uniform(&[3, 2], 1.0, &mut rng), ParamKind::Static)
            .unwrap();
        s.insert("v", Tensor::uniform(&[4], 1.0, &mut rng), ParamKind::Static)
            .unwrap();
        s
    }

    fn half_norm_sq(s: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
        let mut loss = 0.0;
        let mut grads = Grads::zeros_like(s);
        for (name, p) in s.iter() {
            loss += 0.5 * p.tensor.sum_squares();
            grads.accumulate(name, &p.tensor)?;
        }
        Ok((loss, grads))
    }

    #[test]
    fn quadratic_passes() {
        let report = grad_check(&store(1), DEFAULT_EPSILON, 1e-9, half_norm_sq);
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_err() <= 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let report = grad_check(&store(2), DEFAULT_EPSILON, 1e-6, |s| {
            let (l, mut g) = half_norm_sq(s)?;
            g.get_mut("v")?.data_mut()[1] *= 1.1;
            Ok((l, g))
        });
        assert!(!report.passed);
        let v = report.tensors.iter().find(|t| t.name == "v").unwrap();
        assert!(!v.passed && v.worst_index == 1);
        assert!(report.tensors.iter().find(|t| t.name == "w").unwrap().passed);
    }

    #[test]
    fn non_finite_loss_is_a_failure_not_a_panic() {
        let report = grad_check(&store(3), DEFAULT_EPSILON, 1e-6, |s| {
            let (_, g) = half_norm_sq(s)?;
            Ok((f64::NAN, g))
        });
        assert!(!report.passed);
        assert!(report.failure.unwrap().contains("non-finite"));
    }
}
