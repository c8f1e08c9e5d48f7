//! Per-feature batch normalization over `B×D` activations.
//!
//! The trainable gain and shift live in the parameter store like any other
//! static parameter; [`BatchNormState`] only carries the running statistics
//! and the two hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub running_mean: Vec<S>,
    /// Strictly positive.
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![S::zero(); features],
            running_var: vec![S::one(); features],
            momentum: S::lit(DEFAULT_MOMENTUM),
            epsilon: S::lit(DEFAULT_EPSILON),
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates. The variance
    /// uses the unbiased `B/(B-1)` correction.
    pub fn commit(&mut self, cache: &BatchNormCache<S>) {
        let Some(stats) = &cache.batch else { return };
        let b = S::lit(stats.rows as f64);
        let correction = b / (b - S::one());
        let keep = S::one() - self.momentum;
        for j in 0..self.features() {
            self.running_mean[j] = keep * self.running_mean[j] + self.momentum * stats.mean[j];
            self.running_var[j] =
                keep * self.running_var[j] + self.momentum * stats.var[j] * correction;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub rows: usize,
    pub mean: Vec<S>,
    /// Biased (divide-by-B) variance.
    pub var: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    /// Present only for train-mode passes.
    pub batch: Option<BatchStats<S>>,
}

/// Returns the normalized, scaled and shifted activations plus the cache
/// needed by [`backward`]. Running statistics are not touched here; call
/// [`BatchNormState::commit`] once the step is accepted.
pub fn forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    state: &BatchNormState<S>,
    mode: Mode,
) -> Result<(Tensor<S>, BatchNormCache<S>)> {
    let (b, d) = (x.rows(), x.cols());
    if x.rank() != 2 || d != state.features() || gamma.len() != d || beta.len() != d {
        return Err(Error::shape("batchnorm", x.shape(), &[state.features()]));
    }
    let (mean, var, batch) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            let inv_b = S::one() / S::lit(b as f64);
            let mut mean = x.sum_rows();
            mean.iter_mut().for_each(|m| *m *= inv_b);
            let mut var = vec![S::zero(); d];
            for i in 0..b {
                for ((v, &xv), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *v += (xv - m) * (xv - m);
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_b);
            let stats = BatchStats {
                rows: b,
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
    };
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + state.epsilon).sqrt())
        .collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for i in 0..b {
        let xr = xhat.row_mut(i);
        for j in 0..d {
            xr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = gamma[j] * xr[j] + beta[j];
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch,
        },
    ))
}

pub struct BatchNormGrads<S> {
    pub dx: Tensor<S>,
    pub dgamma: Tensor<S>,
    pub dbeta: Tensor<S>,
}

pub fn backward<S: Scalar>(
    dy: &Tensor<S>,
    gamma: &[S],
    cache: &BatchNormCache<S>,
) -> Result<BatchNormGrads<S>> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::shape("batchnorm_backward", dy.shape(), cache.xhat.shape()));
    }
    let (b, d) = (dy.rows(), dy.cols());
    let mut dgamma = vec![S::zero(); d];
    let dbeta = dy.sum_rows();
    for i in 0..b {
        for ((g, &dv), &xh) in dgamma.iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
            *g += dv * xh;
        }
    }
    let mut dx = dy.clone();
    match cache.batch {
        Some(_) => {
            // dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), with dxhat = γ·dy
            let bs = S::lit(b as f64);
            let mut sum_dxhat = vec![S::zero(); d];
            let mut sum_dxhat_xhat = vec![S::zero(); d];
            for i in 0..b {
                let (dr, xr) = (dy.row(i), cache.xhat.row(i));
                for j in 0..d {
                    let dxh = gamma[j] * dr[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xr[j];
                }
            }
            for i in 0..b {
                let xr = cache.xhat.row(i).to_vec();
                let row = dx.row_mut(i);
                for j in 0..d {
                    let dxh = gamma[j] * row[j];
                    row[j] = cache.inv_std[j] / bs
                        * (bs * dxh - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                }
            }
        }
        None => {
            for i in 0..b {
                let row = dx.row_mut(i);
                for j in 0..d {
                    row[j] = row[j] * gamma[j] * cache.inv_std[j];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        dx,
        dgamma: Tensor::from_vec(dgamma),
        dbeta: Tensor::from_vec(dbeta),
    })
}
