//! The dynamic parameter layer.
//!
//! `f_o = W_d(q) f_i + b`, where entry `(m, n)` of `W_d(q)` is
//! `p[psi(m, n)] · xi(m, n)` and `p` is the question's candidate vector. The
//! matrix is never built: forward and backward stream over `(m, n)` in
//! row-major order, hashing each position once per batch. Working memory is
//! the output plus the gradients, i.e. `O(K + M)` per example.

use crate::error::{Error, Result};
use crate::hashing::HashSpec;
use crate::tensor::{Scalar, Tensor};

/// Largest `M·N` that [`materialize_weights`] will build.
pub const MATERIALIZE_LIMIT: usize = 1 << 20;

/// A dynamic layer with its static bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DynLayer<S> {
    pub spec: HashSpec,
    /// Length `M`; trained like any other static parameter.
    pub bias: Tensor<S>,
}

impl<S: Scalar> DynLayer<S> {
    pub fn new(spec: HashSpec) -> Self {
        Self {
            spec,
            bias: Tensor::zeros(&[spec.m]),
        }
    }

    pub fn forward(&self, f_in: &Tensor<S>, p: &Tensor<S>) -> Result<Tensor<S>> {
        dyn_forward(f_in, p, &self.spec, self.bias.data())
    }

    pub fn backward(&self, f_in: &Tensor<S>, p: &Tensor<S>, d_out: &Tensor<S>) -> Result<DynGrads<S>> {
        dyn_backward(f_in, p, d_out, &self.spec)
    }
}

fn check_inputs<S: Scalar>(f_in: &Tensor<S>, p: &Tensor<S>, spec: &HashSpec) -> Result<()> {
    if f_in.cols() != spec.n || f_in.rank() > 2 {
        return Err(Error::shape("dyn_layer input", f_in.shape(), &[spec.n]));
    }
    if p.cols() != spec.k || p.rank() > 2 {
        return Err(Error::shape("dyn_layer candidates", p.shape(), &[spec.k]));
    }
    if p.rows() != 1 && p.rows() != f_in.rows() {
        return Err(Error::shape("dyn_layer batch", f_in.shape(), p.shape()));
    }
    Ok(())
}

/// Forward pass over a batch. `f_in` is `B×N` (or an `N`-vector); `p` is
/// `B×K`, one candidate vector per example, or a single row shared by the
/// whole batch. Returns `B×M`.
pub fn dyn_forward<S: Scalar>(f_in: &Tensor<S>, p: &Tensor<S>, spec: &HashSpec, bias: &[S]) -> Result<Tensor<S>> {
    check_inputs(f_in, p, spec)?;
    if bias.len() != spec.m {
        return Err(Error::shape("dyn_layer bias", &[bias.len()], &[spec.m]));
    }
    let batch = f_in.rows();
    let shared = p.rows() == 1;
    let (fd, pd) = (f_in.data(), p.data());
    let (n_in, k) = (spec.n, spec.k);
    let mut out = vec![S::zero(); batch * spec.m];
    for m in 0..spec.m {
        for n in 0..n_in {
            let bucket = spec.bucket(m, n);
            let negative = spec.sign_negative(m, n);
            for b in 0..batch {
                let pb = if shared { 0 } else { b };
                let w = pd[pb * k + bucket];
                let term = w * fd[b * n_in + n];
                let o = &mut out[b * spec.m + m];
                if negative {
                    *o -= term;
                } else {
                    *o += term;
                }
            }
        }
    }
    for row in out.chunks_mut(spec.m) {
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
    let shape = if f_in.rank() == 1 {
        vec![spec.m]
    } else {
        vec![batch, spec.m]
    };
    Tensor::new(shape, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynGrads<S> {
    /// `dL/df_i`, shaped like the input.
    pub d_in: Tensor<S>,
    /// `dL/dp`, shaped like `p`. Every `(m, n)` in bucket `k` contributes
    /// `xi(m, n) · f_i[n] · δ_o[m]` to entry `k`.
    pub d_p: Tensor<S>,
    /// `dL/db`, summed over the batch.
    pub d_bias: Tensor<S>,
}

pub fn dyn_backward<S: Scalar>(f_in: &Tensor<S>, p: &Tensor<S>, d_out: &Tensor<S>, spec: &HashSpec) -> Result<DynGrads<S>> {
    check_inputs(f_in, p, spec)?;
    if d_out.cols() != spec.m || d_out.rows() != f_in.rows() {
        return Err(Error::shape("dyn_layer output grad", d_out.shape(), &[f_in.rows(), spec.m]));
    }
    let batch = f_in.rows();
    let shared = p.rows() == 1;
    let (fd, pd, dd) = (f_in.data(), p.data(), d_out.data());
    let (n_in, k, m_out) = (spec.n, spec.k, spec.m);
    let mut d_in = vec![S::zero(); batch * n_in];
    let mut d_p = vec![S::zero(); p.len()];
    for m in 0..m_out {
        for n in 0..n_in {
            let bucket = spec.bucket(m, n);
            let negative = spec.sign_negative(m, n);
            for b in 0..batch {
                let pb = if shared { 0 } else { b };
                let delta = dd[b * m_out + m];
                let w = pd[pb * k + bucket];
                // δ_i[n] += w_mn δ_o[m];  dL/dp_k += ξ f_i[n] δ_o[m]
                let (wi, g) = (w * delta, fd[b * n_in + n] * delta);
                let (di, dp) = (&mut d_in[b * n_in + n], &mut d_p[pb * k + bucket]);
                if negative {
                    *di -= wi;
                    *dp -= g;
                } else {
                    *di += wi;
                    *dp += g;
                }
            }
        }
    }
    Ok(DynGrads {
        d_in: Tensor::new(f_in.shape().to_vec(), d_in)?,
        d_p: Tensor::new(p.shape().to_vec(), d_p)?,
        d_bias: Tensor::from_vec(d_out.sum_rows()),
    })
}

/// Builds `W_d` explicitly from one candidate vector. Diagnostic and test
/// oracle only; refuses grids larger than [`MATERIALIZE_LIMIT`].
pub fn materialize_weights<S: Scalar>(p: &[S], spec: &HashSpec) -> Result<Tensor<S>> {
    if p.len() != spec.k {
        return Err(Error::shape("materialize_weights", &[p.len()], &[spec.k]));
    }
    let cells = spec.m.saturating_mul(spec.n);
    if cells > MATERIALIZE_LIMIT {
        return Err(Error::Config(format!(
            "refusing to materialize {}x{} weights (limit {MATERIALIZE_LIMIT} entries)",
            spec.m, spec.n
        )));
    }
    let mut w = Tensor::zeros(&[spec.m, spec.n]);
    for m in 0..spec.m {
        let row = w.row_mut(m);
        for (n, slot) in row.iter_mut().enumerate() {
            let v = p[spec.bucket(m, n)];
            *slot = if spec.sign_negative(m, n) { -v } else { v };
        }
    }
    Ok(w)
}
