//! Differentiable primitives composed by hand in the higher modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(S::zero()),
        }
    }

    /// Local derivative expressed through the forward input `x` and output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Activation::Sigmoid => y * (S::one() - y),
            Activation::Tanh => S::one() - y * y,
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }

    pub fn forward<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        x.map(|v| self.apply(v))
    }

    /// `dL/dx` from `dL/dy`, given the forward input and output.
    pub fn backward<S: Scalar>(
        self,
        x: &Tensor<S>,
        y: &Tensor<S>,
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if x.shape() != y.shape() || y.shape() != dy.shape() {
            return Err(Error::shape("activation_backward", x.shape(), dy.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(dy.data())
            .map(|((&xv, &yv), &g)| g * self.derivative(xv, yv))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    // Split on sign so exp never overflows.
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Row-wise softmax of a `B×C` matrix.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut out = logits.clone();
    let c = logits.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/B`.
pub fn softmax_xent<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<(S, Tensor<S>)> {
    let (b, c) = (logits.rows(), logits.cols());
    if targets.len() != b {
        return Err(Error::shape("softmax_xent", logits.shape(), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange {
            what: "target class",
            index: bad,
            bound: c,
        });
    }
    let mut grad = softmax(logits);
    let inv_b = S::one() / S::lit(b as f64);
    let mut loss = S::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(i);
        g[t] -= S::one();
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// `x · wᵀ + b` with `x: B×in`, `w: out×in`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let mut y = matmul_nt(x, w)?;
    if let Some(b) = b {
        y.add_row(b.data())?;
    }
    Ok(y)
}

pub struct LinearGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    Ok(LinearGrads {
        dx: matmul(dy, w)?,
        dw: matmul_tn(dy, x)?,
        db: Tensor::from_vec(dy.sum_rows()),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            let x = Tensor::<f64>::uniform(&[3, 4], 2.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut rng);
            // L = Σ w ⊙ act(x)
            let loss = |x: &Tensor<f64>| -> f64 {
                kind.forward(x)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let y = kind.forward(&x);
            let dx = kind.backward(&x, &y, &w).unwrap();
            let numeric = central_diff(&x, 1e-3, loss);
            for (a, n) in dx.data().iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= 1e-8, "{kind:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        let (loss, _) = softmax_xent(&logits, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, _) = softmax_xent(&Tensor::<f64>::zeros(&[1, 2]), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_rejects_bad_target() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            softmax_xent(&logits, &[0, 3]),
            Err(Error::OutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::<f64>::uniform(&[3, 5], 3.0, &mut rng);
        let targets = [4, 0, 2];
        let (_, grad) = softmax_xent(&logits, &targets).unwrap();
        let numeric = central_diff(&logits, 1e-3, |l| softmax_xent(l, &targets).unwrap().0);
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l64 = Tensor::<f64>::uniform(&[6, 7], 20.0, &mut rng);
        for i in 0..6 {
            let s: f64 = softmax(&l64).row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let l32: Tensor<f32> = l64.cast();
        for i in 0..6 {
            let s: f32 = softmax(&l32).row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1f64, 0.2, 0.3, 0.1, 0.1, 0.3]), 2);
        assert_eq!(argmax(&[0.0f64, 0.0, 0.4, 0.0, 0.0, 0.4]), 2);
        assert_eq!(argmax(&[1.0f64]), 0);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2], 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[3, 2], 1.0, &mut rng);
        let dot = |y: Tensor<f64>| -> f64 { y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
        let g = linear_backward(&x, &w, &probe).unwrap();
        let nx = central_diff(&x, 1e-3, |x| dot(linear(x, &w, Some(&b)).unwrap()));
        let nw = central_diff(&w, 1e-3, |w| dot(linear(&x, w, Some(&b)).unwrap()));
        let nb = central_diff(&b, 1e-3, |b| dot(linear(&x, &w, Some(b)).unwrap()));
        for (a, n) in g
            .dx
            .data()
            .iter()
            .chain(g.dw.data())
            .chain(g.db.data())
            .zip(nx.iter().chain(&nw).chain(&nb))
        {
            assert!(rel_err(*a, *n) <= 1e-8, "{a} vs {n}");
        }
    }
}
