//! Question encoder: word embedding, a bias-free GRU, and the projection of
//! the final hidden state onto the candidate weight vector.
//!
//! Sequences in a batch share one length; there is no padding or masking.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{self, Item};
use crate::error::{Error, Result};
use crate::ops::{linear, linear_backward, sigmoid};
use crate::params::ParamKind;
use crate::tensor::{matmul, matmul_tn, Scalar, Tensor};

pub const VOCAB_FILE: &str = "vocab.json";

pub const EMBED: &str = "encoder.embed";
pub const W_R: &str = "encoder.w_r";
pub const W_Z: &str = "encoder.w_z";
pub const W_H: &str = "encoder.w_h";
pub const U_R: &str = "encoder.u_r";
pub const U_Z: &str = "encoder.u_z";
pub const U_H: &str = "encoder.u_h";
pub const B_R: &str = "encoder.b_r";
pub const B_Z: &str = "encoder.b_z";
pub const B_H: &str = "encoder.b_h";
pub const W_P: &str = "predictor.w_p";

/// `V×E` word vectors; row `i` belongs to token id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<S> {
    pub table: Tensor<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::uniform(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Looks up each time step of an equal-length batch of token sequences.
/// Returns one `B×E` matrix per step.
pub fn embed<S: Scalar>(tokens: &[&[usize]], table: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let len = tokens.first().map_or(0, |t| t.len());
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some(bad) = tokens.iter().find(|t| t.len() != len) {
        return Err(Error::shape("embed", &[len], &[bad.len()]));
    }
    let (v, e) = (table.rows(), table.cols());
    (0..len)
        .map(|t| {
            let mut data = Vec::with_capacity(tokens.len() * e);
            for seq in tokens {
                let id = seq[t];
                if id >= v {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: id,
                        bound: v,
                    });
                }
                data.extend_from_slice(table.row(id));
            }
            Tensor::new(vec![tokens.len(), e], data)
        })
        .collect()
}

/// Scatters per-step gradients back into a `V×E` table gradient; rows of
/// tokens that never appear stay zero.
pub fn embed_backward<S: Scalar>(
    tokens: &[&[usize]],
    dxs: &[Tensor<S>],
    vocab: usize,
) -> Result<Tensor<S>> {
    let e = dxs.first().ok_or(Error::EmptySequence)?.cols();
    let mut grad = Tensor::zeros(&[vocab, e]);
    for (t, dx) in dxs.iter().enumerate() {
        for (b, seq) in tokens.iter().enumerate() {
            let row = grad.row_mut(seq[t]);
            for (g, &d) in row.iter_mut().zip(dx.row(b)) {
                *g += d;
            }
        }
    }
    Ok(grad)
}

/// Owned GRU coefficients. `w_*` are `H×E`, `u_*` are `H×H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<S> {
    pub w_r: Tensor<S>,
    pub w_z: Tensor<S>,
    pub w_h: Tensor<S>,
    pub u_r: Tensor<S>,
    pub u_z: Tensor<S>,
    pub u_h: Tensor<S>,
    /// `(b_r, b_z, b_h)`, each of length `H`. Absent by default.
    pub bias: Option<[Tensor<S>; 3]>,
}

impl<S: Scalar> GruParams<S> {
    /// Uniform in `±1/√fan_in` for every matrix; biases start at zero.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, with_bias: bool, rng: &mut R) -> Self {
        let a = 1.0 / (input as f64).sqrt();
        let b = 1.0 / (hidden as f64).sqrt();
        Self {
            w_r: Tensor::uniform(&[hidden, input], a, rng),
            w_z: Tensor::uniform(&[hidden, input], a, rng),
            w_h: Tensor::uniform(&[hidden, input], a, rng),
            u_r: Tensor::uniform(&[hidden, hidden], b, rng),
            u_z: Tensor::uniform(&[hidden, hidden], b, rng),
            u_h: Tensor::uniform(&[hidden, hidden], b, rng),
            bias: with_bias.then(|| std::array::from_fn(|_| Tensor::zeros(&[hidden]))),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_r: Tensor::zeros(&[hidden, input]),
            w_z: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, input]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            bias: None,
        }
    }

    pub fn view(&self) -> GruWeights<'_, S> {
        GruWeights {
            w_r: &self.w_r,
            w_z: &self.w_z,
            w_h: &self.w_h,
            u_r: &self.u_r,
            u_z: &self.u_z,
            u_h: &self.u_h,
            bias: self.bias.as_ref().map(|[r, z, h]| [r, z, h]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_r.rows()
    }

    pub fn input(&self) -> usize {
        self.w_r.cols()
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut out = vec![
            (W_R, &self.w_r),
            (W_Z, &self.w_z),
            (W_H, &self.w_h),
            (U_R, &self.u_r),
            (U_Z, &self.u_z),
            (U_H, &self.u_h),
        ];
        if let Some([r, z, h]) = &self.bias {
            out.extend([(B_R, r), (B_Z, z), (B_H, h)]);
        }
        out
    }
}

/// Borrowed GRU coefficients, e.g. straight out of a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights<'a, S> {
    pub w_r: &'a Tensor<S>,
    pub w_z: &'a Tensor<S>,
    pub w_h: &'a Tensor<S>,
    pub u_r: &'a Tensor<S>,
    pub u_z: &'a Tensor<S>,
    pub u_h: &'a Tensor<S>,
    pub bias: Option<[&'a Tensor<S>; 3]>,
}

impl<'a, S: Scalar> GruWeights<'a, S> {
    pub fn hidden(&self) -> usize {
        self.w_r.rows()
    }

    pub fn input(&self) -> usize {
        self.w_r.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, e) = (self.hidden(), self.input());
        for w in [self.w_r, self.w_z, self.w_h] {
            if w.shape() != [h, e] {
                return Err(Error::shape("gru_weights", &[h, e], w.shape()));
            }
        }
        for u in [self.u_r, self.u_z, self.u_h] {
            if u.shape() != [h, h] {
                return Err(Error::shape("gru_weights", &[h, h], u.shape()));
            }
        }
        if let Some(bs) = self.bias {
            for b in bs {
                if b.shape() != [h] {
                    return Err(Error::shape("gru_bias", &[h], b.shape()));
                }
            }
        }
        Ok(())
    }

    fn b(&self, i: usize) -> Option<&'a Tensor<S>> {
        self.bias.map(|bs| bs[i])
    }
}

/// Values kept from one GRU step for the backward pass.
#[derive(Clone, Debug)]
pub struct GruStepCache<S> {
    pub x: Tensor<S>,
    pub h_prev: Tensor<S>,
    /// Reset gate, inside (0, 1).
    pub r: Tensor<S>,
    /// Update gate, inside (0, 1).
    pub z: Tensor<S>,
    /// Candidate activation, inside (−1, 1).
    pub h_bar: Tensor<S>,
}

fn gate<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, h: &Tensor<S>, u: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let mut a = linear(x, w, b)?;
    a.add_assign(&linear(h, u, None)?)?;
    Ok(a)
}

/// One GRU update over a batch: `x: B×E`, `h_prev: B×H`.
pub fn gru_step<S: Scalar>(
    x: &Tensor<S>,
    h_prev: &Tensor<S>,
    w: &GruWeights<'_, S>,
) -> Result<(Tensor<S>, GruStepCache<S>)> {
    if x.rows() != h_prev.rows() || h_prev.cols() != w.hidden() || x.cols() != w.input() {
        return Err(Error::shape("gru_step", x.shape(), h_prev.shape()));
    }
    let r = gate(x, w.w_r, h_prev, w.u_r, w.b(0))?.map(sigmoid);
    let z = gate(x, w.w_z, h_prev, w.u_z, w.b(1))?.map(sigmoid);
    let rh = r.zip_map(h_prev, |a, b| a * b)?;
    let h_bar = gate(x, w.w_h, &rh, w.u_h, w.b(2))?.map(|v| v.tanh());
    debug_assert!(r.data().iter().chain(z.data()).all(|&g| g >= S::zero() && g <= S::one()));
    debug_assert!(h_bar.data().iter().all(|&c| c.abs() <= S::one()));

    let mut h = h_prev.clone();
    for ((hv, &zv), &cv) in h.data_mut().iter_mut().zip(z.data()).zip(h_bar.data()) {
        *hv = (S::one() - zv) * *hv + zv * cv;
    }
    Ok((
        h,
        GruStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            r,
            z,
            h_bar,
        },
    ))
}

/// Gradients for the GRU coefficients, laid out like [`GruParams`].
#[derive(Clone, Debug)]
pub struct GruGrads<S> {
    pub w_r: Tensor<S>,
    pub w_z: Tensor<S>,
    pub w_h: Tensor<S>,
    pub u_r: Tensor<S>,
    pub u_z: Tensor<S>,
    pub u_h: Tensor<S>,
    pub bias: Option<[Tensor<S>; 3]>,
}

impl<S: Scalar> GruGrads<S> {
    pub fn zeros(w: &GruWeights<'_, S>) -> Self {
        let (h, e) = (w.hidden(), w.input());
        Self {
            w_r: Tensor::zeros(&[h, e]),
            w_z: Tensor::zeros(&[h, e]),
            w_h: Tensor::zeros(&[h, e]),
            u_r: Tensor::zeros(&[h, h]),
            u_z: Tensor::zeros(&[h, h]),
            u_h: Tensor::zeros(&[h, h]),
            bias: w.bias.map(|_| std::array::from_fn(|_| Tensor::zeros(&[h]))),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut out = vec![
            (W_R, &self.w_r),
            (W_Z, &self.w_z),
            (W_H, &self.w_h),
            (U_R, &self.u_r),
            (U_Z, &self.u_z),
            (U_H, &self.u_h),
        ];
        if let Some([r, z, h]) = &self.bias {
            out.extend([(B_R, r), (B_Z, z), (B_H, h)]);
        }
        out
    }
}

/// Backward through one step. Accumulates coefficient gradients into
/// `grads` and returns `(dL/dx, dL/dh_prev)`.
pub fn gru_step_backward<S: Scalar>(
    dh: &Tensor<S>,
    cache: &GruStepCache<S>,
    w: &GruWeights<'_, S>,
    grads: &mut GruGrads<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let GruStepCache {
        x,
        h_prev,
        r,
        z,
        h_bar,
    } = cache;
    let one = S::one();
    // h = (1 − z)·h_prev + z·h̄
    let mut dh_prev = dh.zip_map(z, |g, zv| g * (one - zv))?;
    let mut da_h = Tensor::zeros(dh.shape());
    let mut da_z = Tensor::zeros(dh.shape());
    for i in 0..dh.len() {
        let (g, zv, cv, hv) = (dh.data()[i], z.data()[i], h_bar.data()[i], h_prev.data()[i]);
        da_h.data_mut()[i] = g * zv * (one - cv * cv);
        da_z.data_mut()[i] = g * (cv - hv) * zv * (one - zv);
    }

    // h̄ = tanh(W_h x + U_h (r ⊙ h_prev))
    let rh = r.zip_map(h_prev, |a, b| a * b)?;
    let lh = linear_backward(x, w.w_h, &da_h)?;
    grads.w_h.add_assign(&lh.dw)?;
    grads.u_h.add_assign(&matmul_tn(&da_h, &rh)?)?;
    let mut dx = lh.dx;
    let drh = matmul(&da_h, w.u_h)?;
    let mut da_r = Tensor::zeros(dh.shape());
    for i in 0..dh.len() {
        let (g, rv, hv) = (drh.data()[i], r.data()[i], h_prev.data()[i]);
        dh_prev.data_mut()[i] += g * rv;
        da_r.data_mut()[i] = g * hv * rv * (one - rv);
    }

    // z and r gates
    for (da, w_in, u_in, gw, gu) in [
        (&da_z, w.w_z, w.u_z, &mut grads.w_z, &mut grads.u_z),
        (&da_r, w.w_r, w.u_r, &mut grads.w_r, &mut grads.u_r),
    ] {
        let l = linear_backward(x, w_in, da)?;
        gw.add_assign(&l.dw)?;
        dx.add_assign(&l.dx)?;
        gu.add_assign(&matmul_tn(da, h_prev)?)?;
        dh_prev.add_assign(&matmul(da, u_in)?)?;
    }
    if let Some([br, bz, bh]) = &mut grads.bias {
        br.add_assign(&Tensor::from_vec(da_r.sum_rows()))?;
        bz.add_assign(&Tensor::from_vec(da_z.sum_rows()))?;
        bh.add_assign(&Tensor::from_vec(da_h.sum_rows()))?;
    }
    Ok((dx, dh_prev))
}

/// Folds [`gru_step`] over the sequence starting from `h_0 = 0`; returns
/// `h_T` and every step's cache.
pub fn gru_encode<S: Scalar>(
    xs: &[Tensor<S>],
    w: &GruWeights<'_, S>,
) -> Result<(Tensor<S>, Vec<GruStepCache<S>>)> {
    let first = xs.first().ok_or(Error::EmptySequence)?;
    w.validate()?;
    let mut h = Tensor::zeros(&[first.rows(), w.hidden()]);
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = gru_step(x, &h, w)?;
        caches.push(cache);
        h = next;
    }
    Ok((h, caches))
}

/// Back-propagation through time from `dL/dh_T`. Returns per-step input
/// gradients and the coefficient gradients.
pub fn gru_encode_backward<S: Scalar>(
    dh_last: &Tensor<S>,
    caches: &[GruStepCache<S>],
    w: &GruWeights<'_, S>,
) -> Result<(Vec<Tensor<S>>, GruGrads<S>)> {
    let mut grads = GruGrads::zeros(w);
    let mut dxs = vec![Tensor::zeros(&[1]); caches.len()];
    let mut dh = dh_last.clone();
    for (t, cache) in caches.iter().enumerate().rev() {
        let (dx, dh_prev) = gru_step_backward(&dh, cache, w, &mut grads)?;
        dxs[t] = dx;
        dh = dh_prev;
    }
    Ok((dxs, grads))
}

/// `p = W_p h_T`, batched as `B×K`.
pub fn predict_candidates<S: Scalar>(h_last: &Tensor<S>, w_p: &Tensor<S>) -> Result<Tensor<S>> {
    linear(h_last, w_p, None)
}

/// Returns `(dL/dh_T, dL/dW_p)`.
pub fn predict_candidates_backward<S: Scalar>(
    h_last: &Tensor<S>,
    w_p: &Tensor<S>,
    dp: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let g = linear_backward(h_last, w_p, dp)?;
    Ok((g.dx, g.dw))
}

/// `K×L` projection weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<S> {
    pub w_p: Tensor<S>,
}

/// An encoder read from disk, kept exactly as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedEncoder<S> {
    pub embedding: EmbeddingTable<S>,
    pub gru: GruParams<S>,
    /// Token for each embedding row, when the file carries one.
    pub vocab: Option<Vec<String>>,
}

pub fn save_pretrained<S: Scalar>(dir: &Path, enc: &PretrainedEncoder<S>) -> Result<()> {
    let mut items = vec![Item {
        name: EMBED,
        tensor: &enc.embedding.table,
        kind: Some(ParamKind::DynamicProducing),
        frozen: false,
    }];
    for (name, t) in enc.gru.named() {
        items.push(Item {
            name,
            tensor: t,
            kind: Some(ParamKind::DynamicProducing),
            frozen: false,
        });
    }
    checkpoint::write(dir, &items, None)?;
    if let Some(vocab) = &enc.vocab {
        let path = dir.join(VOCAB_FILE);
        fs::write(&path, serde_json::to_vec_pretty(vocab)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Reads a pre-trained embedding and GRU. With `expect = Some((E, H))` the
/// file must match those dimensions; with `None` the caller adopts whatever
/// the file holds.
pub fn load_pretrained<S: Scalar>(dir: &Path, expect: Option<(usize, usize)>) -> Result<PretrainedEncoder<S>> {
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            message: "pre-trained encoder not found".into(),
        });
    }
    let (_, mut tensors) = checkpoint::read::<S>(dir)?;
    let bad = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let mut take = |name: &str| {
        tensors
            .shift_remove(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    };
    let table = take(EMBED)?;
    let mut gru = GruParams {
        w_r: take(W_R)?,
        w_z: take(W_Z)?,
        w_h: take(W_H)?,
        u_r: take(U_R)?,
        u_z: take(U_Z)?,
        u_h: take(U_H)?,
        bias: None,
    };
    let biases: Vec<_> = [B_R, B_Z, B_H].iter().map(|n| take(n).ok()).collect();
    gru.bias = match biases.as_slice() {
        [Some(r), Some(z), Some(h)] => Some([r.clone(), z.clone(), h.clone()]),
        [None, None, None] => None,
        _ => return Err(bad("GRU biases must be all present or all absent".into())),
    };
    gru.view().validate().map_err(|e| bad(e.to_string()))?;
    if table.rank() != 2 || table.cols() != gru.input() {
        return Err(bad(format!(
            "embedding {:?} does not match GRU input width {}",
            table.shape(),
            gru.input()
        )));
    }
    if let Some((e, h)) = expect {
        if (gru.input(), gru.hidden()) != (e, h) {
            return Err(bad(format!(
                "file has E={} H={}, config expects E={e} H={h}",
                gru.input(),
                gru.hidden()
            )));
        }
    }
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        let text = fs::read_to_string(&vocab_path)
            .map_err(|e| Error::io(format!("reading {}", vocab_path.display()), e))?;
        let v: Vec<String> = serde_json::from_str(&text)?;
        if v.len() != table.rows() {
            return Err(bad(format!(
                "vocab lists {} tokens for {} embedding rows",
                v.len(),
                table.rows()
            )));
        }
        Some(v)
    } else {
        None
    };
    Ok(PretrainedEncoder {
        embedding: EmbeddingTable { table },
        gru,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embed_is_row_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut rng);
        let xs = embed(&[&[0, 2, 0]], &table).unwrap();
        assert_eq!(xs[0].data(), table.row(0));
        assert_eq!(xs[1].data(), table.row(2));
        assert_eq!(xs[0], xs[2]);
        assert!(embed(&[&[0, 5]], &table).is_err());
        assert!(matches!(embed(&[&[]], &table), Err(Error::EmptySequence)));
    }

    #[test]
    fn repeated_tokens_sum_gradients() {
        let tokens: &[&[usize]] = &[&[1, 3, 1]];
        let dxs: Vec<Tensor<f64>> = (0..3)
            .map(|t| Tensor::new(vec![1, 2], vec![t as f64 + 1.0, 10.0]).unwrap())
            .collect();
        let g = embed_backward(tokens, &dxs, 4).unwrap();
        assert_eq!(g.row(1), &[4.0, 20.0]);
        assert_eq!(g.row(3), &[2.0, 10.0]);
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = Tensor::<f64>::uniform(&[6, 4], 1.0, &mut rng);
        let tokens: &[&[usize]] = &[&[2, 5, 2]];
        let probes: Vec<_> = (0..3).map(|_| Tensor::<f64>::uniform(&[1, 4], 1.0, &mut rng)).collect();
        let loss = |t: &Tensor<f64>| -> f64 {
            embed(tokens, t)
                .unwrap()
                .iter()
                .zip(&probes)
                .map(|(x, p)| dot(x, p))
                .sum()
        };
        let g = embed_backward(tokens, &probes, 6).unwrap();
        for (a, n) in g.data().iter().zip(central_diff(&table, 1e-3, loss)) {
            assert!(rel_err(*a, n) <= 1e-8);
        }
    }

    #[test]
    fn zero_params_halve_the_state() {
        let gru = GruParams::<f64>::zeros(3, 4);
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let h = Tensor::from_rows(&[vec![1.0, -0.5, 0.25, 0.0]]).unwrap();
        let (next, cache) = gru_step(&x, &h, &gru.view()).unwrap();
        assert!(cache.r.data().iter().chain(cache.z.data()).all(|&g| g == 0.5));
        assert!(cache.h_bar.data().iter().all(|&c| c == 0.0));
        assert_eq!(next.data(), &[0.5, -0.25, 0.125, 0.0]);
    }

    #[test]
    fn zero_state_ignores_reset_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gru = GruParams::<f64>::random(3, 4, false, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 3], 1.0, &mut rng);
        let h0 = Tensor::zeros(&[1, 4]);
        let (h, cache) = gru_step(&x, &h0, &gru.view()).unwrap();
        let wx = linear(&x, &gru.w_h, None).unwrap();
        for i in 0..4 {
            let expect = cache.z.data()[i] * wx.data()[i].tanh();
            assert!((h.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_encode_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = GruParams::<f64>::random(3, 5, false, &mut rng);
        let x = Tensor::<f64>::uniform(&[2, 3], 1.0, &mut rng);
        let (h_enc, _) = gru_encode(std::slice::from_ref(&x), &gru.view()).unwrap();
        let (h_step, _) = gru_step(&x, &Tensor::zeros(&[2, 5]), &gru.view()).unwrap();
        assert_eq!(h_enc, h_step);
        assert!(matches!(gru_encode::<f64>(&[], &gru.view()), Err(Error::EmptySequence)));
    }

    /// Finite-difference check over every GRU coefficient and every input
    /// step, for a loss `⟨probe, h_T⟩`.
    fn check_bptt(steps: usize, input: usize, hidden: usize, batch: usize, bias: bool, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gru = GruParams::<f64>::random(input, hidden, bias, &mut rng);
        if let Some(bs) = &mut gru.bias {
            for b in bs.iter_mut() {
                *b = Tensor::uniform(&[hidden], 0.5, &mut rng);
            }
        }
        let xs: Vec<_> = (0..steps)
            .map(|_| Tensor::<f64>::uniform(&[batch, input], 1.0, &mut rng))
            .collect();
        let probe = Tensor::<f64>::uniform(&[batch, hidden], 1.0, &mut rng);
        let (_, caches) = gru_encode(&xs, &gru.view()).unwrap();
        let (dxs, grads) = gru_encode_backward(&probe, &caches, &gru.view()).unwrap();

        let loss_with = |g: &GruParams<f64>, xs: &[Tensor<f64>]| dot(&gru_encode(xs, &g.view()).unwrap().0, &probe);
        let analytic = grads.named();
        let names: Vec<_> = gru.named().iter().map(|(n, _)| *n).collect();
        for (idx, name) in names.iter().enumerate() {
            let base = gru.named()[idx].1.clone();
            let numeric = central_diff(&base, 1e-3, |t| {
                let mut g = gru.clone();
                let slot = match *name {
                    W_R => &mut g.w_r,
                    W_Z => &mut g.w_z,
                    W_H => &mut g.w_h,
                    U_R => &mut g.u_r,
                    U_Z => &mut g.u_z,
                    U_H => &mut g.u_h,
                    B_R => &mut g.bias.as_mut().unwrap()[0],
                    B_Z => &mut g.bias.as_mut().unwrap()[1],
                    _ => &mut g.bias.as_mut().unwrap()[2],
                };
                *slot = t.clone();
                loss_with(&g, &xs)
            });
            for (a, n) in analytic[idx].1.data().iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= tol, "{name}: {a} vs {n}");
            }
        }
        for t in 0..steps {
            let numeric = central_diff(&xs[t], 1e-3, |x| {
                let mut xs2 = xs.clone();
                xs2[t] = x.clone();
                loss_with(&gru, &xs2)
            });
            for (a, n) in dxs[t].data().iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= tol, "x[{t}]: {a} vs {n}");
            }
        }
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        check_bptt(1, 3, 4, 2, false, 10, 1e-6);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        check_bptt(4, 5, 6, 1, false, 11, 1e-5);
        check_bptt(6, 8, 8, 3, false, 12, 1e-5);
    }

    #[test]
    fn bptt_with_bias_matches_finite_differences() {
        check_bptt(3, 4, 5, 2, true, 13, 1e-5);
    }

    #[test]
    fn projection_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::<f64>::uniform(&[1, 4], 1.0, &mut rng);
        let p = predict_candidates(&h, &Tensor::zeros(&[6, 4])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        let p = predict_candidates(&h, &Tensor::identity(4)).unwrap();
        assert_eq!(p, h);
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gru = GruParams::<f64>::random(4, 6, false, &mut rng);
        let xs: Vec<_> = (0..20).map(|_| Tensor::<f64>::uniform(&[2, 4], 5.0, &mut rng)).collect();
        let (_, caches) = gru_encode(&xs, &gru.view()).unwrap();
        for c in &caches {
            assert!(c.h_prev.data().iter().all(|v| v.abs() <= 1.0));
            assert!(c.r.data().iter().chain(c.z.data()).all(|&g| g > 0.0 && g < 1.0));
            assert!(c.h_bar.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn pretrained_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = PretrainedEncoder {
            embedding: EmbeddingTable::<f64>::random(4, 3, &mut rng),
            gru: GruParams::random(3, 5, true, &mut rng),
            vocab: Some(vec!["<unk>".into(), "a".into(), "b".into(), "c".into()]),
        };
        save_pretrained(dir.path(), &enc).unwrap();
        let back = load_pretrained::<f64>(dir.path(), Some((3, 5))).unwrap();
        assert_eq!(back, enc);
        assert!(load_pretrained::<f64>(dir.path(), Some((3, 6))).is_err());
        let missing = dir.path().join("nope");
        assert!(load_pretrained::<f64>(&missing, None).is_err());
    }
}
