//! Self-checks runnable from the command line and from tests: finite
//! differences for every differentiable operation and for the assembled
//! networks, the streamed dynamic layer against an explicitly built weight
//! matrix, and the per-bucket gradient identity on tiny candidate vectors.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batchnorm::{self, BatchNormState, Mode};
use crate::dynamic::{dyn_backward, dyn_forward};
use crate::encoder::{
    embed, embed_backward, gru_encode, gru_encode_backward, gru_step, gru_step_backward, predict_candidates,
    predict_candidates_backward, GruGrads, GruWeights,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON};
use crate::hashing::HashSpec;
use crate::metrics::{vqa_accuracy, wups, EvalRecord, Taxonomy};
use crate::model::{Batch, Model, ModelConfig, Variant, ADAPTER_B1, ADAPTER_B2, ADAPTER_W1, ADAPTER_W2};
use crate::ops::{linear, linear_backward, softmax_xent, Activation};
use crate::params::{Grads, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

impl OpCheck {
    fn from_report(name: &str, report: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: report.max_rel_err(),
            passed: report.passed,
            failure: report.failure,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientSuite {
    pub checks: Vec<OpCheck>,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl GradientSuite {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

fn store(inputs: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in inputs {
        s.insert(name, t, ParamKind::Static).expect("distinct oracle input names");
    }
    s
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Values in `±[0.1, 1.1)`, clear of the relu kink at the stencil's reach.
fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v < 0.0 { v - 0.1 } else { v + 0.1 })
}

fn grads_from(s: &ParamStore<f64>, pairs: &[(&str, &Tensor<f64>)]) -> Result<Grads<f64>> {
    let mut g = Grads::zeros_like(s);
    for (name, t) in pairs {
        g.accumulate(name, t)?;
    }
    Ok(g)
}

fn gru_view<'a>(s: &'a ParamStore<f64>, bias: bool) -> Result<GruWeights<'a, f64>> {
    Ok(GruWeights {
        w_r: s.get("w_r")?,
        w_z: s.get("w_z")?,
        w_h: s.get("w_h")?,
        u_r: s.get("u_r")?,
        u_z: s.get("u_z")?,
        u_h: s.get("u_h")?,
        bias: if bias {
            Some([s.get("b_r")?, s.get("b_z")?, s.get("b_h")?])
        } else {
            None
        },
    })
}

fn gru_inputs(e: usize, h: usize, bias: bool, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
    let mut v = Vec::new();
    for name in ["w_r", "w_z", "w_h"] {
        v.push((name, Tensor::uniform(&[h, e], 0.7, rng)));
    }
    for name in ["u_r", "u_z", "u_h"] {
        v.push((name, Tensor::uniform(&[h, h], 0.7, rng)));
    }
    if bias {
        for name in ["b_r", "b_z", "b_h"] {
            v.push((name, Tensor::uniform(&[h], 0.5, rng)));
        }
    }
    v
}

fn gru_grad_pairs(g: &GruGrads<f64>) -> Vec<(&'static str, &Tensor<f64>)> {
    g.named()
        .into_iter()
        .map(|(name, t)| (name.trim_start_matches("encoder."), t))
        .collect()
}

fn check_linear(rng: &mut ChaCha8Rng) -> OpCheck {
    let probe = Tensor::uniform(&[3, 4], 1.0, rng);
    let s = store(vec![
        ("x", Tensor::uniform(&[3, 5], 1.0, rng)),
        ("w", Tensor::uniform(&[4, 5], 1.0, rng)),
        ("b", Tensor::uniform(&[4], 1.0, rng)),
    ]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let y = linear(s.get("x")?, s.get("w")?, Some(s.get("b")?))?;
        let g = linear_backward(s.get("x")?, s.get("w")?, &probe)?;
        Ok((dot(&y, &probe), grads_from(s, &[("x", &g.dx), ("w", &g.dw), ("b", &g.db)])?))
    });
    OpCheck::from_report("linear", r)
}

fn check_activation(kind: Activation, name: &str, rng: &mut ChaCha8Rng) -> OpCheck {
    let probe = Tensor::uniform(&[3, 4], 1.0, rng);
    let s = store(vec![("x", away_from_zero(Tensor::uniform(&[3, 4], 1.0, rng)))]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let x = s.get("x")?;
        let y = kind.forward(x);
        let dx = kind.backward(x, &y, &probe)?;
        Ok((dot(&y, &probe), grads_from(s, &[("x", &dx)])?))
    });
    OpCheck::from_report(name, r)
}

fn check_softmax_xent(rng: &mut ChaCha8Rng) -> OpCheck {
    let targets = [2, 0, 5];
    let s = store(vec![("logits", Tensor::uniform(&[3, 6], 3.0, rng))]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let (loss, d) = softmax_xent(s.get("logits")?, &targets)?;
        Ok((loss, grads_from(s, &[("logits", &d)])?))
    });
    OpCheck::from_report("softmax_cross_entropy", r)
}

fn check_batchnorm(mode: Mode, name: &str, rng: &mut ChaCha8Rng) -> OpCheck {
    let probe = Tensor::uniform(&[6, 4], 1.0, rng);
    let mut state = BatchNormState::new(4);
    state.running_mean = vec![0.1, -0.3, 0.2, 0.0];
    state.running_var = vec![0.6, 1.4, 2.0, 0.9];
    let s = store(vec![
        ("x", Tensor::uniform(&[6, 4], 2.0, rng)),
        ("gamma", Tensor::uniform(&[4], 1.5, rng)),
        ("beta", Tensor::uniform(&[4], 1.0, rng)),
    ]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let gamma = s.get("gamma")?.data();
        let (y, cache) = batchnorm::forward(s.get("x")?, gamma, s.get("beta")?.data(), &state, mode)?;
        let g = batchnorm::backward(&probe, gamma, &cache)?;
        Ok((
            dot(&y, &probe),
            grads_from(s, &[("x", &g.dx), ("gamma", &g.dgamma), ("beta", &g.dbeta)])?,
        ))
    });
    OpCheck::from_report(name, r)
}

fn check_dynamic(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let spec = HashSpec::with_default_seeds(12, 16, 32)?;
    let probe = Tensor::uniform(&[2, 12], 1.0, rng);
    let s = store(vec![
        ("f_in", Tensor::uniform(&[2, 16], 1.0, rng)),
        ("p", Tensor::uniform(&[2, 32], 1.0, rng)),
        ("bias", Tensor::uniform(&[12], 1.0, rng)),
    ]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let (f, p) = (s.get("f_in")?, s.get("p")?);
        let y = dyn_forward(f, p, &spec, s.get("bias")?.data())?;
        let g = dyn_backward(f, p, &probe, &spec)?;
        Ok((
            dot(&y, &probe),
            grads_from(s, &[("f_in", &g.d_in), ("p", &g.d_p), ("bias", &g.d_bias)])?,
        ))
    });
    Ok(OpCheck::from_report("dynamic_layer", r))
}

fn check_embedding(rng: &mut ChaCha8Rng) -> OpCheck {
    let tokens: [&[usize]; 2] = [&[1, 3, 1], &[0, 2, 3]];
    let probes: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[2, 5], 1.0, rng)).collect();
    let s = store(vec![("table", Tensor::uniform(&[4, 5], 1.0, rng))]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let xs = embed(&tokens, s.get("table")?)?;
        let loss = xs.iter().zip(&probes).map(|(x, p)| dot(x, p)).sum();
        let d = embed_backward(&tokens, &probes, 4)?;
        Ok((loss, grads_from(s, &[("table", &d)])?))
    });
    OpCheck::from_report("embedding", r)
}

fn check_gru_step(rng: &mut ChaCha8Rng) -> OpCheck {
    let (e, h) = (5, 4);
    let probe = Tensor::uniform(&[2, h], 1.0, rng);
    let mut inputs = gru_inputs(e, h, true, rng);
    inputs.push(("x", Tensor::uniform(&[2, e], 1.0, rng)));
    inputs.push(("h_prev", Tensor::uniform(&[2, h], 0.9, rng)));
    let s = store(inputs);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let w = gru_view(s, true)?;
        let (h_next, cache) = gru_step(s.get("x")?, s.get("h_prev")?, &w)?;
        let mut gg = GruGrads::zeros(&w);
        let (dx, dh) = gru_step_backward(&probe, &cache, &w, &mut gg)?;
        let mut pairs = gru_grad_pairs(&gg);
        pairs.extend([("x", &dx), ("h_prev", &dh)]);
        Ok((dot(&h_next, &probe), grads_from(s, &pairs)?))
    });
    OpCheck::from_report("gru_step", r)
}

fn check_bptt(bias: bool, name: &str, rng: &mut ChaCha8Rng) -> OpCheck {
    let (e, h, steps) = (4, 5, 4);
    let probe = Tensor::uniform(&[2, h], 1.0, rng);
    let mut inputs = gru_inputs(e, h, bias, rng);
    let x_names = ["x0", "x1", "x2", "x3"];
    for name in &x_names[..steps] {
        inputs.push((name, Tensor::uniform(&[2, e], 1.0, rng)));
    }
    let s = store(inputs);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let w = gru_view(s, bias)?;
        let xs: Vec<Tensor<f64>> = x_names[..steps].iter().map(|n| s.get(n).cloned()).collect::<Result<_>>()?;
        let (h_last, caches) = gru_encode(&xs, &w)?;
        let (dxs, gg) = gru_encode_backward(&probe, &caches, &w)?;
        let mut pairs = gru_grad_pairs(&gg);
        pairs.extend(x_names.iter().copied().zip(dxs.iter()));
        Ok((dot(&h_last, &probe), grads_from(s, &pairs)?))
    });
    OpCheck::from_report(name, r)
}

fn check_projection(rng: &mut ChaCha8Rng) -> OpCheck {
    let probe = Tensor::uniform(&[2, 32], 1.0, rng);
    let s = store(vec![
        ("h_last", Tensor::uniform(&[2, 8], 1.0, rng)),
        ("w_p", Tensor::uniform(&[32, 8], 1.0, rng)),
    ]);
    let r = grad_check(&s, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |s| {
        let p = predict_candidates(s.get("h_last")?, s.get("w_p")?)?;
        let (dh, dw) = predict_candidates_backward(s.get("h_last")?, s.get("w_p")?, &probe)?;
        Ok((dot(&p, &probe), grads_from(s, &[("h_last", &dh), ("w_p", &dw)])?))
    });
    OpCheck::from_report("candidate_projection", r)
}

/// Draws input features until no adapter relu input lies within the
/// stencil's reach of zero, where the loss is not differentiable.
fn clear_of_kinks(model: &Model<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let p = |name| model.params.get(name);
    let margin = 1e-2;
    for _ in 0..1000 {
        let x = Tensor::uniform(&[2, model.config.features], 1.0, rng);
        let a1 = linear(&x, p(ADAPTER_W1)?, Some(p(ADAPTER_B1)?))?;
        let a2 = linear(&Activation::Relu.forward(&a1), p(ADAPTER_W2)?, Some(p(ADAPTER_B2)?))?;
        if a1.data().iter().chain(a2.data()).all(|v| v.abs() > margin) {
            return Ok(x);
        }
    }
    Err(Error::Config("could not draw features away from relu kinks".into()))
}

/// End-to-end check of a toy-sized network on a batch of two questions.
fn check_model(name: &str, config: ModelConfig, lengths: [usize; 2], mode: Mode, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(config.clone())?;
    if mode == Mode::Eval {
        let d = model.bn.features();
        model.bn.running_mean = (0..d).map(|j| 0.05 * j as f64 - 0.2).collect();
        model.bn.running_var = (0..d).map(|j| 0.5 + 0.1 * j as f64).collect();
    }
    let features = clear_of_kinks(&model, &mut rng)?;
    let tokens = lengths
        .iter()
        .map(|&len| (0..len).map(|_| rng.random_range(0..config.vocab)).collect())
        .collect();
    let batch = Batch::new(features, tokens)?;
    let targets: Vec<usize> = (0..2).map(|_| rng.random_range(0..config.answers)).collect();
    let r = grad_check(&model.params, DEFAULT_EPSILON, GRADIENT_TOLERANCE, |store| {
        let mut m = model.clone();
        m.params = store.clone();
        let step = m.loss_and_grads(&batch, &targets, mode)?;
        Ok((step.loss, step.grads))
    });
    Ok(OpCheck::from_report(name, r))
}

/// Finite-difference check of every differentiable operation and of the
/// full networks at toy dimensions, in 64-bit arithmetic.
pub fn gradient_suite(seed: u64) -> Result<GradientSuite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy = ModelConfig {
        init_seed: seed,
        ..ModelConfig::toy()
    };
    let mut checks = vec![
        check_linear(&mut rng),
        check_activation(Activation::Sigmoid, "sigmoid", &mut rng),
        check_activation(Activation::Tanh, "tanh", &mut rng),
        check_activation(Activation::Relu, "relu", &mut rng),
        check_softmax_xent(&mut rng),
        check_batchnorm(Mode::Train, "batch_norm_train", &mut rng),
        check_batchnorm(Mode::Eval, "batch_norm_eval", &mut rng),
        check_dynamic(&mut rng)?,
        check_embedding(&mut rng),
        check_gru_step(&mut rng),
        check_bptt(false, "gru_bptt", &mut rng),
        check_bptt(true, "gru_bptt_bias", &mut rng),
        check_projection(&mut rng),
    ];
    checks.push(check_model("dppnet_train", toy.clone(), [3, 3], Mode::Train, seed)?);
    checks.push(check_model("dppnet_mixed_lengths", toy.clone(), [2, 4], Mode::Train, seed + 1)?);
    checks.push(check_model(
        "dppnet_eval_gru_bias",
        ModelConfig {
            gru_bias: true,
            ..toy.clone()
        },
        [3, 3],
        Mode::Eval,
        seed + 2,
    )?);
    checks.push(check_model(
        "concat_train",
        ModelConfig {
            variant: Variant::Concat,
            ..toy
        },
        [3, 3],
        Mode::Train,
        seed + 3,
    )?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradientSuite {
        checks,
        tolerance: GRADIENT_TOLERANCE,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Equivalence {
    pub instances: usize,
    pub max_forward_err: f64,
    pub max_backward_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `W_d` for one candidate vector, built entry by entry from the hash
/// functions.
fn dense_weights(p: &[f64], spec: &HashSpec) -> Result<Vec<Vec<f64>>> {
    (0..spec.m)
        .map(|m| {
            (0..spec.n)
                .map(|n| Ok(p[spec.psi(m, n)?] * f64::from(spec.xi(m, n)?)))
                .collect()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Streams random dynamic layers (`M, N, K ≤ 64`) and compares them with
/// the explicit matrix product and its hand-derived gradients.
pub fn dense_equivalence(instances: usize, seed: u64) -> Result<Equivalence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (m, n, k) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        let batch = rng.random_range(1..=3);
        let spec = HashSpec::new(m, n, k, rng.random(), rng.random())?;
        let f = Tensor::<f64>::uniform(&[batch, n], 1.0, &mut rng);
        let p = Tensor::<f64>::uniform(&[batch, k], 1.0, &mut rng);
        let bias = Tensor::<f64>::uniform(&[m], 1.0, &mut rng);
        let delta = Tensor::<f64>::uniform(&[batch, m], 1.0, &mut rng);

        let out = dyn_forward(&f, &p, &spec, bias.data())?;
        let g = dyn_backward(&f, &p, &delta, &spec)?;
        for b in 0..batch {
            let w = dense_weights(p.row(b), &spec)?;
            let (fb, db) = (f.row(b), delta.row(b));
            let y: Vec<f64> = (0..m)
                .map(|i| w[i].iter().zip(fb).map(|(a, x)| a * x).sum::<f64>() + bias.data()[i])
                .collect();
            let d_in: Vec<f64> = (0..n).map(|j| (0..m).map(|i| w[i][j] * db[i]).sum()).collect();
            let mut d_p = vec![0.0; k];
            for i in 0..m {
                for j in 0..n {
                    d_p[spec.psi(i, j)?] += f64::from(spec.xi(i, j)?) * db[i] * fb[j];
                }
            }
            fwd = fwd.max(max_abs_diff(out.row(b), &y));
            bwd = bwd.max(max_abs_diff(g.d_in.row(b), &d_in));
            bwd = bwd.max(max_abs_diff(g.d_p.row(b), &d_p));
        }
        let d_bias: Vec<f64> = (0..m).map(|i| (0..batch).map(|b| delta.row(b)[i]).sum()).collect();
        bwd = bwd.max(max_abs_diff(g.d_bias.data(), &d_bias));
    }
    Ok(Equivalence {
        instances,
        max_forward_err: fwd,
        max_backward_err: bwd,
        tolerance: EQUIVALENCE_TOLERANCE,
        passed: fwd <= EQUIVALENCE_TOLERANCE && bwd <= EQUIVALENCE_TOLERANCE,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BucketIdentity {
    pub k: usize,
    pub analytic: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub exact: bool,
}

/// A multiple of 1/4 in `[-2, 2]`; sums and products of a few of these are
/// exact in binary floating point, so summation order cannot matter.
fn quarter(rng: &mut ChaCha8Rng) -> f64 {
    f64::from(rng.random_range(-8i32..=8)) / 4.0
}

/// With one or two candidates, `dL/dp_k` reduces to a signed sum over the
/// positions hashed to bucket `k`. Written out term by term here and
/// compared bit for bit with the layer's backward pass.
pub fn bucket_identity(seed: u64) -> Result<Vec<BucketIdentity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (3, 4);
    let mut out = Vec::new();
    for k in [1, 2] {
        let spec = HashSpec::with_default_seeds(m, n, k)?;
        let f: Vec<f64> = (0..n).map(|_| quarter(&mut rng)).collect();
        let p: Vec<f64> = (0..k).map(|_| quarter(&mut rng)).collect();
        let delta: Vec<f64> = (0..m).map(|_| quarter(&mut rng)).collect();
        let g = dyn_backward(
            &Tensor::new(vec![1, n], f.clone())?,
            &Tensor::new(vec![1, k], p)?,
            &Tensor::new(vec![1, m], delta.clone())?,
            &spec,
        )?;
        let closed_form: Vec<f64> = if k == 1 {
            // dL/dp_0 = Σ_m δ_m Σ_n ξ(m, n) f_n
            let mut total = 0.0;
            for (i, d) in delta.iter().enumerate() {
                let mut row = 0.0;
                for (j, fj) in f.iter().enumerate() {
                    row += f64::from(spec.xi(i, j)?) * fj;
                }
                total += d * row;
            }
            vec![total]
        } else {
            // dL/dp_b = Σ_{(m, n) : ψ(m, n) = b} ξ(m, n) f_n δ_m
            (0..2)
                .map(|bucket| {
                    let mut total = 0.0;
                    for (i, d) in delta.iter().enumerate() {
                        for (j, fj) in f.iter().enumerate() {
                            if spec.psi(i, j)? == bucket {
                                total += f64::from(spec.xi(i, j)?) * fj * d;
                            }
                        }
                    }
                    Ok(total)
                })
                .collect::<Result<_>>()?
        };
        let analytic = g.d_p.data().to_vec();
        if analytic.len() != closed_form.len() {
            return Err(Error::shape("bucket_identity", &[analytic.len()], &[closed_form.len()]));
        }
        out.push(BucketIdentity {
            k,
            exact: analytic == closed_form,
            analytic,
            closed_form,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct FixtureCheck {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn fixture(name: &str, expected: f64, actual: f64, tolerance: f64) -> FixtureCheck {
    FixtureCheck {
        name: name.to_string(),
        expected,
        actual,
        tolerance,
        passed: (expected - actual).abs() <= tolerance,
    }
}

/// Hand-computed WUPS values on the bundled taxonomy and the consensus
/// accuracy curve for zero to ten agreeing annotators.
pub fn metric_fixtures() -> Vec<FixtureCheck> {
    let tax = Taxonomy::toy();
    let cat_dog = [EvalRecord::single("cat", "dog")];
    let mut out = vec![
        fixture("wups_cat_dog_t0.0", 0.6667, wups(&cat_dog, &tax, 0.0).score, 5e-5),
        fixture("wups_cat_dog_t0.9", 0.0667, wups(&cat_dog, &tax, 0.9).score, 5e-5),
    ];
    for n in 0..=10usize {
        let mut humans = vec!["yes".to_string(); n];
        humans.resize(10.max(n), "no".to_string());
        let acc = vqa_accuracy(&["yes".to_string()], &[humans]);
        out.push(fixture(&format!("vqa_agree_{n}"), (n as f64 / 3.0).min(1.0), acc, 0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_toy_dimensions() {
        let suite = gradient_suite(1).unwrap();
        for c in &suite.checks {
            assert!(c.passed, "{} rel err {} {:?}", c.name, c.max_rel_err, c.failure);
        }
        assert_eq!(suite.checks.len(), 17);
    }

    #[test]
    fn streamed_layer_equals_dense_product() {
        let eq = dense_equivalence(50, 3).unwrap();
        assert!(eq.passed, "{eq:?}");
    }

    #[test]
    fn metric_fixtures_hold() {
        let f = metric_fixtures();
        assert_eq!(f.len(), 13);
        assert!(f.iter().all(|c| c.passed), "{f:?}");
    }

    #[test]
    fn one_and_two_bucket_identities_are_exact() {
        let ids = bucket_identity(5).unwrap();
        assert_eq!(ids.iter().map(|b| b.k).collect::<Vec<_>>(), [1, 2]);
        assert!(ids.iter().all(|b| b.exact), "{ids:?}");
        assert!(ids.iter().any(|b| b.analytic.iter().any(|&v| v != 0.0)));
    }
}
