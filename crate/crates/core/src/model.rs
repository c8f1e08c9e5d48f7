//! The full network and its baselines.
//!
//! ```text
//! features ─ fc ─ relu ─ fc ─ relu ─ f_i ─┐
//!                                          dynamic layer ─ batch norm ─ relu ─ classifier ─ softmax
//! question ─ embed ─ GRU ─ h_T ─ W_p ─ p ─┘
//! ```
//!
//! The concatenation baseline replaces the dynamic layer with an ordinary
//! fully-connected layer over `[f_i, h_T]`, sized so that both networks carry
//! about the same number of parameters.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{self, BatchNormCache, BatchNormState, Mode};
use crate::checkpoint::{self, Item};
use crate::data::{AnswerSpace, Dataset, Vocabulary};
use crate::dynamic::{dyn_backward, dyn_forward};
use crate::encoder::{
    self, embed, embed_backward, gru_encode, gru_encode_backward, predict_candidates, predict_candidates_backward,
    GruStepCache, GruWeights, PretrainedEncoder,
};
use crate::error::{Error, Result};
use crate::hashing::{HashSpec, DEFAULT_SEED_PSI, DEFAULT_SEED_XI};
use crate::ops::{argmax, linear, linear_backward, softmax, softmax_xent, Activation};
use crate::params::{Grads, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ADAPTER_W1: &str = "adapter.w1";
pub const ADAPTER_B1: &str = "adapter.b1";
pub const ADAPTER_W2: &str = "adapter.w2";
pub const ADAPTER_B2: &str = "adapter.b2";
pub const DYN_BIAS: &str = "dynamic.bias";
pub const JOINT_W: &str = "joint.w";
pub const JOINT_B: &str = "joint.b";
pub const BN_GAMMA: &str = "bn.gamma";
pub const BN_BETA: &str = "bn.beta";
pub const CLS_W: &str = "classifier.w";
pub const CLS_B: &str = "classifier.b";
pub const BN_RUNNING_MEAN: &str = "bn.running_mean";
pub const BN_RUNNING_VAR: &str = "bn.running_var";

/// Name prefix shared by the feature adapter's tensors.
pub const ADAPTER_PREFIX: &str = "adapter.";
/// Name prefix shared by the word embedding and the GRU.
pub const ENCODER_PREFIX: &str = "encoder.";

pub const MODEL_FILE: &str = "model.json";
pub const ANSWERS_FILE: &str = "answers.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dynamic parameter layer driven by the question.
    Dppnet,
    /// Same network, but never initialized from a pre-trained encoder.
    RandGru,
    /// Same network with the feature adapter frozen for the whole run.
    CnnFixed,
    /// Concatenated image and question features through a static layer.
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dppnet, Variant::RandGru, Variant::CnnFixed, Variant::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dppnet => "dppnet",
            Variant::RandGru => "rand-gru",
            Variant::CnnFixed => "cnn-fixed",
            Variant::Concat => "concat",
        }
    }

    pub fn is_dynamic(self) -> bool {
        self != Variant::Concat
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected dppnet, rand-gru, cnn-fixed or concat)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the input feature vectors.
    pub features: usize,
    /// Width of the adapter's first layer.
    pub adapter_hidden: usize,
    /// Dynamic layer input width, which is also the adapter's output width.
    pub n: usize,
    /// Dynamic layer output width.
    pub m: usize,
    /// Number of candidate weights predicted per question.
    pub k: usize,
    /// GRU state width.
    pub hidden: usize,
    /// Word vector width.
    pub embed: usize,
    pub vocab: usize,
    pub answers: usize,
    pub seed_psi: u64,
    pub seed_xi: u64,
    pub gru_bias: bool,
    /// Width of the concatenation baseline's joint layer. `None` picks the
    /// width whose parameter count is closest to the dynamic network's.
    pub concat_hidden: Option<usize>,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dppnet,
            features: 22,
            adapter_hidden: 64,
            n: 64,
            m: 64,
            k: 256,
            hidden: 64,
            embed: 32,
            vocab: 1,
            answers: 1,
            seed_psi: DEFAULT_SEED_PSI,
            seed_xi: DEFAULT_SEED_XI,
            gru_bias: false,
            concat_hidden: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checking.
    pub fn toy() -> Self {
        Self {
            features: 24,
            adapter_hidden: 16,
            n: 16,
            m: 12,
            k: 32,
            hidden: 8,
            embed: 8,
            vocab: 10,
            answers: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("features", self.features),
            ("adapter_hidden", self.adapter_hidden),
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("vocab", self.vocab),
            ("answers", self.answers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.concat_hidden == Some(0) {
            return Err(Error::Config("`concat_hidden` must be positive".into()));
        }
        self.hash_spec().map(|_| ())
    }

    pub fn hash_spec(&self) -> Result<HashSpec> {
        HashSpec::new(self.m, self.n, self.k, self.seed_psi, self.seed_xi)
    }

    fn shared_params(&self) -> usize {
        let (f, a, n, h, e) = (self.features, self.adapter_hidden, self.n, self.hidden, self.embed);
        let gru = 3 * h * e + 3 * h * h + if self.gru_bias { 3 * h } else { 0 };
        a * f + a + n * a + n + self.vocab * e + gru + self.answers
    }

    /// Trainable scalars of the dynamic network built from this config.
    pub fn dynamic_param_count(&self) -> usize {
        let m = self.m;
        self.shared_params() + self.k * self.hidden + 3 * m + self.answers * m
    }

    /// Trainable scalars of the concatenation baseline with joint width `j`.
    pub fn concat_param_count(&self, j: usize) -> usize {
        self.shared_params() + j * (self.n + self.hidden) + 3 * j + self.answers * j
    }

    pub fn concat_width(&self) -> usize {
        self.concat_hidden.unwrap_or_else(|| {
            let target = (self.k * self.hidden + 3 * self.m + self.answers * self.m) as f64;
            let per_unit = (self.n + self.hidden + 3 + self.answers) as f64;
            ((target / per_unit).round() as usize).max(1)
        })
    }

    pub fn param_count(&self) -> usize {
        if self.variant.is_dynamic() {
            self.dynamic_param_count()
        } else {
            self.concat_param_count(self.concat_width())
        }
    }

    /// Width of the layer feeding the classifier.
    pub fn joint_width(&self) -> usize {
        if self.variant.is_dynamic() {
            self.m
        } else {
            self.concat_width()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub dppnet: usize,
    pub concat: usize,
    pub concat_hidden: usize,
    pub ratio: f64,
}

pub fn param_counts(config: &ModelConfig) -> ParamCounts {
    let j = config.concat_width();
    let (d, c) = (config.dynamic_param_count(), config.concat_param_count(j));
    ParamCounts {
        dppnet: d,
        concat: c,
        concat_hidden: j,
        ratio: c as f64 / d as f64,
    }
}

/// Equal-length questions with their feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub features: Tensor<S>,
    pub tokens: Vec<Vec<usize>>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(features: Tensor<S>, tokens: Vec<Vec<usize>>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != tokens.len() {
            return Err(Error::shape("batch", features.shape(), &[tokens.len()]));
        }
        if tokens.is_empty() || tokens.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence);
        }
        Ok(Self { features, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

}

/// Recurrent state for the questions of one length inside a batch.
pub struct EncodedGroup<S> {
    rows: Vec<usize>,
    steps: Vec<GruStepCache<S>>,
}

/// Batch row indices grouped by question length, shortest first.
fn rows_by_length(tokens: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        groups.entry(t.len()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Intermediate values kept for the backward pass.
pub struct Cache<S> {
    batch: Batch<S>,
    a1: Tensor<S>,
    h1: Tensor<S>,
    a2: Tensor<S>,
    f_in: Tensor<S>,
    gru: Vec<EncodedGroup<S>>,
    h_last: Tensor<S>,
    p: Option<Tensor<S>>,
    joint_in: Option<Tensor<S>>,
    bn: BatchNormCache<S>,
    post_bn: Tensor<S>,
    act: Tensor<S>,
}

impl<S> Cache<S> {
    pub fn batch_norm(&self) -> &BatchNormCache<S> {
        &self.bn
    }

    /// Candidate weight vectors, one row per example.
    pub fn candidates(&self) -> Option<&Tensor<S>> {
        self.p.as_ref()
    }
}

pub struct Step<S> {
    pub loss: S,
    pub logits: Tensor<S>,
    pub grads: Grads<S>,
    pub cache: Cache<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub bn: BatchNormState<S>,
    spec: HashSpec,
}

fn fan_in_uniform<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.hash_spec()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut params = ParamStore::new();
        let (st, dy) = (ParamKind::Static, ParamKind::DynamicProducing);
        params.insert(ADAPTER_W1, fan_in_uniform(c.adapter_hidden, c.features, &mut rng), st)?;
        params.insert(ADAPTER_B1, Tensor::zeros(&[c.adapter_hidden]), st)?;
        params.insert(ADAPTER_W2, fan_in_uniform(c.n, c.adapter_hidden, &mut rng), st)?;
        params.insert(ADAPTER_B2, Tensor::zeros(&[c.n]), st)?;
        params.insert(
            encoder::EMBED,
            encoder::EmbeddingTable::random(c.vocab, c.embed, &mut rng).table,
            dy,
        )?;
        let gru = encoder::GruParams::random(c.embed, c.hidden, c.gru_bias, &mut rng);
        for (name, t) in gru.named() {
            params.insert(name, t.clone(), dy)?;
        }
        let width = c.joint_width();
        if c.variant.is_dynamic() {
            params.insert(encoder::W_P, fan_in_uniform(c.k, c.hidden, &mut rng), dy)?;
            params.insert(DYN_BIAS, Tensor::zeros(&[c.m]), st)?;
        } else {
            params.insert(JOINT_W, fan_in_uniform(width, c.n + c.hidden, &mut rng), st)?;
            params.insert(JOINT_B, Tensor::zeros(&[width]), st)?;
        }
        params.insert(BN_GAMMA, Tensor::full(&[width], S::one()), st)?;
        params.insert(BN_BETA, Tensor::zeros(&[width]), st)?;
        params.insert(CLS_W, fan_in_uniform(c.answers, width, &mut rng), st)?;
        params.insert(CLS_B, Tensor::zeros(&[c.answers]), st)?;
        debug_assert_eq!(params.num_scalars(), c.param_count());
        Ok(Self {
            bn: BatchNormState::new(width),
            config,
            params,
            spec,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape
    /// against the config.
    pub fn from_parts(config: ModelConfig, params: ParamStore<S>, bn: BatchNormState<S>) -> Result<Self> {
        let fresh = Model::<S>::new(config)?;
        for (name, p) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::shape("model parameter", got.shape(), p.tensor.shape()));
            }
        }
        if params.len() != fresh.params.len() {
            let extra = params.names().find(|n| !fresh.params.contains(n)).unwrap_or_default();
            return Err(Error::UnknownParam(extra.to_string()));
        }
        if bn.features() != fresh.bn.features() {
            return Err(Error::shape("batch norm state", &[bn.features()], &[fresh.bn.features()]));
        }
        Ok(Self { params, bn, ..fresh })
    }

    pub fn hash_spec(&self) -> &HashSpec {
        &self.spec
    }

    fn p(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name)
    }

    fn gru_weights(&self) -> Result<GruWeights<'_, S>> {
        let bias = if self.config.gru_bias {
            Some([self.p(encoder::B_R)?, self.p(encoder::B_Z)?, self.p(encoder::B_H)?])
        } else {
            None
        };
        Ok(GruWeights {
            w_r: self.p(encoder::W_R)?,
            w_z: self.p(encoder::W_Z)?,
            w_h: self.p(encoder::W_H)?,
            u_r: self.p(encoder::U_R)?,
            u_z: self.p(encoder::U_Z)?,
            u_h: self.p(encoder::U_H)?,
            bias,
        })
    }

    /// `h_T` for each question, in input order. Questions of equal length
    /// run through the recurrence together.
    pub fn encode(&self, tokens: &[Vec<usize>]) -> Result<(Tensor<S>, Vec<EncodedGroup<S>>)> {
        if tokens.is_empty() || tokens.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence);
        }
        let table = self.p(encoder::EMBED)?;
        let w = self.gru_weights()?;
        let mut h_last = Tensor::zeros(&[tokens.len(), self.config.hidden]);
        let mut groups = Vec::new();
        for rows in rows_by_length(tokens) {
            let refs: Vec<&[usize]> = rows.iter().map(|&i| tokens[i].as_slice()).collect();
            let xs = embed(&refs, table)?;
            let (h, steps) = gru_encode(&xs, &w)?;
            for (k, &i) in rows.iter().enumerate() {
                h_last.row_mut(i).copy_from_slice(h.row(k));
            }
            groups.push(EncodedGroup { rows, steps });
        }
        Ok((h_last, groups))
    }

    /// Logits for a batch. In train mode the batch statistics are used and
    /// returned in the cache; the running estimates are left alone.
    pub fn forward(&self, batch: &Batch<S>, mode: Mode) -> Result<(Tensor<S>, Cache<S>)> {
        if batch.features.cols() != self.config.features {
            return Err(Error::shape("model features", batch.features.shape(), &[self.config.features]));
        }
        if !batch.features.is_finite() {
            return Err(Error::Config("input features must be finite".into()));
        }
        let relu = Activation::Relu;
        let a1 = linear(&batch.features, self.p(ADAPTER_W1)?, Some(self.p(ADAPTER_B1)?))?;
        let h1 = relu.forward(&a1);
        let a2 = linear(&h1, self.p(ADAPTER_W2)?, Some(self.p(ADAPTER_B2)?))?;
        let f_in = relu.forward(&a2);
        let (h_last, gru) = self.encode(&batch.tokens)?;

        let (p, joint_in, pre_bn) = if self.config.variant.is_dynamic() {
            let p = predict_candidates(&h_last, self.p(encoder::W_P)?)?;
            let f_out = dyn_forward(&f_in, &p, &self.spec, self.p(DYN_BIAS)?.data())?;
            (Some(p), None, f_out)
        } else {
            let joint_in = f_in.hcat(&h_last)?;
            let j = linear(&joint_in, self.p(JOINT_W)?, Some(self.p(JOINT_B)?))?;
            (None, Some(joint_in), j)
        };
        let (post_bn, bn) = batchnorm::forward(
            &pre_bn,
            self.p(BN_GAMMA)?.data(),
            self.p(BN_BETA)?.data(),
            &self.bn,
            mode,
        )?;
        let act = relu.forward(&post_bn);
        let logits = linear(&act, self.p(CLS_W)?, Some(self.p(CLS_B)?))?;
        let cache = Cache {
            batch: batch.clone(),
            a1,
            h1,
            a2,
            f_in,
            gru,
            h_last,
            p,
            joint_in,
            bn,
            post_bn,
            act,
        };
        Ok((logits, cache))
    }

    fn trainable(&self, prefix: &str) -> bool {
        self.params
            .iter()
            .any(|(name, p)| name.starts_with(prefix) && !p.frozen)
    }

    /// Gradients of the loss with respect to every parameter, given
    /// `dL/dlogits`. Sub-networks whose parameters are all frozen are
    /// skipped and report zero gradients.
    pub fn backward(&self, cache: &Cache<S>, dlogits: &Tensor<S>) -> Result<Grads<S>> {
        let relu = Activation::Relu;
        let mut grads = Grads::zeros_like(&self.params);
        let cls = linear_backward(&cache.act, self.p(CLS_W)?, dlogits)?;
        grads.accumulate(CLS_W, &cls.dw)?;
        grads.accumulate(CLS_B, &cls.db)?;
        let d_post = relu.backward(&cache.post_bn, &cache.act, &cls.dx)?;
        let bn = batchnorm::backward(&d_post, self.p(BN_GAMMA)?.data(), &cache.bn)?;
        grads.accumulate(BN_GAMMA, &bn.dgamma)?;
        grads.accumulate(BN_BETA, &bn.dbeta)?;

        let (d_f_in, d_h) = if let Some(p) = &cache.p {
            let g = dyn_backward(&cache.f_in, p, &bn.dx, &self.spec)?;
            grads.accumulate(DYN_BIAS, &g.d_bias)?;
            let (d_h, d_wp) = predict_candidates_backward(&cache.h_last, self.p(encoder::W_P)?, &g.d_p)?;
            grads.accumulate(encoder::W_P, &d_wp)?;
            (g.d_in, d_h)
        } else {
            let joint_in = cache.joint_in.as_ref().expect("concat cache holds the joint input");
            let g = linear_backward(joint_in, self.p(JOINT_W)?, &bn.dx)?;
            grads.accumulate(JOINT_W, &g.dw)?;
            grads.accumulate(JOINT_B, &g.db)?;
            g.dx.hsplit(self.config.n)?
        };

        if self.trainable(ENCODER_PREFIX) {
            let w = self.gru_weights()?;
            for group in &cache.gru {
                let (dxs, gg) = gru_encode_backward(&d_h.select_rows(&group.rows)?, &group.steps, &w)?;
                for (name, t) in gg.named() {
                    grads.accumulate(name, t)?;
                }
                let tokens: Vec<&[usize]> = group.rows.iter().map(|&i| cache.batch.tokens[i].as_slice()).collect();
                let d_embed = embed_backward(&tokens, &dxs, self.config.vocab)?;
                grads.accumulate(encoder::EMBED, &d_embed)?;
            }
        }

        if self.trainable(ADAPTER_PREFIX) {
            let d_a2 = relu.backward(&cache.a2, &cache.f_in, &d_f_in)?;
            let l2 = linear_backward(&cache.h1, self.p(ADAPTER_W2)?, &d_a2)?;
            grads.accumulate(ADAPTER_W2, &l2.dw)?;
            grads.accumulate(ADAPTER_B2, &l2.db)?;
            let d_a1 = relu.backward(&cache.a1, &cache.h1, &l2.dx)?;
            let l1 = linear_backward(&cache.batch.features, self.p(ADAPTER_W1)?, &d_a1)?;
            grads.accumulate(ADAPTER_W1, &l1.dw)?;
            grads.accumulate(ADAPTER_B1, &l1.db)?;
        }
        Ok(grads)
    }

    /// Mean cross-entropy and its gradients for one batch.
    pub fn loss_and_grads(&self, batch: &Batch<S>, targets: &[usize], mode: Mode) -> Result<Step<S>> {
        let (logits, cache) = self.forward(batch, mode)?;
        let (loss, dlogits) = softmax_xent(&logits, targets)?;
        let grads = self.backward(&cache, &dlogits)?;
        Ok(Step {
            loss,
            logits,
            grads,
            cache,
        })
    }

    /// Answer distributions (eval mode), one row per example.
    pub fn probabilities(&self, batch: &Batch<S>) -> Result<Tensor<S>> {
        Ok(softmax(&self.forward(batch, Mode::Eval)?.0))
    }

    /// Highest-probability class per example. With `candidates`, only the
    /// listed classes of each example compete. Ties go to the lowest index.
    pub fn predict(&self, batch: &Batch<S>, candidates: Option<&[Vec<usize>]>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(batch, Mode::Eval)?;
        (0..batch.len())
            .map(|i| match candidates {
                None => Ok(argmax(logits.row(i))),
                Some(c) => masked_argmax(logits.row(i), &c[i]),
            })
            .collect()
    }

    /// Copies a pre-trained embedding and GRU into this model. Rows are
    /// matched by token when the file carries a vocabulary and by id
    /// otherwise; tokens the file does not know keep their initialization.
    /// Returns the number of embedding rows copied.
    pub fn load_pretrained(&mut self, enc: &PretrainedEncoder<S>, vocab: &Vocabulary) -> Result<usize> {
        if self.config.variant == Variant::RandGru {
            return Err(Error::Config("the rand-gru variant never loads a pre-trained encoder".into()));
        }
        let (e, h) = (self.config.embed, self.config.hidden);
        if enc.gru.input() != e || enc.gru.hidden() != h {
            return Err(Error::Config(format!(
                "pre-trained encoder has E={} H={}, model expects E={e} H={h}",
                enc.gru.input(),
                enc.gru.hidden()
            )));
        }
        if enc.gru.bias.is_some() != self.config.gru_bias {
            return Err(Error::Config("pre-trained GRU bias presence differs from `gru_bias`".into()));
        }
        for (name, t) in enc.gru.named() {
            self.params.set(name, t.clone())?;
        }
        let source = &enc.embedding.table;
        let mut table = self.p(encoder::EMBED)?.clone();
        let mut copied = 0;
        for id in 0..vocab.len() {
            let src = match &enc.vocab {
                Some(words) => words.iter().position(|w| Some(w.as_str()) == vocab.token(id)),
                None => (id < source.rows()).then_some(id),
            };
            if let Some(row) = src {
                table.row_mut(id).copy_from_slice(source.row(row));
                copied += 1;
            }
        }
        self.params.set(encoder::EMBED, table)?;
        Ok(copied)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn: BatchNormState {
                running_mean: self.bn.running_mean.iter().map(|v| T::lit(v.as_f64())).collect(),
                running_var: self.bn.running_var.iter().map(|v| T::lit(v.as_f64())).collect(),
                momentum: T::lit(self.bn.momentum.as_f64()),
                epsilon: T::lit(self.bn.epsilon.as_f64()),
            },
            spec: self.spec,
        }
    }
}

fn masked_argmax<S: Scalar>(row: &[S], allowed: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &c in allowed {
        if c >= row.len() {
            return Err(Error::OutOfRange {
                what: "candidate class",
                index: c,
                bound: row.len(),
            });
        }
        best = match best {
            Some(b) if row[b] > row[c] || (row[b] == row[c] && b < c) => Some(b),
            _ => Some(c),
        };
    }
    best.ok_or_else(|| Error::Config("empty candidate list".into()))
}

/// A dataset mapped to ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<S> {
    pub ids: Vec<String>,
    pub features: Tensor<S>,
    pub tokens: Vec<Vec<usize>>,
    /// Class of the first answer, `None` when it is outside the answer space.
    pub targets: Vec<Option<usize>>,
}

impl<S: Scalar> Encoded<S> {
    pub fn new(data: &Dataset, vocab: &Vocabulary, answers: &AnswerSpace, features: usize) -> Result<Self> {
        let mut flat = Vec::with_capacity(data.len() * features);
        let mut tokens = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for ex in &data.examples {
            if ex.features.len() != features {
                return Err(Error::Config(format!(
                    "example `{}` has {} features, model expects {features}",
                    ex.id,
                    ex.features.len()
                )));
            }
            let ids = vocab.encode(&ex.question);
            if ids.is_empty() {
                return Err(Error::Config(format!("example `{}` has an empty question", ex.id)));
            }
            flat.extend(ex.features.iter().map(|&v| S::lit(v)));
            tokens.push(ids);
            targets.push(ex.answers.first().and_then(|a| answers.class(a)));
        }
        Ok(Self {
            ids: data.examples.iter().map(|e| e.id.clone()).collect(),
            features: Tensor::new(vec![data.len(), features], flat)?,
            tokens,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<S>> {
        let f = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Batch::new(
            Tensor::new(vec![indices.len(), f], data)?,
            indices.iter().map(|&i| self.tokens[i].clone()).collect(),
        )
    }
}

/// Eval-mode predictions for a whole encoded dataset, in dataset order.
pub fn predict_all<S: Scalar>(
    model: &Model<S>,
    data: &Encoded<S>,
    candidates: Option<&[Vec<usize>]>,
) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut out = vec![0; data.len()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let batch = data.batch(chunk)?;
        let masks: Option<Vec<Vec<usize>>> = candidates.map(|c| chunk.iter().map(|&i| c[i].clone()).collect());
        let preds = model.predict(&batch, masks.as_deref())?;
        for (&i, p) in chunk.iter().zip(preds) {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Fraction of examples whose prediction equals the target. Examples whose
/// answer is outside the answer space count as wrong.
pub fn accuracy(predictions: &[usize], targets: &[Option<usize>]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| Some(**p) == **t)
        .count();
    hits as f64 / targets.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub rank: usize,
    pub index: usize,
    pub question: String,
    pub similarity: f64,
}

/// Cosine similarity, clamped to `[-1, 1]`; zero when either vector has
/// zero norm.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Model, vocabulary and answer space: everything needed to answer raw
/// questions, stored together in one checkpoint directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle<S> {
    pub model: Model<S>,
    pub vocab: Vocabulary,
    pub answers: AnswerSpace,
}

impl<S: Scalar> Bundle<S> {
    pub fn encode(&self, data: &Dataset) -> Result<Encoded<S>> {
        Encoded::new(data, &self.vocab, &self.answers, self.model.config.features)
    }

    /// Question embeddings `h_T`, one per question, in input order.
    pub fn embed_questions(&self, questions: &[String]) -> Result<Vec<Vec<S>>> {
        let ids: Vec<Vec<usize>> = questions.iter().map(|q| self.vocab.encode(q)).collect();
        if let Some(i) = ids.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("question `{}` has no tokens", questions[i])));
        }
        let (h, _) = self.model.encode(&ids)?;
        Ok((0..ids.len()).map(|i| h.row(i).to_vec()).collect())
    }

    /// Corpus questions ranked by cosine similarity of their embedding to
    /// the query's, most similar first. Equal similarities keep corpus order.
    pub fn retrieve(&self, query: &str, corpus: &[String], top_k: usize) -> Result<Vec<Neighbor>> {
        if corpus.is_empty() {
            return Err(Error::Config("retrieval corpus is empty".into()));
        }
        let q = self.embed_questions(&[query.to_string()])?.remove(0);
        let emb = self.embed_questions(corpus)?;
        let mut scored: Vec<(usize, f64)> = emb.iter().map(|e| cosine(&q, e)).enumerate().collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        Ok(scored
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(rank, (index, similarity))| Neighbor {
                rank: rank + 1,
                index,
                question: corpus[index].clone(),
                similarity,
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = &self.model;
        let mean = Tensor::from_vec(m.bn.running_mean.clone());
        let var = Tensor::from_vec(m.bn.running_var.clone());
        let mut items = checkpoint::params_items(&m.params);
        items.push(Item::buffer(BN_RUNNING_MEAN, &mean));
        items.push(Item::buffer(BN_RUNNING_VAR, &var));
        let hash = m.config.variant.is_dynamic().then_some(m.spec);
        checkpoint::write(dir, &items, hash)?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&m.config)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        self.vocab.save(&dir.join(encoder::VOCAB_FILE))?;
        self.answers.save(&dir.join(ANSWERS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let (manifest, mut tensors) = checkpoint::read::<S>(dir)?;
        if config.variant.is_dynamic() && manifest.hash != Some(config.hash_spec()?) {
            return Err(bad("hash spec in the manifest disagrees with model.json".into()));
        }
        let params = checkpoint::store_from(&manifest, &tensors)?;
        let mut take = |name: &str| {
            tensors
                .shift_remove(name)
                .map(Tensor::into_data)
                .ok_or_else(|| bad(format!("missing buffer `{name}`")))
        };
        let mut bn = BatchNormState::new(config.joint_width());
        bn.running_mean = take(BN_RUNNING_MEAN)?;
        bn.running_var = take(BN_RUNNING_VAR)?;
        let vocab = Vocabulary::load(&dir.join(encoder::VOCAB_FILE))?;
        let answers = AnswerSpace::load(&dir.join(ANSWERS_FILE))?;
        if vocab.len() != config.vocab || answers.len() != config.answers {
            return Err(bad(format!(
                "vocabulary/answer files have {}/{} entries, model.json says {}/{}",
                vocab.len(),
                answers.len(),
                config.vocab,
                config.answers
            )));
        }
        let model = Model::from_parts(config, params, bn).map_err(|e| bad(e.to_string()))?;
        Ok(Self { model, vocab, answers })
    }
}
