//! Feature-only baselines for the synthetic task.
//!
//! A linear softmax classifier that never sees the question, and the
//! accuracy of always answering the most common training answer. If the
//! probe gets close to a question-aware model, the task does not need the
//! question.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Encoded;
use crate::ops::{argmax, linear, linear_backward, softmax_xent};
use crate::params::{Grads, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_accuracy: f64,
    /// Accuracy of always predicting the most frequent training answer.
    pub prior_accuracy: f64,
    pub prior_class: usize,
}

fn labelled(data: &Encoded<f64>) -> Vec<usize> {
    (0..data.len()).filter(|&i| data.targets[i].is_some()).collect()
}

/// Most frequent training class; ties go to the lowest index.
pub fn majority_class(data: &Encoded<f64>, classes: usize) -> Result<usize> {
    let mut counts = vec![0usize; classes];
    for t in data.targets.iter().flatten() {
        *counts.get_mut(*t).ok_or(Error::Config(format!("target {t} outside {classes} classes")))? += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Config("no labelled training examples".into()));
    }
    let max = *counts.iter().max().unwrap();
    Ok(counts.iter().position(|&c| c == max).unwrap())
}

/// Trains a linear softmax classifier on features alone and scores it, and
/// the majority-class prior, on `test`.
pub fn run_probe(
    train: &Encoded<f64>,
    test: &Encoded<f64>,
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if config.batch_size < 1 || config.epochs == 0 || classes == 0 {
        return Err(Error::Config("probe needs epochs, a batch size and classes".into()));
    }
    let f = train.features.cols();
    let mut params = ParamStore::new();
    params.insert("w", Tensor::zeros(&[classes, f]), ParamKind::Static)?;
    params.insert("b", Tensor::zeros(&[classes]), ParamKind::Static)?;
    let mut adam = AdamState::<f64>::new(config.lr, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = labelled(train);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = train.features.select_rows(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.targets[i].unwrap()).collect();
            let logits = linear(&x, params.get("w")?, Some(params.get("b")?))?;
            let (_, dlogits) = softmax_xent(&logits, &targets)?;
            let g = linear_backward(&x, params.get("w")?, &dlogits)?;
            let mut grads = Grads::zeros_like(&params);
            grads.accumulate("w", &g.dw)?;
            grads.accumulate("b", &g.db)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
    }

    let prior_class = majority_class(train, classes)?;
    let logits = linear(&test.features, params.get("w")?, Some(params.get("b")?))?;
    let total = test.len().max(1) as f64;
    let probe_hits = (0..test.len())
        .filter(|&i| test.targets[i] == Some(argmax(logits.row(i))))
        .count();
    let prior_hits = test.targets.iter().filter(|t| **t == Some(prior_class)).count();
    Ok(ProbeReport {
        probe_accuracy: probe_hits as f64 / total,
        prior_accuracy: prior_hits as f64 / total,
        prior_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Dataset, QAExample};
    use crate::synthetic::{generate, GenConfig};

    fn example(features: Vec<f64>, answer: &str) -> QAExample {
        QAExample {
            id: String::new(),
            features,
            question: "what is it".into(),
            answers: vec![answer.into()],
        }
    }

    #[test]
    fn learns_a_separable_feature_rule() {
        let rows: Vec<QAExample> = (0..200)
            .map(|i| {
                let on = i % 2 == 0;
                example(vec![if on { 1.0 } else { 0.0 }, if on { 0.0 } else { 1.0 }], if on { "a" } else { "b" })
            })
            .collect();
        let data = Dataset::new(rows);
        let (vocab, answers) = build_vocab(&data).unwrap();
        let enc = Encoded::new(&data, &vocab, &answers, 2).unwrap();
        let r = run_probe(&enc, &enc, answers.len(), &ProbeConfig::default()).unwrap();
        assert_eq!(r.probe_accuracy, 1.0);
        assert_eq!(r.prior_accuracy, 0.5);
        assert_eq!(r.prior_class, 0);
    }

    #[test]
    fn features_alone_stay_near_the_prior_on_the_synthetic_task() {
        let cfg = GenConfig {
            train_scenes: 1500,
            val_scenes: 10,
            test_scenes: 500,
            ..GenConfig::default()
        };
        let splits = generate(&cfg, 7).unwrap();
        let (vocab, answers) = build_vocab(&splits.train).unwrap();
        let f = cfg.feature_dim();
        let train = Encoded::new(&splits.train, &vocab, &answers, f).unwrap();
        let test = Encoded::new(&splits.test, &vocab, &answers, f).unwrap();
        let r = run_probe(&train, &test, answers.len(), &ProbeConfig::default()).unwrap();
        assert!(r.probe_accuracy <= r.prior_accuracy + 0.10, "{r:?}");
    }

    #[test]
    fn majority_ties_take_the_lowest_class() {
        let rows = vec![example(vec![0.0], "x"), example(vec![0.0], "y")];
        let data = Dataset::new(rows);
        let (vocab, answers) = build_vocab(&data).unwrap();
        let enc = Encoded::new(&data, &vocab, &answers, 1).unwrap();
        assert_eq!(majority_class(&enc, answers.len()).unwrap(), 0);
    }
}
