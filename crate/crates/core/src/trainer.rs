//! Adam, global-norm clipping and the epoch loop.
//!
//! The loop draws shuffled minibatches with a seeded generator and tracks validation accuracy for three rules: early
//! stopping, unfreezing the feature adapter once validation accuracy
//! plateaus, and permanently freezing the question encoder once it starts to
//! overfit.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::Mode;
use crate::error::{Error, Result};
use crate::model::{accuracy, predict_all, Encoded, Model, Variant, ADAPTER_PREFIX, ENCODER_PREFIX};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Scales every gradient by `threshold / ‖g‖` when the global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients<S: Scalar>(grads: &mut Grads<S>, threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = grads.global_norm().as_f64();
    if norm > threshold {
        grads.scale(S::lit(threshold / norm));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: IndexMap<String, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            moments: IndexMap::new(),
        }
    }

    /// Updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.step)
    }
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new(0.01, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are not touched, and neither are their moments.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, grads: &Grads<S>, state: &mut AdamState<S>) -> Result<()> {
    let (b1, b2) = (S::lit(state.beta1), S::lit(state.beta2));
    let (lr, eps) = (S::lit(state.lr), S::lit(state.epsilon));
    let one = S::one();
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("adam_step", p.tensor.shape(), g.shape()));
        }
        if p.frozen {
            continue;
        }
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        mom.step += 1;
        let t = mom.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let (md, vd) = (mom.m.data_mut(), mom.v.data_mut());
        for (((w, &gv), mv), vv) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    /// Global gradient-norm threshold.
    pub clip: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    /// Epochs without improvement after which the feature adapter starts
    /// training. Zero trains it from the first epoch.
    pub unfreeze_patience: usize,
    /// Train/validation accuracy gap (as a fraction, 0.10 = ten points)
    /// that counts as overfitting.
    pub overfit_gap: f64,
    /// Consecutive overfitting epochs before the encoder is frozen.
    pub overfit_epochs: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            clip: 0.1,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            unfreeze_patience: 3,
            overfit_gap: 0.10,
            overfit_epochs: 2,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip threshold must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam needs lr > 0 and betas in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm needs two rows)");
        }
        if self.overfit_epochs == 0 {
            return bad("overfit_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Parameters that were frozen during this epoch.
    pub frozen: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    NonFinite { epoch: usize, loss: f64 },
}

/// What the validation-accuracy rules decided after one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Decision {
    pub improved: bool,
    pub unfreeze_adapter: bool,
    pub freeze_encoder: bool,
    pub stop: bool,
}

/// The schedule's bookkeeping, separated from the numerics.
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    unfreeze_patience: Option<usize>,
    overfit_gap: f64,
    overfit_epochs: usize,
    best: f64,
    best_epoch: usize,
    stall: usize,
    overfit_streak: usize,
    adapter_frozen: bool,
    encoder_frozen: bool,
}

impl Plateau {
    /// `unfreeze_patience = None` keeps the adapter frozen for good.
    pub fn new(schedule: &TrainSchedule, unfreeze_patience: Option<usize>) -> Self {
        Self {
            patience: schedule.patience,
            unfreeze_patience,
            overfit_gap: schedule.overfit_gap,
            overfit_epochs: schedule.overfit_epochs,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stall: 0,
            overfit_streak: 0,
            adapter_frozen: unfreeze_patience != Some(0),
            encoder_frozen: false,
        }
    }

    pub fn adapter_frozen(&self) -> bool {
        self.adapter_frozen
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }

    pub fn observe(&mut self, epoch: usize, train_acc: f64, val_acc: f64) -> Decision {
        let mut d = Decision::default();
        if val_acc > self.best {
            self.best = val_acc;
            self.best_epoch = epoch;
            self.stall = 0;
            d.improved = true;
        } else {
            self.stall += 1;
        }
        if self.adapter_frozen && self.unfreeze_patience.is_some_and(|p| self.stall >= p) {
            self.adapter_frozen = false;
            self.stall = 0;
            d.unfreeze_adapter = true;
        }
        if !self.encoder_frozen {
            if train_acc - val_acc > self.overfit_gap {
                self.overfit_streak += 1;
            } else {
                self.overfit_streak = 0;
            }
            if self.overfit_streak >= self.overfit_epochs {
                self.encoder_frozen = true;
                d.freeze_encoder = true;
            }
        }
        d.stop = self.stall >= self.patience;
        d
    }
}

pub struct TrainOutcome<S> {
    /// Weights from the epoch with the best validation accuracy.
    pub model: Model<S>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stop: StopReason,
    /// Training examples left out because their answer is outside the
    /// answer space.
    pub skipped: usize,
}

/// Shuffled minibatches for one epoch. A trailing batch of one example is
/// merged into its predecessor, since batch statistics need two rows.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|c| c.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn apply_freezing<S: Scalar>(model: &mut Model<S>, adapter_frozen: bool, encoder_frozen: bool) {
    model.params.set_frozen(ADAPTER_PREFIX, adapter_frozen);
    model.params.set_frozen(ENCODER_PREFIX, encoder_frozen);
}

/// Trains `model` and returns the best-validation weights with the log.
/// `on_epoch` sees each log line as soon as the epoch finishes.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    train_set: &Encoded<S>,
    val_set: &Encoded<S>,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    schedule.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let unfreeze = match model.config.variant {
        Variant::CnnFixed => None,
        _ => Some(schedule.unfreeze_patience),
    };
    let mut plateau = Plateau::new(schedule, unfreeze);
    let mut encoder_frozen = false;
    apply_freezing(&mut model, plateau.adapter_frozen(), encoder_frozen);

    let labelled: Vec<usize> = (0..train_set.len()).filter(|&i| train_set.targets[i].is_some()).collect();
    if labelled.len() < 2 {
        return Err(Error::Config("training needs at least two questions with known answers".into()));
    }
    let skipped = train_set.len() - labelled.len();

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::new(schedule.lr, schedule.beta1, schedule.beta2, schedule.adam_epsilon);
    let mut best = model.clone();
    let mut logs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=schedule.max_epochs {
        let frozen = model.params.frozen_names();
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for batch_idx in epoch_batches(&labelled, schedule.batch_size, &mut rng) {
            let batch = train_set.batch(&batch_idx)?;
            let targets: Vec<usize> = batch_idx.iter().map(|&i| train_set.targets[i].unwrap()).collect();
            let mut step = model.loss_and_grads(&batch, &targets, Mode::Train)?;
            let loss = step.loss.as_f64();
            if !loss.is_finite() || !step.grads.is_finite() {
                stop = StopReason::NonFinite { epoch, loss };
                break 'epochs;
            }
            clip_gradients(&mut step.grads, schedule.clip);
            adam_step(&mut model.params, &step.grads, &mut adam)?;
            model.bn.commit(step.cache.batch_norm());
            loss_sum += loss * targets.len() as f64;
            seen += targets.len();
            hits += (0..targets.len())
                .filter(|&i| crate::ops::argmax(step.logits.row(i)) == targets[i])
                .count();
        }
        let val_acc = accuracy(&predict_all(&model, val_set, None)?, &val_set.targets);
        let train_acc = hits as f64 / seen as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc,
            val_acc,
            lr: schedule.lr,
            frozen,
        };
        on_epoch(&log);
        logs.push(log);

        let decision = plateau.observe(epoch, train_acc, val_acc);
        if decision.improved {
            best = model.clone();
        }
        encoder_frozen |= decision.freeze_encoder;
        apply_freezing(&mut model, plateau.adapter_frozen(), encoder_frozen);
        if decision.stop {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_val_acc) = plateau.best();
    Ok(TrainOutcome {
        model: best,
        logs,
        best_epoch,
        best_val_acc: if best_epoch == 0 { 0.0 } else { best_val_acc },
        stop,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use rand::Rng;

    fn grads_of(store: &ParamStore<f64>, values: &[(&str, Vec<f64>)]) -> Grads<f64> {
        let mut g = Grads::zeros_like(store);
        for (name, v) in values {
            g.accumulate(name, &Tensor::from_vec(v.clone())).unwrap();
        }
        g
    }

    fn store(values: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, v) in values {
            s.insert(*name, Tensor::from_vec(v.clone()), ParamKind::Static).unwrap();
        }
        s
    }

    #[test]
    fn clipping() {
        let s = store(&[("a", vec![0.0, 0.0])]);
        let mut g = grads_of(&s, &[("a", vec![0.03, 0.04])]);
        assert_eq!(clip_gradients(&mut g, 0.1), 0.05);
        assert_eq!(g.get("a").unwrap().data(), &[0.03, 0.04]);

        let mut g = grads_of(&s, &[("a", vec![0.3, 0.4])]);
        clip_gradients(&mut g, 0.1);
        let d = g.get("a").unwrap().data();
        assert!((d[0] - 0.06).abs() < 1e-15 && (d[1] - 0.08).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = store(&[("a", vec![0.0; 7]), ("b", vec![0.0; 3])]);
        for _ in 0..100 {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let a: Vec<f64> = (0..7).map(|_| rng.random_range(-scale..scale)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-scale..scale)).collect();
            let mut g = grads_of(&s, &[("a", a), ("b", b)]);
            clip_gradients(&mut g, 0.1);
            assert!(g.global_norm() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(&[("w", vec![1.0, -2.0, 0.5])]);
        let g = grads_of(&s, &[("w", vec![0.3, -7.0, 1e-3])]);
        let mut st = AdamState::default();
        adam_step(&mut s, &g, &mut st).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert!((w[2] - 0.49).abs() < 1e-4);
        assert_eq!(st.steps("w"), 1);
    }

    #[test]
    fn adam_zero_grad_is_a_no_op() {
        let mut s = store(&[("w", vec![1.0, -2.0])]);
        let g = Grads::zeros_like(&s);
        adam_step(&mut s, &g, &mut AdamState::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_shrinks_a_quadratic_monotonically() {
        // Scalar simulation of the same rule as the oracle.
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut s = store(&[("w", vec![1.0])]);
        let mut st = AdamState::default();
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = w_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.01 * mh / (vh.sqrt() + 1e-8);

            let w = s.get("w").unwrap().data()[0];
            let grads = grads_of(&s, &[("w", vec![w])]);
            adam_step(&mut s, &grads, &mut st).unwrap();
            let now = s.get("w").unwrap().data()[0];
            assert!(now.abs() < prev.abs());
            assert!((now - w_ref).abs() < 1e-15);
            prev = now;
        }
    }

    #[test]
    fn adam_skips_frozen_and_rejects_bad_shapes() {
        let mut s = store(&[("a", vec![1.0]), ("b", vec![1.0])]);
        s.set_frozen("b", true);
        let before = s.get("b").unwrap().data()[0].to_bits();
        let g = grads_of(&s, &[("a", vec![1.0]), ("b", vec![1.0])]);
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut s, &g, &mut st).unwrap();
        }
        assert_eq!(s.get("b").unwrap().data()[0].to_bits(), before);
        assert_eq!(st.steps("b"), 0);

        let other = store(&[("a", vec![1.0, 2.0]), ("b", vec![1.0])]);
        let bad = Grads::zeros_like(&other);
        assert!(adam_step(&mut s, &bad, &mut st).is_err());
    }

    #[test]
    fn patience_trace() {
        let schedule = TrainSchedule {
            patience: 5,
            ..TrainSchedule::default()
        };
        let mut p = Plateau::new(&schedule, None);
        let mut stopped = None;
        for epoch in 1..=30 {
            let acc = if epoch <= 10 { epoch as f64 / 100.0 } else { 0.10 };
            if p.observe(epoch, acc, acc).stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(15));
        assert_eq!(p.best(), (10, 0.10));
    }

    #[test]
    fn adapter_unfreezes_after_plateau() {
        let schedule = TrainSchedule::default();
        let mut p = Plateau::new(&schedule, Some(3));
        assert!(p.adapter_frozen());
        let accs = [0.5, 0.6, 0.6, 0.6, 0.6];
        let unfrozen: Vec<bool> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| p.observe(i + 1, a, a).unfreeze_adapter)
            .collect();
        assert_eq!(unfrozen, [false, false, false, false, true]);
        assert!(!p.adapter_frozen());

        assert!(!Plateau::new(&schedule, Some(0)).adapter_frozen());
        let mut never = Plateau::new(&schedule, None);
        for e in 1..10 {
            assert!(!never.observe(e, 0.5, 0.5).unfreeze_adapter);
        }
    }

    #[test]
    fn encoder_freezes_after_consecutive_overfit_epochs() {
        let schedule = TrainSchedule::default();
        let mut p = Plateau::new(&schedule, None);
        let gaps = [(0.9, 0.85), (0.95, 0.80), (0.90, 0.85), (0.97, 0.8), (0.99, 0.8), (0.99, 0.7)];
        let fired: Vec<bool> = gaps
            .iter()
            .enumerate()
            .map(|(i, &(t, v))| p.observe(i + 1, t, v).freeze_encoder)
            .collect();
        assert_eq!(fired, [false, false, false, false, true, false]);
    }

    #[test]
    fn batches_cover_indices_and_never_hold_one_example() {
        let indices: Vec<usize> = (1..34).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&indices, 8, &mut rng);
        assert!(batches.iter().all(|b| b.len() >= 2));
        assert_eq!(batches.len(), 4);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, indices);
        let again = epoch_batches(&indices, 8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(batches, again);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        for bad in [
            TrainSchedule { patience: 0, ..Default::default() },
            TrainSchedule { clip: 0.0, ..Default::default() },
            TrainSchedule { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
