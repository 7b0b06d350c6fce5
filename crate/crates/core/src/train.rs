//! Loss, optimizer, learning-rate schedule and the training loop.
//!
//! Training uses one cloud per optimizer step. Every epoch draws its own RNG
//! from `(seed, epoch)`, so a run resumed from a checkpoint replays exactly
//! the shuffles, sampling and dropout masks the uninterrupted run would have
//! used.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::network::{argmax_rows, Mode, SegmentationNetwork};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Weight the loss by inverse class frequency over the training set.
    pub class_weighting: bool,
    /// Write a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr0: 0.02,
            decay: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            class_weighting: false,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay = {} must lie in (0, 1]", self.decay)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// `lr0 * decay^epoch` for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

/// Mean (or class-weighted mean) cross-entropy of `logits` against `labels`.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    tape.cross_entropy(logits, labels, class_weights)
}

/// `total / (classes * count_c)` per class; zero for classes never seen.
pub fn inverse_frequency_weights(dataset: &[PointCloud], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for cloud in dataset {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::data("class weighting needs labeled clouds"))?;
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::data(format!("label {l} outside [0, {classes})")))? += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / (classes * c) as f64 })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moment estimates, one buffer per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .ids()
                .all(|id| self.m[id.index()].len() == store.value(id).len() && self.v[id.index()].len() == store.value(id).len())
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != store.len() || !state.matches(store) {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![store.len()],
            rhs: vec![grads.len()],
        });
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.value(id).shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: store.value(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = store.value_mut(id).data_mut();
        for (((wj, mj), vj), &gj) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *wj -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Accumulates a confusion matrix over every point of a labeled dataset.
/// Sampling inside each forward is seeded from `seed` and the cloud index.
pub fn evaluate(net: &SegmentationNetwork, dataset: &[PointCloud], seed: u64) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    let classes = net.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    for (i, cloud) in dataset.iter().enumerate() {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::data(format!("evaluation cloud {i} is unlabeled")))?;
        cloud.validate_labels(classes)?;
        let pred = net.predict(cloud, eval_seed(seed, i))?;
        cm.add_all(labels, &pred)?;
    }
    EvalReport::from_confusion(cm)
}

fn eval_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_oa: f64,
    pub val_oa: Option<f64>,
    pub val_miou: Option<f64>,
}

/// Per-epoch training history, serializable as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,lr,mean_loss,train_oa,val_oa,val_miou";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.mean_loss,
                r.train_oa,
                opt(r.val_oa),
                opt(r.val_miou)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::data("training log: missing or unexpected header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::data(format!("training log line {}: malformed row", n + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { f(s).map(Some) };
            records.push(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad())?,
                lr: f(cols[1])?,
                mean_loss: f(cols[2])?,
                train_oa: f(cols[3])?,
                val_oa: opt(cols[4])?,
                val_miou: opt(cols[5])?,
            });
        }
        Ok(TrainingLog { records })
    }
}

/// Stateful training driver: owns the optimizer state, the log and the
/// checkpoint policy.
pub struct Trainer {
    cfg: TrainConfig,
    adam: AdamState,
    log: TrainingLog,
    best_miou: Option<f64>,
    checkpoint_dir: Option<PathBuf>,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: &SegmentationNetwork) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: AdamState::new(net.params()),
            cfg,
            log: TrainingLog::default(),
            best_miou: None,
            checkpoint_dir: None,
            steps: 0,
        })
    }

    /// Continues from a checkpoint written by an earlier run. `log` must hold
    /// at least the epochs the checkpoint covers; extra rows are dropped.
    pub fn resume(
        cfg: TrainConfig,
        net: &mut SegmentationNetwork,
        checkpoint: &Checkpoint,
        mut log: TrainingLog,
    ) -> Result<Self> {
        cfg.validate()?;
        checkpoint.load_into(net)?;
        let adam = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state; it can only be used for inference".into()))?;
        if !adam.matches(net.params()) {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        let done = checkpoint.epochs_done as usize;
        if log.records.len() < done {
            return Err(Error::data(format!(
                "training log has {} rows, checkpoint covers {done} epochs",
                log.records.len()
            )));
        }
        log.records.truncate(done);
        Ok(Trainer {
            steps: adam.step,
            adam,
            cfg,
            log,
            best_miou: checkpoint.best_miou,
            checkpoint_dir: None,
        })
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn into_log(self) -> TrainingLog {
        self.log
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epochs_done(&self) -> usize {
        self.log.records.len()
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run_with<F>(
        &mut self,
        net: &mut SegmentationNetwork,
        train: &[PointCloud],
        val: Option<&[PointCloud]>,
        mut on_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&EpochRecord, &Trainer, &SegmentationNetwork) -> Result<()>,
    {
        while self.epochs_done() < self.cfg.epochs {
            let record = self.run_epoch(net, train, val)?;
            on_epoch(&record, self, net)?;
        }
        Ok(())
    }

    pub fn run(
        &mut self,
        net: &mut SegmentationNetwork,
        train: &[PointCloud],
        val: Option<&[PointCloud]>,
    ) -> Result<()> {
        self.run_with(net, train, val, |_, _, _| Ok(()))
    }

    /// One pass over the training set, one optimizer step per cloud.
    pub fn run_epoch(
        &mut self,
        net: &mut SegmentationNetwork,
        train: &[PointCloud],
        val: Option<&[PointCloud]>,
    ) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::data("training dataset is empty"));
        }
        let classes = net.config().num_classes;
        for (i, cloud) in train.iter().enumerate() {
            if cloud.labels().is_none() {
                return Err(Error::data(format!("training cloud {i} is unlabeled")));
            }
            cloud.validate_labels(classes)?;
        }
        let weights = if self.cfg.class_weighting {
            Some(inverse_frequency_weights(train, classes)?)
        } else {
            None
        };

        let epoch = self.epochs_done();
        let lr = lr_at(epoch, &self.cfg);
        let hyper = AdamHyper::from(&self.cfg);
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for &i in &order {
            let cloud = &train[i];
            let labels = cloud.labels().expect("checked above");
            let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, cloud, Mode::Train, &mut step_rng)?;
            let pred = argmax_rows(tape.value(out.logits));
            correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            let loss = cross_entropy(&mut tape, out.logits, labels, weights.as_deref())?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at epoch {}, cloud {i}",
                    epoch + 1
                )));
            }
            loss_sum += loss_value;
            let grads = tape.backward(loss)?.for_store(net.params());
            adam_step(net.params_mut(), &grads, &mut self.adam, lr, hyper)?;
            self.steps += 1;
        }

        let (val_oa, val_miou) = match val {
            Some(v) if !v.is_empty() => {
                let report = evaluate(net, v, self.cfg.seed)?;
                (Some(report.oa), Some(report.miou))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            mean_loss: loss_sum / train.len() as f64,
            train_oa: correct as f64 / seen as f64,
            val_oa,
            val_miou,
        };
        self.log.records.push(record.clone());
        self.write_checkpoints(net, &record)?;
        Ok(record)
    }

    fn write_checkpoints(&mut self, net: &SegmentationNetwork, record: &EpochRecord) -> Result<()> {
        let improved = match (record.val_miou, self.best_miou) {
            (Some(now), Some(best)) => now > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best_miou = record.val_miou;
        }
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let ck = Checkpoint::from_network(net, Some(self.adam.clone()), record.epoch as u64, self.best_miou);
        save_checkpoint(&ck, dir.join("last.pgck"))?;
        if self.cfg.checkpoint_every > 0 && record.epoch.is_multiple_of(self.cfg.checkpoint_every) {
            save_checkpoint(&ck, dir.join(format!("epoch_{:03}.pgck", record.epoch)))?;
        }
        if improved {
            save_checkpoint(&ck, dir.join("best.pgck"))?;
        }
        Ok(())
    }
}

/// Trains from scratch for `cfg.epochs` epochs and returns the log.
pub fn train(
    net: &mut SegmentationNetwork,
    train_set: &[PointCloud],
    val_set: Option<&[PointCloud]>,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    let mut trainer = Trainer::new(cfg.clone(), net)?;
    trainer.run(net, train_set, val_set)?;
    Ok(trainer.into_log())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.02);
        assert!((lr_at(1, &cfg) - 0.019).abs() < 1e-15);
        let direct = 0.02 * 0.95f64.powi(99);
        assert!((lr_at(99, &cfg) - direct).abs() < 1e-18);
        assert!((lr_at(99, &cfg) - 1.25e-4).abs() < 1e-6);
        assert!((0..99).all(|e| lr_at(e + 1, &cfg) < lr_at(e, &cfg)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.decay = 0.0;
        assert!(cfg.validate().is_err());
        cfg.decay = 1.0;
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let before = store.clone();
        let mut state = AdamState::new(&store);
        for _ in 0..5 {
            adam_step(&mut store, &[Tensor::zeros(&[3])], &mut state, 0.1, AdamHyper::default()).unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::vector(vec![0.0, 0.0]).unwrap());
        let mut state = AdamState::new(&store);
        let g = Tensor::vector(vec![0.3, -7.0]).unwrap();
        adam_step(&mut store, &[g], &mut state, 0.01, AdamHyper::default()).unwrap();
        let w = store.value(store.find("w").unwrap()).data();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2]));
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &[Tensor::zeros(&[3])], &mut state, 0.1, AdamHyper::default());
        assert!(err.is_err());
        assert!(adam_step(&mut store, &[], &mut state, 0.1, AdamHyper::default()).is_err());
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainingLog {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    lr: 0.02,
                    mean_loss: 0.7,
                    train_oa: 0.5,
                    val_oa: None,
                    val_miou: None,
                },
                EpochRecord {
                    epoch: 2,
                    lr: 0.019,
                    mean_loss: 0.1 + 0.2,
                    train_oa: 0.9,
                    val_oa: Some(0.8),
                    val_miou: Some(0.61),
                },
            ],
        };
        assert_eq!(TrainingLog::from_csv(&log.to_csv()).unwrap(), log);
        assert!(TrainingLog::from_csv("nope\n").is_err());
    }
}
