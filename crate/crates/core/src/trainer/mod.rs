//! Per-fold training: batch-balanced BCE, AdamW and a validation-AUC plateau
//! schedule, with best-validation checkpoint selection.

mod checkpoint;
mod loss;
mod optim;
mod schedule;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, sidecar_path, Checkpoint, CheckpointInfo, CheckpointMeta};
pub use loss::{balanced_bce, balanced_bce_grad, balanced_bce_logit_grad, mean_bce, LossError, PROB_CLAMP};
pub use optim::AdamW;
pub use schedule::plateau_step;

use crate::eval_report::{auc_from_scores, EvalError};
use crate::ingest::Label;
use crate::model_zoo::{open_unit, sigmoid, BackboneSpec, Mode, Model, ModelError, HEAD_DROPOUT};
use crate::preprocess::{to_model_input_sized, GrayscaleImage, ModelInput, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("validation: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub fn is_validation(&self) -> bool {
        match self {
            TrainError::InvalidConfig(_) | TrainError::EmptyPartition(_) | TrainError::Eval(_) | TrainError::Resume(_) => true,
            TrainError::Model(e) => matches!(
                e,
                ModelError::MetadataMismatch(_) | ModelError::InvalidSpec(_) | ModelError::UnknownBackbone(_) | ModelError::WeightsUnavailable { .. }
            ),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Required margin over the best AUC for an epoch to count as improving.
    pub min_delta: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Set per fold by the caller; not part of the serialised config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr_initial: 1e-4,
            lr_floor: 1e-6,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_delta: 0.0,
            dropout: HEAD_DROPOUT,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.plateau_patience == 0 {
            return bad("epochs, batch_size and plateau_patience must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return bad(format!("need 0 < lr_floor ({}) <= lr_initial ({})", self.lr_floor, self.lr_initial));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.min_delta >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("min_delta and weight_decay must be >= 0, eps > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_auc,lr";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_auc, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub current_lr: f64,
    /// Best AUC as seen by the scheduler.
    pub best_val_auc: Option<f64>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights are kept as the best checkpoint.
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            current_lr: config.lr_initial,
            best_val_auc: None,
            epochs_since_improvement: 0,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn best_checkpoint_auc(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e - 1].val_auc)
    }

    pub fn log_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.history {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

/// A labelled, already standardised training image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: GrayscaleImage,
    pub label: Label,
}

const SCORE_CHUNK: usize = 64;
const DROPOUT_SALT: u64 = 0x5DEE_CE66_D1CE_5EED;

/// Evaluation-mode probabilities for every sample, in order.
pub fn score_samples(model: &Model, samples: &[Sample]) -> Result<Vec<f64>, TrainError> {
    let size = model.input_size();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_CHUNK) {
        let inputs: Vec<ModelInput> = chunk
            .iter()
            .map(|s| to_model_input_sized(&s.image, size))
            .collect::<Result<_, _>>()?;
        out.extend(model.predict(&inputs)?);
    }
    Ok(out)
}

fn labels_of(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label.target()).collect()
}

/// Training loop for one fold. Each epoch's shuffle and dropout streams are
/// derived from `(seed, epoch)`, so a resumed run replays exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    best: Model,
    optimizer: AdamW,
    state: TrainState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation AUC.
    pub best: Model,
    pub last: Model,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        model.head_mut().set_dropout_rate(config.dropout);
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Ok(Trainer {
            optimizer: AdamW::new(&config, &shapes),
            state: TrainState::new(&config),
            best: model.clone(),
            model,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn best_model(&self) -> &Model {
        &self.best
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyPartition("train"));
        }
        if val.is_empty() {
            return Err(TrainError::EmptyPartition("val"));
        }
        let epoch = self.state.epoch + 1;
        let lr = self.state.current_lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        self.model.reseed_dropout(self.config.seed ^ DROPOUT_SALT, epoch as u64);
        self.model.set_mode(Mode::Train);

        let size = self.model.input_size();
        let trainable = self.model.trainable_tensors();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut grads = self.model.zero_grads();
            let mut logits = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let input = to_model_input_sized(&train[i].image, size)?;
                let (z, cache) = self.model.forward_sample(&input)?;
                logits.push(z);
                caches.push(cache);
            }
            let labels: Vec<u8> = chunk.iter().map(|&i| train[i].label.target()).collect();
            let probs: Vec<f64> = logits.iter().map(|&z| open_unit(sigmoid(z))).collect();
            let loss = balanced_bce(&probs, &labels)?;
            if !loss.is_finite() || logits.iter().any(|z| !z.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let dz = balanced_bce_logit_grad(&probs, &labels)?;
            for (cache, d) in caches.iter().zip(dz) {
                self.model.backward_sample(cache, d, &mut grads);
            }
            self.optimizer.step(self.model.params_mut(), &grads, trainable.clone(), lr);
            loss_sum += loss;
            n_batches += 1;
        }
        self.model.set_mode(Mode::Eval);

        let scores = score_samples(&self.model, val)?;
        let val_auc = auc_from_scores(&scores, &labels_of(val))?;
        let prev_best = self.state.best_checkpoint_auc();
        self.state = plateau_step(&self.state, val_auc, &self.config);
        self.state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_auc,
            lr,
        };
        self.state.history.push(record);
        if prev_best.is_none_or(|b| val_auc >= b) {
            self.best = self.model.clone();
            self.state.best_epoch = Some(epoch);
        }
        Ok(record)
    }

    /// Trains until `config.epochs` epochs have completed, calling
    /// `on_epoch` after each one.
    pub fn run(&mut self, train: &[Sample], val: &[Sample], mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.is_finished() {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    /// Writes `last` (with optimiser state, for resuming) and `best`.
    pub fn save(&self, last: &Path, best: &Path, config_hash: Option<&str>) -> Result<(), TrainError> {
        save_checkpoint(
            &self.model,
            &self.state,
            last,
            CheckpointInfo {
                seed: self.config.seed,
                epoch: self.state.epoch,
                val_auc: self.state.history.last().map(|r| r.val_auc),
                config_hash,
                optimizer: Some(self.optimizer.state_tensors()),
            },
        )?;
        save_checkpoint(
            &self.best,
            &self.state,
            best,
            CheckpointInfo {
                seed: self.config.seed,
                epoch: self.state.best_epoch.unwrap_or(0),
                val_auc: self.state.best_checkpoint_auc(),
                config_hash,
                optimizer: None,
            },
        )?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(last: &Path, best: &Path, spec: &BackboneSpec, config: TrainConfig) -> Result<Self, TrainError> {
        let last_ckpt = load_checkpoint(last, spec)?;
        let best_ckpt = load_checkpoint(best, spec)?;
        if last_ckpt.meta.seed != config.seed {
            return Err(TrainError::Resume(format!(
                "checkpoint seed {} differs from config seed {}",
                last_ckpt.meta.seed, config.seed
            )));
        }
        if best_ckpt.meta.state != last_ckpt.meta.state {
            return Err(TrainError::Resume("best and last checkpoints come from different runs".into()));
        }
        let mut trainer = Trainer::new(last_ckpt.model, config)?;
        let opt = last_ckpt
            .optimizer
            .ok_or_else(|| TrainError::Resume(format!("{} has no optimiser state", last.display())))?;
        trainer.optimizer.restore(opt).map_err(TrainError::Resume)?;
        trainer.best = best_ckpt.model;
        trainer.best.head_mut().set_dropout_rate(trainer.config.dropout);
        trainer.state = last_ckpt.meta.state;
        Ok(trainer)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            best: self.best,
            last: self.model,
            state: self.state,
        }
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train_fold(model: Model, train: &[Sample], val: &[Sample], config: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(model, config)?;
    t.run(train, val, |_, _| Ok(()))?;
    Ok(t.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_model, BackboneName, BuildOptions, ClassifierHead};
    use ndarray::Array2;
    use rand::Rng;

    fn samples(n: usize, size: usize, sep: f32, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
                let base = if label == Label::Positive { 128.0 + sep } else { 128.0 - sep };
                let px = Array2::from_shape_fn((size, size), |_| (base + rng.random_range(-40.0..40.0f32)).clamp(0.0, 255.0));
                Sample {
                    image_id: format!("s{i}"),
                    image: GrayscaleImage::new(px).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn model(seed: u64) -> Model {
        build_model(
            &BackboneSpec::desk(BackboneName::Densenet121),
            &BuildOptions { input_size: 32, seed, ..BuildOptions::default() },
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, lr_initial: 3e-3, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_floor: 1e-3, ..TrainConfig::default() },
            TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { plateau_patience: 0, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let head = ClassifierHead::new(d, &mut rng);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| (0..d).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let labels = [1u8, 0, 1, 1, 0, 0];
        let loss = |h: &ClassifierHead| {
            let p: Vec<f64> = feats.iter().map(|f| open_unit(sigmoid(h.logit(f)))).collect();
            balanced_bce(&p, &labels).unwrap()
        };
        let mut grads: Vec<Vec<f64>> = head.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let (logits, caches): (Vec<f64>, Vec<_>) = feats.iter().map(|f| head.forward(f, None)).unzip();
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let dz = balanced_bce_logit_grad(&probs, &labels).unwrap();
        for (c, g) in caches.iter().zip(dz) {
            head.backward(c, g, &mut grads);
        }
        let h = 1e-6;
        for t in 0..grads.len() {
            for i in 0..grads[t].len() {
                let mut up = head.clone();
                up.params_mut()[t][i] += h;
                let mut dn = head.clone();
                dn.params_mut()[t][i] -= h;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                let an = grads[t][i];
                if fd.abs().max(an.abs()) < 1e-9 {
                    continue;
                }
                assert!((fd - an).abs() / fd.abs().max(an.abs()) < 1e-4, "tensor {t}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let train = samples(64, 32, 30.0, 1);
        let val = samples(32, 32, 30.0, 2);
        let out = train_fold(model(3), &train, &val, quick(15)).unwrap();
        assert_eq!(out.state.history.len(), 15);
        let best = out.state.history.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
        assert!(best > 0.9, "best val auc {best}");
        let auc = auc_from_scores(&score_samples(&out.best, &val).unwrap(), &labels_of(&val)).unwrap();
        assert_eq!(auc, best);
        assert_eq!(out.state.best_checkpoint_auc(), Some(best));
    }

    #[test]
    fn empty_partitions_rejected() {
        let s = samples(4, 32, 10.0, 0);
        let mut t = Trainer::new(model(0), quick(1)).unwrap();
        assert!(matches!(t.run_epoch(&[], &s), Err(TrainError::EmptyPartition("train"))));
        assert!(matches!(t.run_epoch(&s, &[]), Err(TrainError::EmptyPartition("val"))));
    }

    #[test]
    fn deterministic_and_resumable() {
        let train = samples(24, 32, 20.0, 4);
        let val = samples(12, 32, 20.0, 5);
        let full = train_fold(model(9), &train, &val, quick(8)).unwrap();
        let again = train_fold(model(9), &train, &val, quick(8)).unwrap();
        assert_eq!(full.state.history, again.state.history);

        let dir = tempfile::tempdir().unwrap();
        let (last, best) = (dir.path().join("last.ckpt"), dir.path().join("best.ckpt"));
        let mut t = Trainer::new(model(9), quick(4)).unwrap();
        t.run(&train, &val, |_, _| Ok(())).unwrap();
        t.save(&last, &best, Some("abc")).unwrap();
        let spec = BackboneSpec::desk(BackboneName::Densenet121);
        let mut resumed = Trainer::resume(&last, &best, &spec, quick(8)).unwrap();
        resumed.run(&train, &val, |_, _| Ok(())).unwrap();
        let out = resumed.into_outcome();
        assert_eq!(out.state.history, full.state.history);
        assert_eq!(out.last.params(), full.last.params());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(2);
        let state = TrainState::new(&TrainConfig::default());
        save_checkpoint(&m, &state, &path, CheckpointInfo { seed: 2, ..CheckpointInfo::default() }).unwrap();
        let spec = BackboneSpec::desk(BackboneName::Densenet121);
        let ck = load_checkpoint(&path, &spec).unwrap();
        let batch = samples(3, 32, 0.0, 8);
        assert_eq!(score_samples(&ck.model, &batch).unwrap(), score_samples(&m, &batch).unwrap());
        assert_eq!(ck.meta.state, state);
        let wrong = BackboneSpec::desk(BackboneName::Resnet50);
        assert!(matches!(
            load_checkpoint(&path, &wrong),
            Err(TrainError::Model(ModelError::MetadataMismatch(_)))
        ));
    }
}
