//! Training loop: Adam with gradient clipping, a plateau learning-rate
//! schedule and early stopping on the smoothed validation loss, resumable
//! checkpoints, and the per-epoch metrics log.

pub mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Phase;
use crate::autodiff::Tape;
use crate::data::container::write_atomic;
use crate::data::{epoch_order, TrialBatch, TrialDataset};
use crate::error::{Error, Result};
use crate::metrics::{loss_curve_svg, write_metrics_csv, MetricsRow};
use crate::model::{Lfads, LossComponents};
use crate::optim::{clip_grad_norm, Adam};
use crate::priors::Sampling;

pub use checkpoint::{config_hash, CheckpointRecord, SavedParam};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Epochs without smoothed-validation improvement before the LR decays.
    pub lr_patience: u64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub max_epochs: u64,
    pub early_stop_patience: u64,
    pub batch_size: usize,
    /// Weight on the previous value in the validation-loss smoother.
    pub smoothing: f64,
    /// Write `last.ckpt` every this many epochs (0 = only at the end).
    pub ckpt_every: u64,
    /// Append a metrics row every this many epochs.
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.005,
            lr_decay: 0.95,
            lr_patience: 6,
            lr_min: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 200.0,
            max_epochs: 150,
            early_stop_patience: 40,
            batch_size: 50,
            smoothing: 0.7,
            ckpt_every: 1,
            log_every: 1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail(format!("lr_decay {} outside (0, 1)", self.lr_decay));
        }
        if self.lr_patience < 1 || self.early_stop_patience < 1 {
            return fail("patience values must be at least 1".into());
        }
        if !(self.lr_init >= 0.0) || !(self.lr_min >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Trial-weighted sums of the loss components over the current epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochAccumulator {
    pub trials: f64,
    /// recon, kl_ic, kl_co, l2, total
    pub sums: [f64; 5],
}

impl EpochAccumulator {
    fn add(&mut self, c: &LossComponents, weight: f64) {
        let v = [c.recon, c.kl_ic, c.kl_co, c.l2, c.total];
        for (s, x) in self.sums.iter_mut().zip(v) {
            *s += x * weight;
        }
        self.trials += weight;
    }

    fn means(&self) -> [f64; 5] {
        self.sums.map(|s| s / self.trials)
    }
}

/// Everything that changes during training besides the model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Batches finished in the current epoch.
    pub cursor: u64,
    /// Trial order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
    pub lr: f64,
    pub smoothed: Option<f64>,
    pub best_smoothed: f64,
    pub best_epoch: u64,
    pub lr_bad_epochs: u64,
    pub stop_bad_epochs: u64,
    pub stopped: bool,
    pub acc: EpochAccumulator,
    pub history: Vec<MetricsRow>,
}

/// Validation losses with and without the current ramp weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValidLoss {
    pub ramped: LossComponents,
    pub full: LossComponents,
}

/// Exponential smoother `s = a * s_prev + (1 - a) * v`, seeded with the first value.
pub fn smooth(prev: Option<f64>, value: f64, a: f64) -> f64 {
    match prev {
        Some(p) => a * p + (1.0 - a) * value,
        None => value,
    }
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub model: Lfads,
    pub dataset: Arc<TrialDataset>,
    pub config_hash: String,
    pub state: TrainState,
    run_dir: Option<PathBuf>,
    timing: Vec<(u64, f64)>,
    epoch_started: Option<Instant>,
}

impl Trainer {
    pub fn new(model: Lfads, dataset: Arc<TrialDataset>, config: TrainerConfig, config_hash: String) -> Result<Self> {
        config.validate()?;
        if dataset.dims() != model.dims {
            return Err(Error::Config(format!(
                "model built for {:?}, dataset has {:?}",
                model.dims,
                dataset.dims()
            )));
        }
        let n = model.flat_trainable().len();
        let state = TrainState {
            epoch: 0,
            step: 0,
            cursor: 0,
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            adam: Adam::new(n, config.adam_beta1, config.adam_beta2, config.adam_eps),
            lr: config.lr_init,
            smoothed: None,
            best_smoothed: f64::INFINITY,
            best_epoch: 0,
            lr_bad_epochs: 0,
            stop_bad_epochs: 0,
            stopped: false,
            acc: EpochAccumulator::default(),
            history: Vec::new(),
        };
        Ok(Self {
            config,
            model,
            dataset,
            config_hash,
            state,
            run_dir: None,
            timing: Vec::new(),
            epoch_started: None,
        })
    }

    /// Directory for `metrics.csv`, `timing.csv`, `loss_curve.svg` and `ckpt/`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("ckpt")).map_err(|e| Error::io(&dir, e))?;
        self.run_dir = Some(dir);
        Ok(self)
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn history(&self) -> &[MetricsRow] {
        &self.state.history
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.max_epochs
    }

    fn n_train(&self) -> usize {
        self.dataset.train.n_trials()
    }

    fn n_batches(&self) -> u64 {
        self.n_train().div_ceil(self.config.batch_size) as u64
    }

    /// One optimizer step; finishes the epoch when its last batch is done.
    pub fn step(&mut self) -> Result<()> {
        if self.state.order.is_empty() {
            self.state.order = epoch_order(self.n_train(), true, &mut self.state.rng);
            self.state.cursor = 0;
            self.state.acc = EpochAccumulator::default();
            self.epoch_started = Some(Instant::now());
        }
        let bs = self.config.batch_size;
        let start = self.state.cursor as usize * bs;
        let end = (start + bs).min(self.state.order.len());
        let batch = TrialBatch::from_split(&self.dataset.train, &self.state.order[start..end]);
        let comps = self.train_batch(batch)?;
        self.state.acc.add(&comps, (end - start) as f64);
        self.state.cursor += 1;
        self.state.step += 1;
        if self.state.cursor == self.n_batches() {
            self.finish_epoch()?;
        }
        Ok(())
    }

    fn train_batch(&mut self, batch: TrialBatch) -> Result<LossComponents> {
        let rng = &mut self.state.rng;
        let mut aug = std::mem::take(&mut self.model.train_aug);
        let result = (|| {
            let batch = aug.apply_batch(batch, rng)?;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let out = self.model.forward(
                &mut tape,
                &bound,
                &batch,
                &mut Sampling::Stochastic(&mut *rng),
                Phase::Train,
            )?;
            let (loss, comps) = self
                .model
                .loss(&mut tape, &bound, &batch, &out, &aug, self.state.step)?;
            if !comps.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.state.step,
                    components: comps.describe(),
                });
            }
            tape.backward(loss)?;
            let grads = self.model.flat_grad(&tape, &bound);
            Ok((comps, grads))
        })();
        aug.clear();
        self.model.train_aug = aug;
        let (comps, mut grads) = result?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                components: format!("gradient element {i} is not finite; {}", comps.describe()),
            });
        }
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let mut theta = self.model.flat_trainable();
        self.state.adam.step(&mut theta, &grads, self.state.lr);
        self.model.set_flat_trainable(&theta)?;
        self.model.normalize_factor_rows();
        Ok(comps)
    }

    /// Validation loss over the whole valid split, stochastic and without
    /// training-only augmentation. The sampling stream depends only on the
    /// seed and the epoch.
    pub fn validate(&self) -> Result<ValidLoss> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.epoch + 1);
        let split = &self.dataset.valid;
        let order: Vec<usize> = (0..split.n_trials()).collect();
        let mut ramped = EpochAccumulator::default();
        let mut full = EpochAccumulator::default();
        let mut aug = self.model.infer_aug.clone();
        for idx in order.chunks(self.config.batch_size) {
            let batch = aug.apply_batch(TrialBatch::from_split(split, idx), &mut rng)?;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let out = self.model.forward(
                &mut tape,
                &bound,
                &batch,
                &mut Sampling::Stochastic(&mut rng),
                Phase::Infer,
            )?;
            let (_, r) = self
                .model
                .loss(&mut tape, &bound, &batch, &out, &aug, self.state.step)?;
            let (_, f) = self.model.loss(&mut tape, &bound, &batch, &out, &aug, u64::MAX)?;
            aug.clear();
            ramped.add(&r, idx.len() as f64);
            full.add(&f, idx.len() as f64);
        }
        let pack = |acc: &EpochAccumulator, c: &LossComponents| {
            let m = acc.means();
            LossComponents {
                recon: m[0],
                kl_ic: m[1],
                kl_co: m[2],
                l2: m[3],
                total: m[4],
                kl_ramp: c.kl_ramp,
                l2_ramp: c.l2_ramp,
            }
        };
        let kl = self.model.config.kl_ramp(self.state.step);
        let l2 = self.model.config.l2_ramp(self.state.step);
        let ramp = LossComponents {
            kl_ramp: kl,
            l2_ramp: l2,
            ..Default::default()
        };
        Ok(ValidLoss {
            ramped: pack(&ramped, &ramp),
            full: pack(
                &full,
                &LossComponents {
                    kl_ramp: 1.0,
                    l2_ramp: 1.0,
                    ..Default::default()
                },
            ),
        })
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let valid = self.validate()?;
        if !valid.full.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                components: format!("validation: {}", valid.full.describe()),
            });
        }
        let s = &mut self.state;
        let smoothed = smooth(s.smoothed, valid.full.total, self.config.smoothing);
        s.smoothed = Some(smoothed);
        let improved = smoothed < s.best_smoothed;
        let epoch = s.epoch;
        if epoch % self.config.log_every == 0 {
            let t = s.acc.means();
            s.history.push(MetricsRow {
                epoch,
                step: s.step,
                lr: s.lr,
                kl_ramp: valid.ramped.kl_ramp,
                l2_ramp: valid.ramped.l2_ramp,
                train_recon: t[0],
                train_kl_ic: t[1],
                train_kl_co: t[2],
                train_l2: t[3],
                train_total: t[4],
                valid_recon: valid.ramped.recon,
                valid_kl_ic: valid.ramped.kl_ic,
                valid_kl_co: valid.ramped.kl_co,
                valid_l2: valid.ramped.l2,
                valid_total: valid.ramped.total,
                valid_kl_ic_full: valid.full.kl_ic,
                valid_kl_co_full: valid.full.kl_co,
                valid_l2_full: valid.full.l2,
                valid_total_full: valid.full.total,
                valid_smoothed: smoothed,
            });
        }
        if improved {
            s.best_smoothed = smoothed;
            s.best_epoch = epoch;
            s.lr_bad_epochs = 0;
            s.stop_bad_epochs = 0;
        } else {
            s.lr_bad_epochs += 1;
            s.stop_bad_epochs += 1;
            if s.lr_bad_epochs >= self.config.lr_patience {
                s.lr = (s.lr * self.config.lr_decay).max(self.config.lr_min);
                s.lr_bad_epochs = 0;
            }
            if s.stop_bad_epochs >= self.config.early_stop_patience {
                s.stopped = true;
            }
        }
        s.epoch += 1;
        s.order.clear();
        s.cursor = 0;
        s.acc = EpochAccumulator::default();
        if let Some(t0) = self.epoch_started.take() {
            self.timing.push((epoch, t0.elapsed().as_secs_f64()));
        }
        log::info!(
            "epoch {epoch} step {} valid {:.4} smoothed {smoothed:.4} lr {:.3e}",
            self.state.step,
            valid.full.total,
            self.state.lr
        );
        if let Some(dir) = self.run_dir.clone() {
            write_metrics_csv(&dir.join("metrics.csv"), &self.state.history)?;
            self.write_timing(&dir)?;
            if improved {
                self.checkpoint().save(&dir.join("ckpt").join("best.ckpt"))?;
            }
            let every = self.config.ckpt_every;
            if (every > 0 && self.state.epoch % every == 0) || self.is_finished() {
                self.checkpoint().save(&dir.join("ckpt").join("last.ckpt"))?;
            }
        }
        Ok(())
    }

    fn write_timing(&self, dir: &Path) -> Result<()> {
        let mut s = String::from("epoch,seconds\n");
        for (e, t) in &self.timing {
            s.push_str(&format!("{e},{t}\n"));
        }
        write_atomic(&dir.join("timing.csv"), s.as_bytes())
    }

    /// Runs `n` optimizer steps (or fewer if training finishes).
    pub fn train_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Trains until `n` more epochs have completed or training finishes.
    pub fn run_epochs(&mut self, n: u64) -> Result<()> {
        let target = self.state.epoch + n;
        while self.state.epoch < target && !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Trains to completion and writes the loss curve.
    pub fn fit(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        if let Some(dir) = &self.run_dir {
            write_atomic(
                &dir.join("loss_curve.svg"),
                loss_curve_svg(&self.state.history).as_bytes(),
            )?;
            if !dir.join("ckpt").join("last.ckpt").exists() {
                self.checkpoint().save(&dir.join("ckpt").join("last.ckpt"))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> CheckpointRecord {
        CheckpointRecord {
            config_hash: self.config_hash.clone(),
            params: self
                .model
                .params()
                .into_iter()
                .map(|(name, p)| SavedParam {
                    name,
                    value: p.value.clone(),
                    trainable: p.trainable,
                })
                .collect(),
            state: self.state.clone(),
        }
    }

    pub fn load_params(&mut self, params: &[SavedParam]) -> Result<()> {
        load_params(&mut self.model, params)
    }

    /// Restores weights and full training state from a checkpoint record.
    pub fn restore(&mut self, rec: &CheckpointRecord) -> Result<()> {
        self.load_params(&rec.params)?;
        if rec.state.adam.m.len() != self.state.adam.m.len() {
            return Err(Error::Format("optimizer state sized for a different model".into()));
        }
        self.state = rec.state.clone();
        Ok(())
    }

    /// Resumes from a checkpoint written under the same resolved config.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let rec = CheckpointRecord::load_checked(path, &self.config_hash)?;
        self.restore(&rec)
    }
}

/// Copies saved tensors into `model` by name; every model tensor must be
/// present with the same shape.
pub fn load_params(model: &mut Lfads, params: &[SavedParam]) -> Result<()> {
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            params.len(),
            names.len()
        )));
    }
    for (slot, name) in model.params_mut().into_iter().zip(&names) {
        let saved = params
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| Error::MissingArray(name.clone()))?;
        if saved.value.shape() != slot.value.shape() {
            return Err(Error::shape("load_params", saved.value.shape(), slot.value.shape()));
        }
        slot.value = saved.value.clone();
    }
    Ok(())
}
