//! Denoiser training: noise clean features to a random step, regress the
//! clean features, update with AdamW. Keeps the epoch-1 and final checkpoints
//! that the likelihood-regret score compares.

mod adamw;
mod checkpoint;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian_vec, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, SetLabel, DEFAULT_DELTA};
use crate::lfdn::{GradientBuffer, LfdnConfig, LfdnParams};

pub use adamw::{adamw_update, AdamWState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    sha256_hex, split_checkpoint, Checkpoint, Manifest, TensorEntry, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// Rows per gradient work unit. Fixed so results do not depend on how many
/// threads process the units.
pub const GRAD_CHUNK_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// Independent `t ~ Uniform{1..=T}` for every sample.
    PerSample,
    /// One `t` per batch.
    SharedBatch,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub timesteps: TimestepSampling,
    pub normalization_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            timesteps: TimestepSampling::PerSample,
            normalization_delta: DEFAULT_DELTA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay must be finite and non-negative",
            ));
        }
        if self.normalization_delta.is_nan() || self.normalization_delta <= 0.0 {
            return Err(Error::config("normalization_delta must be positive"));
        }
        if let TimestepSampling::Fixed(t) = self.timesteps {
            if t == 0 || t > steps {
                return Err(Error::config(format!(
                    "fixed timestep {t} outside [1, {steps}]"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters, optimizer state and the run's single random stream.
pub struct Trainer {
    params: LfdnParams,
    opt: AdamWState,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(params: LfdnParams, schedule: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(schedule.steps())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0001);
        Ok(Self {
            opt: AdamWState::new(&params),
            params,
            schedule,
            cfg,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn params(&self) -> &LfdnParams {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamWState {
        &self.opt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn draw_timesteps(&mut self, n: usize) -> Vec<usize> {
        let steps = self.schedule.steps();
        match self.cfg.timesteps {
            TimestepSampling::PerSample => {
                (0..n).map(|_| self.rng.random_range(1..=steps)).collect()
            }
            TimestepSampling::SharedBatch => vec![self.rng.random_range(1..=steps); n],
            TimestepSampling::Fixed(t) => vec![t; n],
        }
    }

    /// Noises `batch`, backpropagates the squared-error loss and applies one
    /// AdamW update. Returns the loss before the update.
    pub fn training_step(&mut self, batch: &[&[f64]]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::structure("empty batch"));
        }
        let c = self.params.config().input_dim;
        let ts = self.draw_timesteps(batch.len());
        let mut z0 = Array2::zeros((batch.len(), c));
        let mut zt = Array2::zeros((batch.len(), c));
        for (r, (sample, &t)) in batch.iter().zip(&ts).enumerate() {
            if sample.len() != c {
                return Err(Error::structure(format!(
                    "sample width {} does not match model input_dim {c}",
                    sample.len()
                )));
            }
            let ab = self.schedule.alpha_bars()[t];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let eps = gaussian_vec(&mut self.rng, c);
            for j in 0..c {
                z0[[r, j]] = sample[j];
                zt[[r, j]] = a * sample[j] + b * eps[j];
            }
        }
        self.step_on_noised(zt.view(), &ts, z0.view())
    }

    /// One AdamW update on an already-noised batch. Returns the loss before
    /// the update.
    pub fn step_on_noised(
        &mut self,
        zt: ArrayView2<f64>,
        ts: &[usize],
        z0: ArrayView2<f64>,
    ) -> Result<f64> {
        let n = zt.nrows();
        if n == 0 || ts.len() != n || z0.dim() != zt.dim() {
            return Err(Error::structure("inconsistent batch shapes"));
        }
        let chunks: Vec<usize> = (0..n).step_by(GRAD_CHUNK_ROWS).collect();
        let params = &self.params;
        let parts: Vec<Result<(f64, GradientBuffer)>> = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + GRAD_CHUNK_ROWS).min(n);
                params.backward_sum(
                    zt.slice(ndarray::s![start..end, ..]),
                    &ts[start..end],
                    z0.slice(ndarray::s![start..end, ..]),
                )
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut grads = GradientBuffer::zeros(*params.config())?;
        for part in parts {
            let (l, g) = part.map_err(|e| self.diverged(e))?;
            loss_sum += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / n as f64);
        let loss = loss_sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
                loss,
            });
        }
        adamw_update(
            &mut self.params,
            &grads,
            &mut self.opt,
            self.cfg.learning_rate,
            self.cfg.weight_decay,
        )?;
        if !self.params.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
                loss: f64::NAN,
            });
        }
        self.step += 1;
        Ok(loss)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::Divergence { loss, .. } => Error::Divergence {
                epoch: self.epoch,
                step: self.step,
                loss,
            },
            other => other,
        }
    }

    /// One shuffled pass over `data`; returns the mean per-sample loss.
    pub fn run_epoch(&mut self, data: &[Vec<f64>]) -> Result<f64> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            total += self.training_step(&batch)? * batch.len() as f64;
        }
        Ok(total / data.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot after the first epoch.
    pub initial: Checkpoint,
    pub final_ckpt: Checkpoint,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a freshly initialized network on an ID or unlabeled feature set.
/// Gradient work fans out over the current rayon pool.
pub fn train(
    dataset: &FeatureSet,
    model: LfdnConfig,
    schedule: ScheduleParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.label() == SetLabel::Ood {
        return Err(Error::config("training data must not be labeled OOD"));
    }
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if model.input_dim != dataset.layout().total_dim() {
        return Err(Error::structure(format!(
            "model input_dim {} does not match feature width {}",
            model.input_dim,
            dataset.layout().total_dim()
        )));
    }
    let data = dataset.assemble_all(cfg.normalization_delta)?;
    let sched = schedule.build()?;
    let params = LfdnParams::init(model, cfg.seed)?;
    let mut trainer = Trainer::new(params, sched, cfg.clone())?;

    let snapshot = |params: &LfdnParams, epoch| Checkpoint {
        params: params.clone(),
        schedule,
        layout: dataset.layout().clone(),
        normalization_delta: cfg.normalization_delta,
        epoch,
        train_seed: cfg.seed,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = None;
    for epoch in 1..=cfg.epochs {
        let loss = trainer.run_epoch(&data)?;
        log::info!("epoch {epoch}/{}: loss {loss:.6}", cfg.epochs);
        history.push(loss);
        if epoch == 1 {
            initial = Some(snapshot(trainer.params(), 1));
        }
    }
    Ok(TrainOutcome {
        initial: initial.expect("at least one epoch"),
        final_ckpt: snapshot(trainer.params(), cfg.epochs),
        loss_history: history,
    })
}
