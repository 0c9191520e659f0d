//! Pieces shared by the pretraining and finetuning loops: schedule config,
//! the plateau learning-rate rule, epoch records and errors.

use thiserror::Error;

use crate::model::ModelError;
use crate::rng;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} dataset")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch} (first produced by {origin})")]
    NonFiniteLoss { epoch: usize, origin: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Epoch budget, optimizer step size and plateau rule of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub halving_factor: f64,
    pub min_lr: f64,
    /// Fixes the number of optimizer steps per epoch: large datasets are
    /// subsampled, small ones cycled through reshuffled passes. `None` means
    /// one full pass.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            initial_lr: 1e-3,
            batch_size: 4,
            plateau_patience: 20,
            plateau_min_delta: 1e-4,
            halving_factor: 0.5,
            min_lr: 1e-6,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.plateau_patience == 0 {
            return Err(TrainError::InvalidConfig("plateau_patience must be at least 1".into()));
        }
        if !(self.halving_factor > 0.0 && self.halving_factor < 1.0) {
            return Err(TrainError::InvalidConfig("halving_factor must lie in (0, 1)".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(TrainError::InvalidConfig("initial_lr must be positive".into()));
        }
        Ok(())
    }

    /// Sample indices visited in `epoch`, shuffled, grouped into batches.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let pass = |k: u64| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(self.seed, &[rng::key("epoch-order"), epoch as u64, k]));
            order
        };
        let Some(steps) = self.steps_per_epoch.filter(|_| n > 0) else {
            return pass(0).chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        };
        let want = steps * self.batch_size;
        let mut order = Vec::with_capacity(want + n);
        let mut k = 0;
        while order.len() < want {
            order.extend(pass(k));
            k += 1;
        }
        order.truncate(want);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Halves the learning rate once the monitored loss has failed to improve
/// by more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    min_delta: f64,
    factor: f64,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(config: &ScheduleConfig) -> Self {
        Self {
            lr: config.initial_lr,
            best: f64::INFINITY,
            stale: 0,
            patience: config.plateau_patience,
            min_delta: config.plateau_min_delta,
            factor: config.halving_factor,
            min_lr: config.min_lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's monitored loss and returns the learning rate for the
    /// next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when the run has no validation split.
    pub val_loss: f64,
    pub lr: f64,
}
