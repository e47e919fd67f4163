//! Optimization, the training loop, split evaluation and checkpoints.

mod adam;
mod checkpoint;
mod eval;
mod run;

use std::path::PathBuf;

pub use adam::{adam_step, AdamConfig, Gradients, OptimState};
pub use checkpoint::{Checkpoint, CheckpointError, RngState, FORMAT_VERSION, MAGIC};
pub use eval::{evaluate, evaluate_pairs, predict, super_resolve, EvalReport, ImageScore, Predictor, ReportRow};
pub use run::{best_checkpoint, last_checkpoint, LogRow, Trainer, Validator, LOG_HEADER};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: u64,
    /// Images per batch; 0 selects the per-scale default.
    pub batch: usize,
    pub seed: u64,
    /// Side of the square HR training crop.
    pub patch_hr: usize,
    /// Validate and checkpoint every this many epochs; 0 disables.
    pub eval_interval: u64,
    /// Iterations per epoch; 0 means one pass over the training split.
    pub iters_per_epoch: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            epochs: 1500,
            batch: 0,
            seed: 0,
            patch_hr: 48,
            eval_interval: 10,
            iters_per_epoch: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Default batch sizes: 10 at ×2, 8 at ×3 and 6 at ×4.
    pub fn batch_for(&self, scale: usize) -> usize {
        if self.batch > 0 {
            return self.batch;
        }
        match scale {
            2 => 10,
            3 => 8,
            _ => 6,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.lr > 0.0) {
            errors.push(format!("train.lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                errors.push(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            errors.push(format!("train.eps must be > 0, got {}", self.eps));
        }
        if self.patch_hr == 0 {
            errors.push("train.patch_hr must be >= 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}
