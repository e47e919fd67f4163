use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, Checkpoint, CheckpointError, Gradients, OptimState, RngState};
use crate::config::RunConfig;
use crate::dataset::BatchSource;
use crate::error::{Error, Result};
use crate::imaging::batch_tensor;
use crate::network::{build_model, loss_and_grads};
use crate::params::ModelParams;

pub const LOG_HEADER: &str = "iter,epoch,loss,lr,elapsed_s";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:?},{:?},{:.3}", self.iter, self.epoch, self.loss, self.lr, self.elapsed_s)
    }
}

/// Validation callback; returns mean PSNR in dB.
pub type Validator<'a> = dyn Fn(&ModelParams<f32>) -> Result<f64> + 'a;

pub struct Trainer {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations.
    pub step: u64,
    pub best_psnr: f64,
    pub log: Vec<LogRow>,
    rng: ChaCha8Rng,
    log_file: Option<File>,
    started: Instant,
}

fn ckpt_err(e: CheckpointError) -> Error {
    Error::Checkpoint(e)
}

impl Trainer {
    /// Fresh parameters and optimizer state from `config.train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let params = build_model::<f32>(&config.model, seed)?;
        let optim = OptimState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            params,
            optim,
            epoch: 0,
            step: 0,
            best_psnr: f64::NEG_INFINITY,
            log: Vec::new(),
            rng,
            log_file: None,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            params: ck.params,
            optim: ck.optim,
            epoch: ck.epoch,
            step: ck.step,
            best_psnr: ck.best_psnr,
            log: Vec::new(),
            rng: ck.rng.restore(),
            log_file: None,
            started: Instant::now(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            step: self.step,
            best_psnr: self.best_psnr,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Appends log rows to `path`, writing the CSV header if it is new.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        self.log_file = Some(f);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    /// One batch: forward, L1 loss, backward and an Adam update.
    pub fn step(&mut self, source: &mut dyn BatchSource) -> Result<f64> {
        let pairs = source.next_batch(&mut self.rng)?;
        let lr = batch_tensor::<f32>(&pairs.iter().map(|p| &p.lr).collect::<Vec<_>>())?;
        let hr = batch_tensor::<f32>(&pairs.iter().map(|p| &p.hr).collect::<Vec<_>>())?;
        let (loss, grads) = loss_and_grads(&self.params, &self.config.model, lr, hr)?;
        let iteration = self.step + 1;
        let grads: Gradients = grads.into_iter().collect();
        if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration, grad_norms: grad_norm_dump(&grads) });
        }
        adam_step(&mut self.params, grads, &mut self.optim, &self.config.train.adam())?;
        self.step = iteration;
        let row = LogRow {
            iter: iteration,
            epoch: self.epoch + 1,
            loss,
            lr: self.config.train.lr,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        if let Some(f) = self.log_file.as_mut() {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io("training log", e))?;
        }
        self.log.push(row);
        Ok(loss)
    }

    /// Runs epochs until `config.train.epochs` have completed.
    ///
    /// Every `eval_interval` epochs (and after the last one) the validator
    /// runs and, when a checkpoint directory is configured, `last.ckpt`
    /// and possibly `best.ckpt` are written.
    pub fn train(
        &mut self,
        source: &mut dyn BatchSource,
        iters_per_epoch: usize,
        validator: Option<&Validator>,
    ) -> Result<()> {
        let total = self.config.train.epochs;
        let interval = self.config.train.eval_interval;
        let dir = self.config.train.checkpoint_dir.clone();
        while self.epoch < total {
            for _ in 0..iters_per_epoch.max(1) {
                self.step(source)?;
            }
            self.epoch += 1;
            let due = (interval > 0 && self.epoch % interval == 0) || self.epoch == total;
            if !due {
                continue;
            }
            let loss = self.log.last().map_or(f64::NAN, |r| r.loss);
            let mut improved = false;
            if let Some(validate) = validator {
                let psnr = validate(&self.params)?;
                info!("epoch {} loss {loss:.6} val_psnr {psnr:.4}", self.epoch);
                if psnr > self.best_psnr {
                    self.best_psnr = psnr;
                    improved = true;
                }
            } else {
                info!("epoch {} loss {loss:.6}", self.epoch);
            }
            if let Some(dir) = &dir {
                let ck = self.checkpoint();
                ck.save(&last_checkpoint(dir)).map_err(ckpt_err)?;
                if improved {
                    ck.save(&best_checkpoint(dir)).map_err(ckpt_err)?;
                }
            }
        }
        Ok(())
    }
}

pub fn last_checkpoint(dir: &Path) -> PathBuf {
    dir.join("last.ckpt")
}

pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

fn grad_norm_dump(grads: &Gradients) -> String {
    let mut norms: Vec<(f64, &String)> = grads
        .iter()
        .map(|(n, g)| (g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt(), n))
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Less));
    norms.iter().map(|(v, n)| format!("{n}={v:.3e}")).collect::<Vec<_>>().join(", ")
}
