//! Training loop, log records, and resumable checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::lambda::{LambdaSchedule, LambdaSpacing};
use super::loss::rd_objective;
use crate::error::{QarvError, Result};
use crate::model::{Qarv, Weights};
use crate::nn::checkpoint::{Checkpoint, Entry};
use crate::nn::optim::{clip_global_norm, AdamState, EmaState};
use crate::nn::{ParamStore, Tape, Tensor};

const ADAM_M: &str = "/adam_m";
const ADAM_V: &str = "/adam_v";
const ITERATION: &str = "train/iteration";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Constant for 90% of iterations, then cosine decay to 2% of the base.
    #[default]
    ConstantCosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Fixed,
    #[default]
    Variable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub crop: usize,
    pub flip_prob: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// λ used when `loss_mode` is fixed.
    pub fixed_lambda: f64,
    pub lambda_schedule: LambdaSpacing,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 1000,
            lr: 2e-4,
            lr_schedule: LrSchedule::ConstantCosine,
            crop: 32,
            flip_prob: 0.5,
            grad_clip: 2.0,
            ema_decay: 0.9999,
            seed: 0,
            loss_mode: LossMode::Variable,
            fixed_lambda: 512.0,
            lambda_schedule: LambdaSpacing::CubeRoot,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::ConstantCosine => {
                let start = (self.iterations as f64 * 0.9).floor();
                let it = iteration as f64;
                if it < start {
                    return self.lr;
                }
                let span = (self.iterations as f64 - start).max(1.0);
                let progress = ((it - start) / span).min(1.0);
                self.lr * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    /// Ideal-coding bits per pixel, batch mean.
    pub rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    /// Batch-mean λ.
    pub lambda: f64,
    pub lr: f64,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "iteration,loss,rate_bpp,mse,psnr,lambda,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.loss, self.rate_bpp, self.mse, self.psnr, self.lambda, self.lr
        )
    }
}

pub struct Trainer {
    model: Qarv<f32>,
    adam: AdamState<f32>,
    ema: EmaState<f32>,
    config: TrainConfig,
    schedule: LambdaSchedule,
    iteration: u64,
}

impl Trainer {
    pub fn new(model: Qarv<f32>, config: TrainConfig) -> Result<Self> {
        let d = model.config().max_downsample;
        let bad = |m: String| Err(QarvError::InvalidArgument(m));
        if config.crop == 0 || !config.crop.is_multiple_of(d) {
            return bad(format!("crop {} is not a multiple of {d}", config.crop));
        }
        if config.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(config.lr > 0.0 && config.grad_clip > 0.0) {
            return bad("lr and grad_clip must be positive".into());
        }
        if !(config.ema_decay > 0.0 && config.ema_decay < 1.0) {
            return bad(format!("ema decay {} not in (0, 1)", config.ema_decay));
        }
        if !(0.0..=1.0).contains(&config.flip_prob) {
            return bad(format!(
                "flip probability {} not in [0, 1]",
                config.flip_prob
            ));
        }
        if config.loss_mode == LossMode::Fixed && !(config.fixed_lambda >= 0.0) {
            return bad(format!(
                "fixed lambda {} must be nonnegative",
                config.fixed_lambda
            ));
        }
        let mc = model.config();
        let schedule = LambdaSchedule::new(mc.lambda_low, mc.lambda_high, config.lambda_schedule)?;
        Ok(Trainer {
            adam: AdamState::new(&model.store, config.lr),
            ema: EmaState::new(&model.store, config.ema_decay),
            model,
            config,
            schedule,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Qarv<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Qarv<f32> {
        Qarv {
            net: self.model.net.clone(),
            store: self.ema.apply_to(&self.model.store),
        }
    }

    /// RNG for an iteration; batches depend only on (seed, iteration).
    fn rng_for(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration);
        rng
    }

    pub fn step(&mut self, data: &Dataset) -> Result<LogRecord> {
        let cfg = &self.config;
        let mut rng = self.rng_for(self.iteration);
        let x = data.batch::<f32>(&mut rng, cfg.batch_size, cfg.crop, cfg.flip_prob)?;
        let lambdas: Vec<f64> = match cfg.loss_mode {
            LossMode::Fixed => vec![cfg.fixed_lambda; cfg.batch_size],
            LossMode::Variable => (0..cfg.batch_size)
                .map(|_| self.schedule.sample(&mut rng))
                .collect(),
        };

        let (grads, record) = {
            let mut tape = Tape::new(&self.model.store);
            let xv = tape.constant(x);
            let out = self
                .model
                .net
                .forward_train(&mut tape, xv, &lambdas, &mut rng)?;
            let parts = rd_objective(&mut tape, &out.rates, out.x_hat(), xv, &lambdas)?;
            let n = cfg.batch_size as f64;
            let rate_nats: f64 = tape
                .value(parts.rate_nats)
                .data()
                .iter()
                .map(|&v| v as f64)
                .sum();
            let mse = tape
                .value(parts.mse)
                .data()
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / n;
            let record = LogRecord {
                iteration: self.iteration,
                loss: tape.value(parts.loss).item() as f64,
                rate_bpp: rate_nats / std::f64::consts::LN_2 / parts.pixels as f64 / n,
                mse,
                psnr: crate::metrics::psnr_from_mse(mse),
                lambda: lambdas.iter().sum::<f64>() / n,
                lr: cfg.lr_at(self.iteration),
            };
            (tape.backward(parts.loss)?, record)
        };
        grads.write_to(&mut self.model.store);
        clip_global_norm(&mut self.model.store, cfg.grad_clip);
        self.adam.lr = record.lr;
        self.adam.step(&mut self.model.store)?;
        self.ema.update(&self.model.store);
        self.iteration += 1;
        Ok(record)
    }

    /// Trains up to the configured iteration count. With `out_dir`, appends
    /// to `train_log.csv` and writes checkpoints there; a failed step leaves
    /// the previously written checkpoints untouched.
    pub fn run(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| QarvError::io(dir, e))?;
                let path = dir.join("train_log.csv");
                let fresh = self.iteration == 0;
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| QarvError::io(&path, e))?;
                if fresh {
                    writeln!(f, "{}", LogRecord::CSV_HEADER)
                        .map_err(|e| QarvError::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < self.config.iterations {
            let rec = self.step(data)?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", rec.csv_row()).map_err(|e| QarvError::io(&*path, e))?;
            }
            let done = self.iteration == self.config.iterations;
            if done || (self.config.log_every > 0 && self.iteration.is_multiple_of(self.config.log_every)) {
                on_log(&rec);
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration.is_multiple_of(every) {
                    self.checkpoint()
                        .save(&dir.join(format!("ckpt_{:08}.ckpt", self.iteration)))?;
                }
                if done {
                    self.checkpoint().save(&dir.join("final.ckpt"))?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }

    /// Parameters, EMA shadows, Adam moments, and the iteration count.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = Vec::new();
        for (p, (m, v)) in self
            .model
            .store
            .iter()
            .zip(self.adam.first_moment.iter().zip(&self.adam.second_moment))
        {
            extra.push(Entry::from_tensor(format!("{}{ADAM_M}", p.name), m));
            extra.push(Entry::from_tensor(format!("{}{ADAM_V}", p.name), v));
        }
        extra.push(Entry::from_tensor(
            ITERATION,
            &Tensor::<f64>::scalar(self.iteration as f64),
        ));
        let ema = self.ema.apply_to(&self.model.store);
        self.model.to_checkpoint(Some(&ema), extra)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Qarv::<f32>::from_checkpoint(ckpt, Weights::Raw)?;
        let ema_store: ParamStore<f32> = model.store_from(ckpt, Weights::Ema)?;
        let mut trainer = Trainer::new(model, config)?;
        let fetch = |name: String| {
            ckpt.get(&name)
                .map(|e| e.to_tensor::<f32>())
                .ok_or_else(|| QarvError::Checkpoint(format!("missing optimizer entry {name}")))
        };
        let names: Vec<String> = trainer.model.store.iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            trainer.adam.first_moment[i] = fetch(format!("{name}{ADAM_M}"))?;
            trainer.adam.second_moment[i] = fetch(format!("{name}{ADAM_V}"))?;
            trainer.ema.shadow[i] = ema_store.iter().nth(i).expect("same layout").value.clone();
        }
        let it = ckpt
            .get(ITERATION)
            .ok_or_else(|| QarvError::Checkpoint("missing iteration count".into()))?
            .values[0];
        trainer.iteration = it as u64;
        trainer.adam.step_count = it as u64;
        Ok(trainer)
    }
}
