use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{Objective, TrainConfig};
use super::optim::{clip_global_norm, lr_schedule, Adam};
use crate::episodes::{encode_episode, sample_episode, TaskSource};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::objective::{episode_rollout_loss, plain_episode_loss, Diagnostics};
use crate::rng::{self, domain};
use crate::srwm::{ModelConfig, Params};

pub const METRICS_HEADER: &str = "step,lr,loss,T1,T2,T3,acc_student,acc_teacher";

/// One optimizer step as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub diag: Diagnostics,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let d = &self.diag;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            d.loss,
            d.t1,
            opt(d.t2),
            opt(d.t3),
            d.acc_student,
            opt(d.acc_teacher)
        )
    }
}

/// Worker pool sized by `SRWM_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SRWM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("SRWM_THREADS must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n.max(1));
    }
    b.build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Where a run writes its outputs. Metrics are appended, so a resumed run
/// continues the same file.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: Params<T>,
    pub adam: Adam<T>,
    /// Completed steps.
    pub step: u64,
    input_dim: usize,
    patch_dim: usize,
    source: TaskSource,
    pool: rayon::ThreadPool,
    last_checkpoint: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, source: TaskSource, input_dim: usize, patch_dim: usize) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(input_dim, patch_dim);
        model.validate()?;
        let params = Params::init(&model, &mut rng::stream(config.seed, &[domain::INIT]))?;
        let adam = Adam::new(&params);
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            step: 0,
            input_dim,
            patch_dim,
            source,
            pool: thread_pool()?,
            last_checkpoint: None,
        })
    }

    /// Continues from `ck`; `config` may change the schedule length but not
    /// the architecture.
    pub fn resume(ck: Checkpoint<T>, config: Option<TrainConfig>, source: TaskSource) -> Result<Self> {
        let config = match config {
            Some(c) => {
                ck.config.check_same_architecture(&c)?;
                c.validate()?;
                c
            }
            None => ck.config.clone(),
        };
        let model = config.model_config(ck.input_dim, ck.patch_dim);
        if source.input_dim() != ck.input_dim {
            return Err(Error::CheckpointMismatch(format!(
                "input_dim: checkpoint has {}, data has {}",
                ck.input_dim,
                source.input_dim()
            )));
        }
        Ok(Trainer {
            config,
            model,
            params: ck.params,
            adam: ck.adam,
            step: ck.step,
            input_dim: ck.input_dim,
            patch_dim: ck.patch_dim,
            source,
            pool: thread_pool()?,
            last_checkpoint: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            input_dim: self.input_dim,
            patch_dim: self.patch_dim,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn episode_seed(&self, step: u64, index: usize) -> u64 {
        rng::derive_seed(self.config.seed, &[domain::TRAIN, step, index as u64])
    }

    fn episode_gradient(&self, step: u64, index: usize) -> Result<(Vec<Tensor<T>>, Diagnostics)> {
        let ep = sample_episode::<T>(&self.source, self.config.episode_spec(), self.episode_seed(step, index))?;
        let enc = encode_episode(&ep, self.config.delayed_labels);
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true);
        let (loss, diag) = match self.config.objective {
            Objective::Bootstrapped => episode_rollout_loss(&mut tape, &self.model, &p, &enc, self.config.weights())?,
            Objective::Plain => plain_episode_loss(&mut tape, &self.model, &p, &enc)?,
        };
        let grads = tape.backward(loss)?.ordered(&p.leaves().into_iter().copied().collect::<Vec<_>>())?;
        Ok((grads, diag))
    }

    /// Mean gradient and diagnostics over the batch for `step` (1-based),
    /// at the current parameters.
    pub fn batch_gradient(&self, step: u64) -> Result<(Vec<Tensor<T>>, Diagnostics)> {
        let results: Vec<Result<_>> = self.pool.install(|| {
            (0..self.config.batch_size)
                .into_par_iter()
                .map(|b| self.episode_gradient(step, b))
                .collect()
        });
        let mut total: Option<Vec<Tensor<T>>> = None;
        let mut diags = Vec::with_capacity(results.len());
        for r in results {
            let (g, d) = r?;
            diags.push(d);
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.add_assign(gi)?;
                    }
                }
            }
        }
        let mut total = total.expect("batch_size >= 1");
        let scale = T::c(1.0 / self.config.batch_size as f64);
        for g in &mut total {
            g.scale_in_place(scale);
        }
        Ok((total, Diagnostics::mean(&diags)))
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let nan = |last: &Option<PathBuf>| Error::NonFiniteLoss {
            step: step as usize,
            last_checkpoint: last.clone(),
        };
        let (mut grads, diag) = match self.batch_gradient(step) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(nan(&self.last_checkpoint)),
            Err(e) => return Err(e),
        };
        if !diag.loss.is_finite() {
            return Err(nan(&self.last_checkpoint));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = lr_schedule(step, self.config.peak_lr, self.config.warmup);
        self.adam.step(&mut self.params, &grads, lr)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            grad_norm,
            diag,
        })
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("step-{:07}.srwm", self.step));
        self.checkpoint().save(&path)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    /// Trains until `until` steps are complete, logging every step and
    /// checkpointing every `eval_interval` steps and at the end.
    pub fn run(&mut self, until: u64, out: &RunOutputs) -> Result<Vec<StepRecord>> {
        let mut metrics = match &out.metrics {
            Some(path) => {
                let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
                }
                Some((path.clone(), f))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.train_step()?;
            if let Some((path, f)) = &mut metrics {
                writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if rec.step % 100 == 0 || rec.step == 1 {
                info!(
                    "step {} lr {:.2e} loss {:.4} acc {:.3} |g| {:.3}",
                    rec.step, rec.lr, rec.diag.loss, rec.diag.acc_student, rec.grad_norm
                );
            }
            if let Some(dir) = &out.checkpoint_dir {
                if self.config.eval_interval > 0 && self.step % self.config.eval_interval == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = &out.checkpoint_dir {
            let last = dir.join(format!("step-{:07}.srwm", self.step));
            if self.last_checkpoint.as_deref() != Some(last.as_path()) {
                self.save_checkpoint(dir)?;
            }
        }
        Ok(records)
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }
}
