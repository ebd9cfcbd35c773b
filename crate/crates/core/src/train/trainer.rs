use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::corpus::Dataset;
use super::metrics::{MetricsWriter, TrainRecord};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::{bind_params, window_loss, ModelConfig, ModelParams, ShareSet};
use crate::numcore::{Float, Graph};
use crate::schedule::SharingSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// `None` trains every layer in compute mode throughout.
    pub schedule: Option<SharingSchedule>,
    pub corpus: PathBuf,
    /// Token distance between consecutive window starts.
    pub stride: usize,
    pub val_frac: f64,
    /// Validate every this many steps and after the last one; `0` only at the end.
    pub eval_interval: usize,
    /// Cap on validation windows per evaluation.
    pub eval_windows: Option<usize>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many steps and after the last one; `0` only at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            steps: 1000,
            batch_size: 4,
            seq_len: 64,
            lr: o.lr,
            min_lr_frac: o.min_lr_frac,
            warmup: o.warmup,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            grad_clip: o.grad_clip,
            seed: 0,
            schedule: None,
            corpus: PathBuf::from("data/milton.txt"),
            stride: 64,
            val_frac: 0.05,
            eval_interval: 0,
            eval_windows: Some(64),
            metrics_path: None,
            checkpoint_dir: None,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            min_lr_frac: self.min_lr_frac,
            warmup: self.warmup,
            total_steps: self.steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("steps", self.steps)?;
        positive("batch_size", self.batch_size)?;
        positive("seq_len", self.seq_len)?;
        positive("stride", self.stride)?;
        if self.seq_len > model.max_seq {
            return Err(Error::config(format!("seq_len {} exceeds max_seq {}", self.seq_len, model.max_seq)));
        }
        if model.vocab_size < super::BYTE_VOCAB {
            return Err(Error::config(format!(
                "byte corpus needs vocab_size >= {}, model has {}",
                super::BYTE_VOCAB,
                model.vocab_size
            )));
        }
        for (name, v) in [("lr", self.lr), ("eps", self.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("min_lr_frac", self.min_lr_frac),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if let Some(s) = &self.schedule {
            s.validate(model)?;
        }
        Ok(())
    }

    pub fn share_set(&self, step: usize) -> ShareSet {
        self.schedule.as_ref().map_or_else(ShareSet::empty, |s| s.share_set(step))
    }
}

/// Mean next-token loss over packed windows of `window_len` tokens, in
/// chunks of `batch` windows. Records no gradients.
pub fn evaluate<T: Float>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    share: &ShareSet,
    windows: &[usize],
    window_len: usize,
    batch: usize,
) -> Result<f64> {
    if window_len < 2 || windows.is_empty() || windows.len() % window_len != 0 {
        return Err(Error::shape("evaluation needs whole windows of at least two tokens"));
    }
    let n = windows.len() / window_len;
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1) * window_len) {
        let rows = chunk.len() / window_len;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, params);
        let loss = window_loss(&mut g, &vars, model, share, chunk, rows)?;
        total += g.value(loss).data()[0].as_f64() * rows as f64;
    }
    Ok(total / n as f64)
}

pub struct Trainer<T> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<T>,
    pub optim: AdamW<T>,
    pub data: Dataset,
    /// Next step to run (number of completed steps).
    pub step: usize,
    metrics: Option<MetricsWriter>,
    elapsed_ms: f64,
}

impl<T: Float> Trainer<T> {
    /// Fresh run with weights initialized from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&model)?;
        let data = Dataset::load(&cfg.corpus, cfg.seq_len, cfg.stride, cfg.val_frac, cfg.seed)?;
        Self::with_data(model, cfg, data)
    }

    /// Fresh run over an already built dataset.
    pub fn with_data(model: ModelConfig, cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate(&model)?;
        if data.seq_len() != cfg.seq_len {
            return Err(Error::config("dataset window length differs from seq_len"));
        }
        let params = ModelParams::<T>::init(&model, cfg.seed);
        let optim = new_optim(&params);
        let metrics = cfg.metrics_path.as_deref().map(MetricsWriter::create).transpose()?;
        Ok(Self { model, cfg, params, optim, data, step: 0, metrics, elapsed_ms: 0.0 })
    }

    /// Continues the run stored in `ckpt`. The configuration must match the
    /// checkpointed one apart from output paths and the step budget.
    pub fn resume(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&ckpt.model)?;
        if let Some(stored) = &ckpt.train {
            let strip = |c: &TrainConfig| TrainConfig {
                metrics_path: None,
                checkpoint_dir: None,
                ..c.clone()
            };
            if strip(stored) != strip(&cfg) {
                return Err(Error::config("training config differs from the checkpointed run"));
            }
        }
        let optim = ckpt.optim.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let data = Dataset::load(&cfg.corpus, cfg.seq_len, cfg.stride, cfg.val_frac, cfg.seed)?;
        let metrics = cfg.metrics_path.as_deref().map(|p| MetricsWriter::resume(p, ckpt.step)).transpose()?;
        Ok(Self {
            model: ckpt.model,
            cfg,
            params: ckpt.params,
            optim,
            data,
            step: ckpt.step,
            metrics,
            elapsed_ms: 0.0,
        })
    }

    pub fn share_set(&self, step: usize) -> ShareSet {
        self.cfg.share_set(step)
    }

    /// One optimization step on the batch drawn for `self.step`.
    pub fn train_step(&mut self) -> Result<TrainRecord> {
        let step = self.step;
        let start = Instant::now();
        let share = self.share_set(step);
        let batch = self.data.batch(self.cfg.seed, step, self.cfg.batch_size);
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params);
        let loss_var = window_loss(&mut g, &vars, &self.model, &share, &batch, self.cfg.batch_size)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        let mut grads = g.backward(loss_var)?;
        let grads: Vec<Option<Vec<T>>> = vars.ordered().into_iter().map(|v| grads.take(v)).collect();
        drop(g);
        let lr = self.cfg.adamw().lr_at(step);
        let grad_norm = {
            let mut tensors = self.params.tensors_mut();
            self.optim
                .step(&self.cfg.adamw(), lr, &mut tensors, &grads)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
                    other => other,
                })?
        };
        let step_ms = start.elapsed().as_secs_f64() * 1e3;
        self.elapsed_ms += step_ms;
        self.step += 1;
        let tokens = (self.cfg.batch_size * self.cfg.seq_len) as f64;
        Ok(TrainRecord {
            step,
            wallclock_ms: self.elapsed_ms,
            step_ms,
            loss,
            tokens_per_sec: tokens / (step_ms / 1e3).max(1e-9),
            share_count: share.len(),
            lr,
            grad_norm,
            val_loss: None,
        })
    }

    /// Mean validation loss with the given sharing set.
    pub fn evaluate(&self, share: &ShareSet) -> Result<f64> {
        let windows = self.data.val_windows(self.cfg.eval_windows);
        evaluate(&self.params, &self.model, share, &windows, self.cfg.seq_len + 1, self.cfg.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            params: self.params.clone(),
            optim: Some(self.optim.clone()),
            step: self.step,
            schedule: self.cfg.schedule.clone(),
            train: Some(self.cfg.clone()),
        }
    }

    /// Runs steps until `until` (capped at `cfg.steps`), validating and
    /// checkpointing on their intervals. `on_record` sees every record.
    pub fn run_until(&mut self, until: usize, mut on_record: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let until = until.min(self.cfg.steps);
        let mut out = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            let mut rec = self.train_step()?;
            let done = self.step;
            let last = done == self.cfg.steps;
            let due = |interval: usize| last || (interval > 0 && done % interval == 0);
            if due(self.cfg.eval_interval) {
                // validate with the set the last step trained under
                rec.val_loss = Some(self.evaluate(&self.share_set(rec.step))?);
            }
            if let Some(w) = &mut self.metrics {
                w.write(&rec)?;
            }
            if let Some(dir) = &self.cfg.checkpoint_dir {
                if due(self.cfg.checkpoint_interval) {
                    let ckpt = self.checkpoint();
                    ckpt.save(&dir.join(format!("step-{done:06}.ckpt")))?;
                    ckpt.save(&dir.join("last"))?;
                }
            }
            on_record(&rec);
            out.push(rec);
        }
        Ok(out)
    }

    pub fn run(&mut self, on_record: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        self.run_until(self.cfg.steps, on_record)
    }
}

fn new_optim<T: Float>(params: &ModelParams<T>) -> AdamW<T> {
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    AdamW::new(&refs)
}
