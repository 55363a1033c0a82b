//! AdamW, the cosine learning-rate schedule and per-stage training recipes.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::task::Task;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { beta1: betas.0, beta2: betas.1, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// still decay and keep their moment estimates moving toward zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j]);
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                p[j] -= lr * (mhat / (libm::sqrt(vhat) + self.eps) + self.weight_decay * p[j]);
            }
        }
    }

    /// Extends the moment buffers for parameters added after construction.
    pub fn sync_with(&mut self, store: &ParamStore) {
        for (id, p) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.index(), self.m.len());
            self.m.push(Tensor::zeros(p.value.shape()));
            self.v.push(Tensor::zeros(p.value.shape()));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate at optimizer step `step` of `total` (0-based).
///
/// Cosine: `floor + (peak − floor)·½(1 + cos(π·s/(total−1)))` after an
/// optional linear warmup, so the first step uses `peak` and the last `floor`.
pub fn learning_rate(schedule: Schedule, peak: f64, floor: f64, warmup: u64, step: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).saturating_sub(1);
            if span == 0 {
                return peak;
            }
            let s = (step - warmup).min(span) as f64 / span as f64;
            floor + (peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * s))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Pose-only pre-training.
    PosePretrain = 1,
    /// RGB-pose continued pre-training.
    RgbPretrain = 2,
    /// Task fine-tuning.
    Finetune = 3,
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::PosePretrain),
            2 => Ok(Stage::RgbPretrain),
            3 => Ok(Stage::Finetune),
            _ => Err(Error::InvalidConfig { key: "stage.stage", reason: format!("{v} is not 1, 2 or 3") }),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

/// Optimizer, schedule and batching for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    #[serde(default)]
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_steps: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub grad_accum: usize,
    #[serde(default)]
    pub task: Option<Task>,
    /// Clip the global gradient norm (off when absent).
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Training clips longer than this are cut to their central frames.
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u32,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_max_frames() -> usize {
    crate::curation::MAX_TRAIN_FRAMES
}

impl StageConfig {
    /// The published recipe for `stage`; `task` is only kept for stage 3.
    pub fn recipe(stage: Stage, task: Option<Task>) -> Self {
        let (epochs, batch_size, grad_accum) = match stage {
            Stage::PosePretrain => (20, 16, 8),
            Stage::RgbPretrain => (5, 4, 8),
            Stage::Finetune => (20, 8, 1),
        };
        Self {
            stage,
            lr: 3e-4,
            lr_floor: 0.0,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: default_eps(),
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            epochs,
            batch_size,
            grad_accum,
            task: if stage == Stage::Finetune { task } else { None },
            grad_clip: None,
            label_smoothing: 0.0,
            max_frames: default_max_frames(),
            checkpoint_every: 0,
        }
    }

    /// Sequences per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key, reason: &str| Err(Error::InvalidConfig { key, reason: reason.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("stage.lr", "must be positive");
        }
        if !(0.0..=self.lr).contains(&self.lr_floor) {
            return bad("stage.lr_floor", "must lie in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("stage.betas", "both betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("stage.weight_decay", "must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return bad("stage.epochs", "epochs, batch_size and grad_accum must be positive");
        }
        if self.stage == Stage::Finetune && self.task.is_none() {
            return bad("stage.task", "stage 3 needs a task");
        }
        if self.stage != Stage::Finetune && self.task.is_some() {
            return bad("stage.task", "only stage 3 takes a task");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("stage.label_smoothing", "must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("stage.grad_clip", "must be positive");
        }
        if self.max_frames == 0 {
            return bad("stage.max_frames", "must be positive");
        }
        Ok(())
    }

    /// Optimizer steps for a training set of `clips` clips.
    pub fn total_steps(&self, clips: usize) -> u64 {
        let per_epoch = clips.div_ceil(self.effective_batch()).max(1);
        per_epoch as u64 * u64::from(self.epochs)
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        learning_rate(self.schedule, self.lr, self.lr_floor, self.warmup_steps, step, total)
    }
}
