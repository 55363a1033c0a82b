//! Stage orchestration: batching, accumulation, schedule, checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unisign_core::autograd::Graph;
use unisign_core::lm::{smoothed_mean, DecodeConfig};
use unisign_core::model::{ClipInput, ModelConfig, UniSign};
use unisign_core::optim::{AdamW, Stage, StageConfig};
use unisign_core::params::{Gradients, ParamStore};
use unisign_core::tokenizer::Tokenizer;
use unisign_core::vision::FrameSource;
use unisign_core::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::{PreparedClip, TrainClip};
use crate::error::{Result, RunError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct StepLog {
    /// 0-based index of the optimizer step just taken.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean over the step's clips of the per-token loss.
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct Session {
    pub stage: StageConfig,
    pub seed: u64,
    pub config_hash: String,
    pub store: ParamStore,
    pub model: UniSign,
    pub optimizer: AdamW,
    pub tokenizer: Tokenizer,
    /// Completed optimizer steps.
    pub step: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub history: Vec<StepLog>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clip order for one epoch; a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch.wrapping_add(1))));
    order.shuffle(&mut rng);
    order
}

fn new_optimizer(store: &ParamStore, s: &StageConfig) -> AdamW {
    AdamW::new(store, s.betas, s.eps, s.weight_decay)
}

impl Session {
    /// A stage-1 run from random initialization.
    pub fn fresh(stage: StageConfig, model_cfg: &ModelConfig, tokenizer: Tokenizer, seed: u64, config_hash: String, clips: usize) -> Result<Self> {
        stage.validate()?;
        if stage.stage != Stage::PosePretrain {
            return Err(Error::MissingPrereqCheckpoint { stage: stage.stage as u8 }.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = UniSign::new(&mut store, model_cfg, tokenizer.vocab_size(), &mut rng)?;
        let optimizer = new_optimizer(&store, &stage);
        Ok(Self::assemble(stage, seed, config_hash, store, model, optimizer, tokenizer, 0, clips))
    }

    /// Starts `stage` from the checkpoint of an earlier stage.
    ///
    /// Stage 2 needs a stage-1 checkpoint and adds the RGB branch; stage 3
    /// accepts stage 1 (pose-only) or stage 2. The optimizer starts fresh.
    pub fn from_checkpoint(ck: Checkpoint, stage: StageConfig, seed: u64, config_hash: String, clips: usize) -> Result<Self> {
        stage.validate()?;
        let ok = match stage.stage {
            Stage::PosePretrain => false,
            Stage::RgbPretrain => ck.meta.stage == Stage::PosePretrain,
            Stage::Finetune => ck.meta.stage < Stage::Finetune,
        };
        if !ok {
            return Err(Error::MissingPrereqCheckpoint { stage: stage.stage as u8 }.into());
        }
        let Checkpoint { mut store, mut model, tokenizer, .. } = ck;
        if stage.stage == Stage::RgbPretrain {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 2));
            model.add_rgb_branch(&mut store, &mut rng)?;
        }
        let optimizer = new_optimizer(&store, &stage);
        Ok(Self::assemble(stage, seed, config_hash, store, model, optimizer, tokenizer, 0, clips))
    }

    /// Continues an interrupted run of the same stage and task.
    pub fn resume(ck: Checkpoint, stage: StageConfig, config_hash: String, clips: usize) -> Result<Self> {
        stage.validate()?;
        if ck.meta.stage != stage.stage || ck.meta.task != stage.task {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint is stage {} {:?}, run is stage {} {:?}",
                ck.meta.stage as u8, ck.meta.task, stage.stage as u8, stage.task
            ))
            .into());
        }
        if ck.meta.config_hash != config_hash {
            log::warn!("resuming a checkpoint written under config {}", ck.meta.config_hash);
        }
        let expected = stage.total_steps(clips);
        if ck.meta.total_steps != expected {
            return Err(Error::ConfigMismatch(format!("checkpoint plans {} steps, this run {expected}", ck.meta.total_steps)).into());
        }
        let Some(optimizer) = ck.optimizer else {
            return Err(RunError::Config("checkpoint has no optimizer state to resume from".into()));
        };
        let seed = ck.meta.seed;
        let step = ck.meta.step;
        Ok(Self::assemble(stage, seed, config_hash, ck.store, ck.model, optimizer, ck.tokenizer, step, clips))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        stage: StageConfig,
        seed: u64,
        config_hash: String,
        store: ParamStore,
        model: UniSign,
        optimizer: AdamW,
        tokenizer: Tokenizer,
        step: u64,
        clips: usize,
    ) -> Self {
        let total_steps = stage.total_steps(clips);
        let steps_per_epoch = clips.div_ceil(stage.effective_batch()).max(1) as u64;
        Self { stage, seed, config_hash, store, model, optimizer, tokenizer, step, total_steps, steps_per_epoch, history: Vec::new() }
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn sampler_seed(&self) -> u64 {
        self.seed ^ self.model.cfg.sampler.seed
    }

    fn clip_input<'a>(&self, clip: &'a PreparedClip, epoch: u64) -> Result<ClipInput<'a>> {
        clip_input(&self.model, clip, self.sampler_seed(), epoch)
    }

    /// Per-token loss and parameter gradients of one clip.
    fn clip_gradient(&self, clip: &TrainClip, epoch: u64) -> Result<(f64, usize, Gradients)> {
        let input = self.clip_input(&clip.clip, epoch)?;
        let mut g = Graph::new(&self.store);
        let (loss, _) = self.model.loss(&mut g, &input, &clip.target)?;
        let objective = smoothed_mean(&mut g, &loss, self.stage.label_smoothing);
        let value = g.value(loss.mean).data()[0];
        if !value.is_finite() || !g.value(objective).data()[0].is_finite() {
            return Err(Error::DivergedLoss { step: self.step, clip_id: clip.clip.id().to_string() }.into());
        }
        let mut grads = Gradients::new(self.store.len());
        g.backward(objective).accumulate_into(&mut grads);
        Ok((value, loss.tokens, grads))
    }

    /// One optimizer step over the next effective batch.
    pub fn train_step(&mut self, data: &[TrainClip]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus.into());
        }
        let eb = self.stage.effective_batch();
        let epoch = self.epoch();
        let pos = (self.step % self.steps_per_epoch) as usize;
        let order = epoch_order(data.len(), self.seed, epoch);
        let batch = &order[(pos * eb).min(data.len())..((pos + 1) * eb).min(data.len())];

        let mut grads = Gradients::new(self.store.len());
        let (mut loss_sum, mut tokens) = (0.0, 0);
        for micro in batch.chunks(self.stage.batch_size) {
            let results: Vec<Result<(f64, usize, Gradients)>> = micro.par_iter().map(|&i| self.clip_gradient(&data[i], epoch)).collect();
            for r in results {
                let (l, t, g) = r?;
                loss_sum += l;
                tokens += t;
                grads.merge(&g);
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let mut grad_norm = grads.global_norm();
        if !grads.is_finite() {
            return Err(Error::DivergedLoss { step: self.step, clip_id: format!("batch of {}", data[batch[0]].clip.id()) }.into());
        }
        if let Some(c) = self.stage.grad_clip {
            if grad_norm > c {
                grads.scale(c / grad_norm);
                grad_norm = c;
            }
        }
        let lr = self.stage.lr_at(self.step, self.total_steps);
        self.optimizer.update(&mut self.store, &grads, lr);
        let log = StepLog { step: self.step, epoch, lr, loss: loss_sum / n, tokens, grad_norm };
        self.step += 1;
        self.history.push(log);
        Ok(log)
    }

    /// Trains until the planned step count or until `hook` asks to stop.
    ///
    /// With `checkpoint_dir`, a checkpoint is written every
    /// `checkpoint_every` epochs and at the end.
    pub fn run(&mut self, data: &[TrainClip], checkpoint_dir: Option<&Path>, mut hook: impl FnMut(&Session, &StepLog) -> Control) -> Result<Option<PathBuf>> {
        let mut epoch_loss = (0.0, 0usize);
        let mut last = None;
        while !self.is_done() {
            let log = self.train_step(data)?;
            epoch_loss = (epoch_loss.0 + log.loss, epoch_loss.1 + 1);
            let control = hook(self, &log);
            let epoch_done = self.step % self.steps_per_epoch == 0;
            if epoch_done {
                log::info!(
                    "stage {} epoch {} step {}/{} loss {:.5} lr {:.3e}",
                    self.stage.stage as u8,
                    self.epoch(),
                    self.step,
                    self.total_steps,
                    epoch_loss.0 / epoch_loss.1 as f64,
                    log.lr
                );
                epoch_loss = (0.0, 0);
                let every = u64::from(self.stage.checkpoint_every);
                if let (Some(dir), true) = (checkpoint_dir, every > 0 && self.epoch() % every == 0 && !self.is_done()) {
                    let p = dir.join(format!("epoch{:03}.safetensors", self.epoch()));
                    self.save(&p)?;
                    last = Some(p);
                }
            }
            if control == Control::Stop {
                break;
            }
        }
        if let Some(dir) = checkpoint_dir {
            let p = dir.join("final.safetensors");
            self.save(&p)?;
            last = Some(p);
        }
        Ok(last)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            stage: self.stage.stage,
            task: self.stage.task,
            epoch: self.epoch(),
            step: self.step,
            total_steps: self.total_steps,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            model: self.model.cfg.clone(),
            has_rgb: self.model.rgb.is_some(),
            vocab: self.tokenizer.to_vocab_string(),
            adam: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.store, Some(&self.optimizer))?;
        log::info!("checkpoint {}", path.display());
        Ok(())
    }

    /// Mean over clips of the per-token loss, without gradients.
    pub fn eval_loss(&self, data: &[TrainClip]) -> Result<f64> {
        eval_loss(&self.model, &self.store, data, self.sampler_seed())
    }

    pub fn generate(&self, clip: &PreparedClip, cfg: &DecodeConfig) -> Result<Vec<usize>> {
        let input = self.clip_input(clip, 0)?;
        Ok(self.model.generate(&self.store, &input, cfg)?)
    }
}

/// Model input for one clip; RGB frames are sampled only when the clip has video.
pub fn clip_input<'a>(model: &UniSign, clip: &'a PreparedClip, sampler_seed: u64, epoch: u64) -> Result<ClipInput<'a>> {
    let frames = clip.frames.as_deref().map(|f| f as &dyn FrameSource);
    let sampled = if frames.is_some() { model.sample_frames(&clip.grouped, sampler_seed, epoch)? } else { [Vec::new(), Vec::new()] };
    Ok(ClipInput { grouped: &clip.grouped, frames, sampled })
}

/// Evaluation-time loss of `model`. Frame sampling uses epoch 0.
pub fn eval_loss(model: &UniSign, store: &ParamStore, data: &[TrainClip], sampler_seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|c| {
            let input = clip_input(model, &c.clip, sampler_seed, 0)?;
            let mut g = Graph::new(store);
            let (loss, _) = model.loss(&mut g, &input, &c.target)?;
            Ok(g.value(loss.mean).data()[0])
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
