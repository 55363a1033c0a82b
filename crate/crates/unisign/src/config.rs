//! The TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unisign_core::lm::DecodeConfig;
use unisign_core::metrics::{Smoothing, TextUnit};
use unisign_core::model::ModelConfig;
use unisign_core::optim::{Schedule, Stage, StageConfig};
use unisign_core::task::Task;

use crate::error::{Result, RunError};

/// Environment variable that anchors relative output directories.
pub const HOME_VAR: &str = "UNISIGN_HOME";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths are resolved against `$UNISIGN_HOME` (or the working directory).
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StageOverrides,
    pub stage2: StageOverrides,
    pub stage3: StageOverrides,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage1: StageOverrides::default(),
            stage2: StageOverrides::default(),
            stage3: StageOverrides::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Vocabulary file (one token per line). Fitted on the manifests when absent.
    pub vocab: Option<PathBuf>,
    /// Tokens seen fewer times are left to the character fallback.
    pub min_count: usize,
    /// Where decoded video frames are cached (under the output directory when relative).
    pub frame_cache: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub text_unit: TextUnit,
    pub smoothing: Smoothing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub epochs: u32,
    pub lr: f64,
    pub lstm_hidden: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, lstm_hidden: 128 }
    }
}

/// Any subset of the stage recipe fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_accum: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_smoothing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u32>,
}

impl StageOverrides {
    pub fn apply(&self, mut s: StageConfig) -> StageConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(lr, lr_floor, weight_decay, betas, eps, schedule, warmup_steps, epochs, batch_size, grad_accum, label_smoothing, max_frames, checkpoint_every);
        if self.grad_clip.is_some() {
            s.grad_clip = self.grad_clip;
        }
        s
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| RunError::Toml { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        for stage in [Stage::PosePretrain, Stage::RgbPretrain, Stage::Finetune] {
            self.stage_config(stage, Some(Task::Slt)).validate()?;
        }
        if self.ablation.epochs == 0 || !(self.ablation.lr > 0.0) || self.ablation.lstm_hidden == 0 {
            return Err(RunError::Config("ablation: epochs, lr and lstm_hidden must be positive".into()));
        }
        Ok(())
    }

    /// The recipe for `stage` with this file's overrides applied.
    pub fn stage_config(&self, stage: Stage, task: Option<Task>) -> StageConfig {
        let over = match stage {
            Stage::PosePretrain => &self.stage1,
            Stage::RgbPretrain => &self.stage2,
            Stage::Finetune => &self.stage3,
        };
        over.apply(StageConfig::recipe(stage, task))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn output_root(&self) -> PathBuf {
        resolve_home(&self.output_dir)
    }

    pub fn frame_cache(&self) -> PathBuf {
        match &self.data.frame_cache {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.output_root().join(p),
            None => self.output_root().join("frames"),
        }
    }
}

pub fn resolve_home(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(HOME_VAR) {
        Some(home) => PathBuf::from(home).join(p),
        None => p.to_path_buf(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
