//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canvas::MaskRatio;
use crate::checkpoint::sha256_hex;
use crate::conditioning::{Ablation, AblationFlags};
use crate::diffusion::AdamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Transcript,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "transcript" => Ok(Self::Transcript),
            "http" => Ok(Self::Http),
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (expected stub, transcript or http)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub transcript: Option<PathBuf>,
    /// Imagined local captions per image during dataset preparation.
    pub k: usize,
    pub max_attempts: u32,
    /// Concurrent LLM requests during dataset preparation.
    pub parallelism: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            transcript: None,
            k: crate::caption::DEFAULT_IMAGINED,
            max_attempts: 3,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// 25 at the published scale.
    pub epochs: usize,
    /// 20 at the published scale.
    pub batch_size: usize,
    pub seed: u64,
    /// Optimizer steps between checkpoints; 0 writes only at the end of each epoch.
    pub checkpoint_every: u64,
    pub optimizer: AdamConfig,
    pub ratio: MaskRatio,
    pub ablate: Vec<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            optimizer: AdamConfig::default(),
            ratio: MaskRatio::HALF,
            ablate: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    pub sampling_steps: usize,
    pub seed: u64,
    pub guidance_scale: Option<f64>,
    pub ablate: Vec<Ablation>,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 20,
            seed: 0,
            guidance_scale: None,
            ablate: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: usize,
    pub classifier_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: 10,
            classifier_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Side of the square window the model generates.
    pub base_window: usize,
    /// Canvas growth per expansion step.
    pub shift: usize,
    pub train: TrainConfig,
    pub expand: ExpandConfig,
    pub llm: LlmConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            base_window: 16,
            shift: 8,
            train: TrainConfig::default(),
            expand: ExpandConfig::default(),
            llm: LlmConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let f = self.model.downsample;
        if self.base_window < 2 || !self.base_window.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "base_window {} must be at least 2 and a multiple of {f}",
                self.base_window
            )));
        }
        if self.shift == 0 || self.shift >= self.base_window || !self.shift.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "shift {} must be a positive multiple of {f} below base_window {}",
                self.shift, self.base_window
            )));
        }
        let strip = self.train.ratio.strip_width(self.base_window);
        if strip == 0 || strip >= self.base_window {
            return Err(Error::Config(format!(
                "mask ratio {:?} leaves no kept or masked pixels at base_window {}",
                (self.train.ratio.kept(), self.train.ratio.masked()),
                self.base_window
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let steps = self.model.schedule.steps;
        if self.expand.sampling_steps == 0 || self.expand.sampling_steps > steps {
            return Err(Error::Config(format!(
                "sampling_steps must be in 1..={steps}"
            )));
        }
        if self.llm.max_attempts == 0 || self.llm.parallelism == 0 || self.llm.k == 0 {
            return Err(Error::Config("llm k, max_attempts and parallelism must be positive".into()));
        }
        if self.eval.splits == 0 {
            return Err(Error::Config("eval splits must be positive".into()));
        }
        self.train_flags()?;
        self.expand_flags()?;
        Ok(())
    }

    pub fn train_flags(&self) -> Result<AblationFlags> {
        AblationFlags::from_ablations(&self.train.ablate)
    }

    pub fn expand_flags(&self) -> Result<AblationFlags> {
        AblationFlags::from_ablations(&self.expand.ablate)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective config into `dir` as `config.json`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json_pretty()).map_err(|e| Error::io(&path, e))
    }
}
