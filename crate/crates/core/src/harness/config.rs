use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drafter::DrafterConfig;
use crate::error::{Error, Result};
use crate::losses::{gamma_for_block, LossConfig, LossKind, DEFAULT_ALPHA, DEFAULT_TOP_K};
use crate::numerics::{AdamWConfig, LrSchedule};
use crate::specdec::TargetSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub target: TargetSpec,
    pub drafter: DrafterSpec,
    pub loss: LossSpec,
    pub train: TrainSpec,
    pub eval: EvalSpec,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Drafter shape; the vocabulary is taken from the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterSpec {
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
    pub block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Decay constant; `null` picks the per-block-size default.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl LossSpec {
    pub fn resolve(&self, block: usize) -> LossConfig {
        LossConfig {
            kind: self.kind,
            alpha: self.alpha,
            gamma: self.gamma.unwrap_or_else(|| gamma_for_block(block)),
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub micro_batch: usize,
    #[serde(default = "one")]
    pub accumulation: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; `null` disables clipping.
    pub clip: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub data: DataSpecConfig,
}

fn is_positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn one() -> usize {
    1
}

impl TrainSpec {
    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpecConfig {
    pub num_sequences: usize,
    pub sequence_length: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub temperatures: Vec<f64>,
    pub num_prompts: usize,
    pub prompt_length: usize,
    pub max_new_tokens: usize,
    /// Number of evenly spaced evaluation points over training.
    pub checkpoints: usize,
    /// Steps averaged into each logged weight-trace window.
    pub trace_window: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn drafter_config(&self) -> DrafterConfig {
        DrafterConfig {
            vocab: self.target.vocab,
            context: self.drafter.context,
            embed: self.drafter.embed,
            hidden: self.drafter.hidden,
            block: self.drafter.block,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.resolve(self.drafter.block)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: usize| {
            if v == 0 {
                Err(Error::config(path, "must be positive"))
            } else {
                Ok(())
            }
        };
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.target.vocab < 2 {
            return Err(Error::config("target.vocab", "must be >= 2"));
        }
        positive("target.order", self.target.order)?;
        if !(self.target.concentration > 0.0 && self.target.concentration.is_finite()) {
            return Err(Error::config("target.concentration", "must be positive"));
        }
        positive("drafter.context", self.drafter.context)?;
        positive("drafter.embed", self.drafter.embed)?;
        positive("drafter.hidden", self.drafter.hidden)?;
        positive("drafter.block", self.drafter.block)?;
        self.loss_config()
            .validate()
            .map_err(|e| Error::config("loss", e.to_string()))?;
        if self.loss.kind == LossKind::TopkMask && self.loss.top_k > self.target.vocab {
            return Err(Error::config("loss.top_k", "exceeds the vocabulary size"));
        }
        positive("train.micro_batch", self.train.micro_batch)?;
        positive("train.accumulation", self.train.accumulation)?;
        let opt = &self.train.optimizer;
        if !(opt.lr >= 0.0 && opt.lr.is_finite()) {
            return Err(Error::config("train.optimizer.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
            return Err(Error::config("train.optimizer", "betas must lie in [0, 1)"));
        }
        if !is_positive(opt.eps) || !(opt.weight_decay.is_finite() && opt.weight_decay >= 0.0) {
            return Err(Error::config("train.optimizer", "eps must be > 0 and weight_decay >= 0"));
        }
        if let Some(clip) = self.train.clip {
            if !is_positive(clip) {
                return Err(Error::config("train.clip", "must be positive"));
            }
        }
        if let LrSchedule::WarmupCosine { warmup_ratio } = self.train.schedule {
            if !(0.0..=1.0).contains(&warmup_ratio) {
                return Err(Error::config("train.schedule.warmup_ratio", "must lie in [0, 1]"));
            }
        }
        let data = &self.train.data;
        if self.train.steps > 0 {
            positive("train.data.num_sequences", data.num_sequences)?;
        }
        if data.sequence_length < self.drafter.context + self.drafter.block {
            return Err(Error::config(
                "train.data.sequence_length",
                "must be at least drafter.context + drafter.block",
            ));
        }
        if !(data.temperature >= 0.0 && data.temperature.is_finite()) {
            return Err(Error::config("train.data.temperature", "must be >= 0"));
        }
        if self.eval.temperatures.is_empty() {
            return Err(Error::config("eval.temperatures", "must not be empty"));
        }
        if let Some(i) = self
            .eval
            .temperatures
            .iter()
            .position(|t| !(*t >= 0.0 && t.is_finite()))
        {
            return Err(Error::config(format!("eval.temperatures[{i}]"), "must be >= 0"));
        }
        positive("eval.num_prompts", self.eval.num_prompts)?;
        positive("eval.prompt_length", self.eval.prompt_length)?;
        positive("eval.max_new_tokens", self.eval.max_new_tokens)?;
        positive("eval.checkpoints", self.eval.checkpoints)?;
        positive("eval.trace_window", self.eval.trace_window)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        Ok(())
    }
}
