//! Run configuration: one strict JSON document describing the model, the
//! diffusion schedule, the training budget, the task geometry, and the
//! sampler. Unknown keys are rejected so a typo cannot silently fall back to
//! a default.
//!
//! [`RunConfig::content_hash`] gives a short stable digest of everything that
//! affects the numbers (the output directory is excluded); checkpoints and
//! reports are stamped with it so mismatched artifacts fail loudly.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockVariant;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::{ModelConfig, ModelDims};
use crate::toytask::TaskConfig;

/// Forward-process noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Optimizer and budget for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub log_every: usize,
}

/// Reverse-process sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: BlockVariant,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub sample: SampleConfig,
    pub seed: u64,
    /// Where artifacts land; not part of the content hash.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims::new(&self.model, self.task.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        self.task.validate()?;
        let p = self.model.patch;
        for (name, v) in [
            ("height", self.task.height),
            ("width", self.task.width),
            ("garment_height", self.task.garment_height),
            ("garment_width", self.task.garment_width),
        ] {
            if v % p != 0 {
                return Err(Error::config(format!(
                    "task {name} {v} is not divisible by patch size {p}"
                )));
            }
        }
        if self.schedule.steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                self.schedule.beta_start, self.schedule.beta_end
            )));
        }
        if self.train.steps == 0 || self.train.batch == 0 || self.train.log_every == 0 {
            return Err(Error::config("train steps, batch, and log_every must be positive"));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} is not usable", self.train.lr)));
        }
        for (name, b) in [("beta1", self.train.beta1), ("beta2", self.train.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} out of [0, 1)")));
            }
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(Error::config(format!(
                "sampler steps {} out of 1..={}",
                self.sample.steps, self.schedule.steps
            )));
        }
        Ok(())
    }

    /// First 16 hex chars of the digest of the canonical (key-sorted) JSON,
    /// with `out_dir` removed.
    pub fn content_hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(sha256_hex(canonical.as_bytes())[..16].to_string())
    }

    /// Same run with a different attention variant (the only field the
    /// ablation sweep varies).
    pub fn with_variant(&self, variant: BlockVariant) -> RunConfig {
        RunConfig { variant, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        RunConfig { seed, ..self.clone() }
    }
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

/// Small single-image run: trains in well under a minute on one core.
///
/// The geometry keeps each predicted token (`patch² · channels` values) no
/// wider than the model width, so exact noise prediction is representable;
/// larger patches bottleneck the per-token noise through too few features
/// and the loss plateaus near its linear-projection floor.
pub fn demo() -> RunConfig {
    RunConfig {
        variant: BlockVariant::MnV3,
        model: ModelConfig { d: 18, heads: 3, layers: 2, patch: 2 },
        schedule: ScheduleConfig { steps: 100, beta_start: 1e-4, beta_end: 0.02 },
        train: TrainConfig { steps: 600, batch: 4, lr: 3e-3, beta1: 0.9, beta2: 0.999, log_every: 50 },
        task: TaskConfig {
            frames: 1,
            height: 16,
            width: 16,
            channels: 3,
            garment_height: 8,
            garment_width: 8,
            text_tokens: 2,
        },
        sample: SampleConfig { steps: 20 },
        seed: 0,
        out_dir: None,
    }
}

/// Two-frame micro run sized for finite-difference gradient verification.
pub fn tiny_gradcheck() -> RunConfig {
    RunConfig {
        variant: BlockVariant::MnV3,
        model: ModelConfig { d: 12, heads: 2, layers: 2, patch: 8 },
        schedule: ScheduleConfig { steps: 10, beta_start: 1e-4, beta_end: 0.02 },
        train: TrainConfig { steps: 5, batch: 2, lr: 1e-3, beta1: 0.9, beta2: 0.999, log_every: 1 },
        task: TaskConfig {
            frames: 2,
            height: 16,
            width: 8,
            channels: 1,
            garment_height: 8,
            garment_width: 8,
            text_tokens: 2,
        },
        sample: SampleConfig { steps: 2 },
        seed: 0,
        out_dir: None,
    }
}

/// Budget for the variant comparison: long enough that the grouping choice,
/// not optimization noise, dominates the final scores.
pub fn ablation() -> RunConfig {
    RunConfig {
        train: TrainConfig {
            steps: 2000,
            batch: 4,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            log_every: 200,
        },
        ..demo()
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
