//! Flat run configuration shared by every subcommand.
//!
//! Each key of the JSON config file is also a command-line flag: `learning_rate`
//! in the file is `--learning-rate` on the command line, `T` is `--T`. Values
//! given on the command line override the file, and the file overrides the
//! built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use r3l_core::inference::DEFAULT_STAGES;
use r3l_core::networks::ModelKind;
use r3l_core::training::{ReturnMode, TrainConfig};

use crate::error::{Error, Result};

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: r3l_core::Error| e.to_string())
}

fn parse_return_mode(s: &str) -> Result<ReturnMode, String> {
    s.parse().map_err(|e: r3l_core::Error| e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model to train: r3l (actor-critic) or r3n (supervised twin)
    #[arg(long, value_parser = parse_model, help_heading = "Training")]
    #[serde(default, with = "model_kind_opt")]
    pub model: Option<ModelKind>,
    /// Training noise level on the 0-255 scale [default: 25]
    #[arg(long, help_heading = "Training")]
    pub sigma: Option<f64>,
    /// Recurrent stages per episode and at inference [default: 5]
    #[arg(long = "T", help_heading = "Training")]
    #[serde(rename = "T")]
    pub stages: Option<usize>,
    /// Discount factor in (0, 1] [default: 0.95]
    #[arg(long, help_heading = "Training")]
    pub gamma: Option<f64>,
    /// Adam step size [default: 0.001]
    #[arg(long, help_heading = "Training")]
    pub learning_rate: Option<f64>,
    /// Patches per update [default: 16]
    #[arg(long, help_heading = "Training")]
    pub batch_size: Option<usize>,
    /// Square patch side in pixels [default: 64]
    #[arg(long, help_heading = "Training")]
    pub patch_size: Option<usize>,
    /// Optimizer steps over all workers [default: 5000]
    #[arg(long, help_heading = "Training")]
    pub total_updates: Option<usize>,
    /// Asynchronous workers; 1 is fully deterministic [default: 1]
    #[arg(long, help_heading = "Training")]
    pub num_workers: Option<usize>,
    /// Weight of the policy entropy bonus [default: 0.01]
    #[arg(long, help_heading = "Training")]
    pub entropy_coef: Option<f64>,
    /// Weight of the value regression loss [default: 1]
    #[arg(long, help_heading = "Training")]
    pub value_coef: Option<f64>,
    /// Global gradient norm limit [default: 40]
    #[arg(long, help_heading = "Training")]
    pub grad_clip_norm: Option<f64>,
    /// bootstrap (one-step) or monte-carlo (full discounted) returns [default: bootstrap]
    #[arg(long, value_parser = parse_return_mode, help_heading = "Training")]
    #[serde(default, with = "return_mode_opt")]
    pub return_mode: Option<ReturnMode>,
    /// Factor applied to rewards when building returns [default: 1]
    #[arg(long, help_heading = "Training")]
    pub reward_scale: Option<f64>,
    /// Patches per gradient chunk; bounds peak memory [default: 1]
    #[arg(long, help_heading = "Training")]
    pub micro_batch: Option<usize>,
    /// Held-out evaluation period in updates, 0 for end only [default: 100]
    #[arg(long, help_heading = "Training")]
    pub eval_every: Option<usize>,
    /// Held-out patches scored at each evaluation [default: 8]
    #[arg(long, help_heading = "Training")]
    pub holdout_patches: Option<usize>,
    /// Images (last in file-name order) kept out of training for evaluation [default: 2]
    #[arg(long, help_heading = "Training")]
    pub holdout_images: Option<usize>,
    /// Directory of training PGM images
    #[arg(long, help_heading = "Training")]
    pub data: Option<PathBuf>,

    /// Trained checkpoint to load
    #[arg(long, help_heading = "Inference")]
    pub checkpoint: Option<PathBuf>,
    /// Noisy input PGM
    #[arg(long, help_heading = "Inference")]
    pub input: Option<PathBuf>,
    /// Denoised output PGM
    #[arg(long, help_heading = "Inference")]
    pub output: Option<PathBuf>,
    /// Ground-truth PGM; enables per-stage PSNR reporting
    #[arg(long, help_heading = "Inference")]
    pub clean: Option<PathBuf>,
    /// Directory receiving stage_1.pgm .. stage_T.pgm
    #[arg(long, help_heading = "Inference")]
    pub emit_intermediates: Option<PathBuf>,

    /// Directory of clean test PGM images
    #[arg(long, help_heading = "Sweep")]
    pub testset: Option<PathBuf>,
    /// Comma-separated test noise levels [default: five levels around the trained sigma]
    #[arg(long, value_delimiter = ',', help_heading = "Sweep")]
    pub sigmas: Option<Vec<f64>>,
    /// Further checkpoints to add as report columns (repeatable)
    #[arg(long, help_heading = "Sweep")]
    #[serde(default)]
    pub compare: Vec<PathBuf>,

    /// Number of images to generate
    #[arg(long, help_heading = "Synthetic corpus")]
    pub count: Option<usize>,
    /// Image width in pixels
    #[arg(long, help_heading = "Synthetic corpus")]
    pub width: Option<usize>,
    /// Image height in pixels
    #[arg(long, help_heading = "Synthetic corpus")]
    pub height: Option<usize>,

    /// Master seed for initialization, sampling and test noise [default: 0]
    #[arg(long, help_heading = "Common")]
    pub seed: Option<u64>,
    /// Output directory (training artifacts, sweep reports, generated images)
    #[arg(long, help_heading = "Common")]
    pub out: Option<PathBuf>,
}

macro_rules! opt_via_str {
    ($name:ident, $ty:ty, $to:expr) => {
        mod $name {
            use super::*;
            use serde::{Deserializer, Serializer};

            pub fn serialize<S: Serializer>(v: &Option<$ty>, s: S) -> Result<S::Ok, S::Error> {
                match v {
                    Some(v) => s.serialize_some($to(v)),
                    None => s.serialize_none(),
                }
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<$ty>, D::Error> {
                let raw: Option<String> = Option::deserialize(d)?;
                raw.map(|s| s.parse().map_err(|e: r3l_core::Error| serde::de::Error::custom(e)))
                    .transpose()
            }
        }
    };
}

opt_via_str!(model_kind_opt, ModelKind, |m: &ModelKind| m.as_str());
opt_via_str!(return_mode_opt, ReturnMode, |m: &ReturnMode| match m {
    ReturnMode::Bootstrap => "bootstrap",
    ReturnMode::MonteCarlo => "monte-carlo",
});

macro_rules! overlay {
    ($base:ident, $over:ident; $($field:ident),* $(,)?) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field.clone(); } )*
    };
}

pub const DEFAULT_HOLDOUT_IMAGES: usize = 2;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `self` with every value present in `over` replaced.
    pub fn overridden_by(mut self, over: &RunConfig) -> Self {
        overlay!(self, over;
            model, sigma, stages, gamma, learning_rate, batch_size, patch_size, total_updates,
            num_workers, entropy_coef, value_coef, grad_clip_norm, return_mode, reward_scale,
            micro_batch, eval_every, holdout_patches, holdout_images, data, checkpoint, input,
            output, clean, emit_intermediates, testset, sigmas, count, width, height, seed, out);
        if !over.compare.is_empty() {
            self.compare = over.compare.clone();
        }
        self
    }

    /// Training settings with defaults filled in, validated.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            model_kind: self.model.unwrap_or(d.model_kind),
            sigma_train: self.sigma.unwrap_or(d.sigma_train),
            stages: self.stages.unwrap_or(d.stages),
            gamma: self.gamma.unwrap_or(d.gamma),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            total_updates: self.total_updates.unwrap_or(d.total_updates),
            num_workers: self.num_workers.unwrap_or(d.num_workers),
            entropy_coef: self.entropy_coef.unwrap_or(d.entropy_coef),
            value_coef: self.value_coef.unwrap_or(d.value_coef),
            grad_clip_norm: self.grad_clip_norm.unwrap_or(d.grad_clip_norm),
            return_mode: self.return_mode.unwrap_or(d.return_mode),
            seed: self.seed.unwrap_or(d.seed),
            micro_batch: self.micro_batch.unwrap_or(d.micro_batch),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            holdout_patches: self.holdout_patches.unwrap_or(d.holdout_patches),
            reward_scale: self.reward_scale.unwrap_or(d.reward_scale),
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn holdout_images(&self) -> usize {
        self.holdout_images.unwrap_or(DEFAULT_HOLDOUT_IMAGES)
    }

    pub fn stages(&self) -> Result<usize> {
        match self.stages.unwrap_or(DEFAULT_STAGES) {
            0 => Err(Error::Config("T: must be >= 1".into())),
            t => Ok(t),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The value of a path option or a field-level error naming the flag.
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{key}: required (--{})", key.replace('_', "-"))))
    }
}
