//! The training/run configuration file (TOML). Every field has a default
//! matching the published setting where one exists; unknown keys are
//! rejected.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryScoreRule;
use crate::nn::EncoderSpec;
use crate::objective::{LossConfig, OptimizerConfig};
use crate::preprocess::{PreprocessParams, WindowPair, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Manifest path, relative to the config file (or absolute).
    pub manifest: String,
    /// Used when the manifest carries no split (4:1 default).
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            manifest: "manifest.json".to_string(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowPreset {
    /// Bone level 1500/width 400, soft level 200/width 40, exactly as
    /// published.
    AsPublished,
    /// The level/width-transposed radiological convention.
    Conventional,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window_preset: WindowPreset,
    /// Only read when `window_preset = "custom"`.
    pub bone_window: Option<WindowSpec>,
    pub soft_window: Option<WindowSpec>,
    pub margin_fraction: f64,
    pub target_spacing: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_preset: WindowPreset::AsPublished,
            bone_window: None,
            soft_window: None,
            margin_fraction: 0.25,
            target_spacing: 1.0,
        }
    }
}

impl PreprocessConfig {
    pub fn params(&self) -> Result<PreprocessParams> {
        let windows = match self.window_preset {
            WindowPreset::AsPublished => WindowPair::as_published(),
            WindowPreset::Conventional => WindowPair::conventional(),
            WindowPreset::Custom => {
                let (bone, soft) = match (self.bone_window, self.soft_window) {
                    (Some(b), Some(s)) => (b, s),
                    _ => {
                        return Err(Error::config(
                            "custom window preset requires bone_window and soft_window".to_string(),
                        ))
                    }
                };
                WindowPair { bone, soft }
            }
        };
        if !(windows.bone.width > 0.0 && windows.soft.width > 0.0) {
            return Err(Error::config("window widths must be positive".to_string()));
        }
        if !(self.margin_fraction >= 0.0) {
            return Err(Error::config(
                "margin_fraction must be non-negative".to_string(),
            ));
        }
        if !(self.target_spacing > 0.0) {
            return Err(Error::config("target_spacing must be positive".to_string()));
        }
        Ok(PreprocessParams {
            windows,
            margin_fraction: self.margin_fraction,
            target_spacing: self.target_spacing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Patches drawn per class per batch.
    pub n: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Checkpoint (and test-set evaluation) cadence, in epochs.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 7,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub binary_score_rule: BinaryScoreRule,
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub sampler: SamplerConfig,
    pub network: EncoderSpec,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // manifest path is relative to the config file
        let manifest = Path::new(&cfg.dataset.manifest);
        if manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.manifest = dir.join(manifest).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.params()?;
        if self.sampler.n == 0 {
            return Err(Error::config("sampler.n must be at least 1".to_string()));
        }
        if self.augment.canonical_side != self.network.input_side {
            return Err(Error::config(format!(
                "augment.canonical_side ({}) must equal network.input_side ({})",
                self.augment.canonical_side, self.network.input_side
            )));
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "dataset.test_fraction must lie in (0, 1), got {}",
                self.dataset.test_fraction
            )));
        }
        if self.optimizer.epochs == 0 {
            return Err(Error::config(
                "optimizer.epochs must be positive".to_string(),
            ));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(Error::config(
                "loss.temperature must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Desk-scale preset: 32-voxel views, a width-scaled encoder, and
    /// augmentation magnitudes scaled to the smaller canvas. The optimizer
    /// schedule is the published one compressed proportionally onto the
    /// given epoch count.
    pub fn desk_scale(manifest: &str, epochs: usize, seed: u64) -> Self {
        let full = OptimizerConfig::default();
        let decay_epochs = full
            .decay_epochs
            .iter()
            .map(|e| e * epochs / full.epochs)
            .collect();
        RunConfig {
            dataset: DatasetConfig {
                manifest: manifest.to_string(),
                test_fraction: 0.2,
            },
            preprocess: PreprocessConfig {
                window_preset: WindowPreset::Conventional,
                ..PreprocessConfig::default()
            },
            augment: AugmentConfig {
                canonical_side: 32,
                shift_limit: 3,
                box_side_range: [1, 5],
                ..AugmentConfig::default()
            },
            network: EncoderSpec {
                input_side: 32,
                width_scale: 0.25,
                ..EncoderSpec::default()
            },
            optimizer: OptimizerConfig {
                epochs,
                decay_epochs,
                ..full
            },
            training: TrainingConfig {
                seed,
                checkpoint_every: 10,
            },
            ..RunConfig::default()
        }
    }
}
