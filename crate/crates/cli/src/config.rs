//! Shared configuration file for every subcommand.
//!
//! All sections are optional and default to the library defaults. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blendrig_core::defxfer::TransferOptions;
use blendrig_core::fitter::{FitOptions, TargetSpace};
use blendrig_core::mixer::{MixerConfig, TrainConfig};
use blendrig_core::synth::{DatasetOptions, TemplateConfig, IDENTITY_AMPLITUDE};
use blendrig_core::{Camera, Error};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CliConfig {
    /// Root seed of generated datasets.
    pub seed: u64,
    pub template: TemplateConfig,
    /// Prior spec file; the built-in ARKit prior when unset.
    pub prior: Option<PathBuf>,
    pub camera: Camera,
    pub dataset: DatasetSettings,
    pub mixer: MixerConfig,
    pub train: TrainConfig,
    pub fit: FitSettings,
    pub eval: EvalSettings,
    pub pipeline: PipelineSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub identities: u64,
    pub identity_offset: u64,
    pub sample_offset: u64,
    pub identity_amplitude: f64,
    pub rotation_range_deg: f64,
    pub translation_box: [[f64; 3]; 2],
}

impl Default for DatasetSettings {
    fn default() -> Self {
        let d = DatasetOptions::default();
        Self {
            identities: d.identities,
            identity_offset: d.identity_offset,
            sample_offset: d.sample_offset,
            identity_amplitude: IDENTITY_AMPLITUDE,
            rotation_range_deg: d.rotation_range_deg,
            translation_box: d.translation_box,
        }
    }
}

impl DatasetSettings {
    pub fn options(&self) -> DatasetOptions {
        DatasetOptions {
            identities: self.identities,
            identity_offset: self.identity_offset,
            sample_offset: self.sample_offset,
            identity_amplitude: self.identity_amplitude,
            rotation_range_deg: self.rotation_range_deg,
            translation_box: self.translation_box,
            transfer: TransferOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub lbfgs_memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub penalty_weight: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            lbfgs_memory: d.lbfgs_memory,
            max_iters: d.max_iters,
            grad_tol: d.grad_tol,
            penalty_weight: d.penalty_weight,
        }
    }
}

impl FitSettings {
    pub fn options(&self, target_space: TargetSpace) -> FitOptions {
        FitOptions {
            lbfgs_memory: self.lbfgs_memory,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            penalty_weight: self.penalty_weight,
            target_space,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Mean training coefficients, read from the checkpoint.
    Mean,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub fitter: bool,
    pub baseline: Baseline,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            fitter: true,
            baseline: Baseline::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub train_samples: u64,
    pub holdout_samples: u64,
    /// Identities reserved for the holdout, placed after the training ones.
    pub holdout_identities: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            train_samples: 20_000,
            holdout_samples: 500,
            holdout_identities: 50,
        }
    }
}

impl CliConfig {
    /// Reads a config file, or returns defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display(), e.to_string()))
            .context("reading config")?;
        if let Some(p) = &cfg.prior {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.prior = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.mixer.validate_standard()?;
        self.train.validate()?;
        self.fit.options(TargetSpace::Model3d).validate()?;
        if self.dataset.identities == 0 {
            return Err(Error::Config("dataset.identities must be at least 1".into()).into());
        }
        Ok(())
    }
}

/// Missing inputs are configuration errors, reported before any work.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input file {} does not exist", path.display())).into())
    }
}

/// Parses a JSON file of type `T`; parse failures are configuration errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), e.to_string()))?)
}
