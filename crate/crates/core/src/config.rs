//! Run configuration: every module's settings plus paths, loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};
use crate::evaluation::RESIDUAL_TAU;
use crate::losses::LossConfig;
use crate::model::ArchConfig;
use crate::synth::GenConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Binarization threshold of predicted masks.
    pub tau: f32,
    /// Residual-baseline threshold.
    pub tau_r: f32,
    pub batch_size: usize,
    pub save_predictions: bool,
    pub save_overlays: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 0.5,
            tau_r: RESIDUAL_TAU,
            batch_size: 8,
            save_predictions: true,
            save_overlays: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.tau_r) {
            return Err(R2dError::Config(
                "eval.tau and eval.tau_r must lie in [0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(R2dError::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root holding `train.json` and `test.json`.
    pub data: PathBuf,
    /// Parent of the timestamped run directories.
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            runs: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

fn section(name: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        R2dError::Config(m) if !m.starts_with(name) => R2dError::Config(format!("{name}: {m}")),
        other => other,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        section("gen", self.gen.validate())?;
        section("arch", self.arch.validate())?;
        section("loss", self.loss.weights.validate())?;
        section("train", self.train.validate())?;
        section("eval", self.eval.validate())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| R2dError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| R2dError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            R2dError::Config(m) => R2dError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| R2dError::io(path, e))
    }
}
