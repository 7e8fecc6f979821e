//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use deepfrc_core::synthgen::SynthConfig;
use deepfrc_core::trainer::Candidate;
use deepfrc_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Settings for the finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub points: usize,
    pub basis_k: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            points: 32,
            basis_k: 8,
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

/// Input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    /// Hyperparameter grid used by `tune` when no grid file is given.
    pub tune_grid: Vec<Candidate>,
    pub paths: Paths,
}

impl RunConfig {
    /// Reads a configuration file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Seeds every random stream from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    /// The grid used by `tune` when none is supplied.
    pub fn default_grid(&self) -> Vec<Candidate> {
        let t = &self.train;
        [(1.0, 1.0), (10.0, 1.0), (100.0, 10.0)]
            .into_iter()
            .map(|(alpha, beta)| Candidate {
                alpha,
                beta,
                lr_reg: t.lr_reg,
                lr_class: t.lr_class,
            })
            .collect()
    }
}
