//! Run configuration. Every output of the pipeline is a function of a
//! [`RunConfig`] alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use krylov_core::baseline::FitForm;
use krylov_core::eval::Split;
use krylov_core::trainer::TrainConfig;
use krylov_core::transformer::{MaskPolicy, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Model family a dataset is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Classical XYZ spin on the sphere.
    Xyz,
    /// Transverse-field Ising chain with a longitudinal field.
    Tfim,
}

impl Family {
    /// Growth law used by the baseline fit: linear in general, with the
    /// logarithmic correction for the one-dimensional chain.
    pub fn default_fit_form(self) -> FitForm {
        match self {
            Family::Xyz => FitForm::Linear,
            Family::Tfim => FitForm::LogLinear,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Xyz => "xyz",
            Family::Tfim => "tfim",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xyz" => Ok(Family::Xyz),
            "tfim" => Ok(Family::Tfim),
            other => Err(format!("unknown family `{other}` (expected xyz or tfim)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: Family,
    /// Chain length `L` (TFIM only).
    pub sites: usize,
    /// Sequence length `T`.
    pub length: usize,
    pub samples: usize,
    /// Master seed for dataset generation.
    pub seed: u64,
    pub split: Split,
    /// Draws per record before generation gives up.
    pub max_attempts: usize,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Output file (generate, reconstruct, moments) or directory (train,
    /// evaluate, ablate).
    pub output: Option<PathBuf>,
    /// Defaults to the family's growth law.
    pub fit_form: Option<FitForm>,
    pub mask: MaskPolicy,
    /// Observable grid `[0, t_max]` with `time_points` samples.
    pub t_max: f64,
    pub time_points: usize,
    /// Record used by `reconstruct` when reading from a dataset.
    pub index: usize,
    pub coefficients: Vec<f64>,
    pub moments: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::Tfim,
            sites: 6,
            length: 30,
            samples: 100,
            seed: 0,
            split: Split::Train,
            max_attempts: 16,
            dataset: None,
            test_dataset: None,
            checkpoint: None,
            output: None,
            fit_form: None,
            mask: MaskPolicy::Full,
            t_max: 10.0,
            time_points: 101,
            index: 0,
            coefficients: Vec::new(),
            moments: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn fit_form(&self) -> FitForm {
        self.fit_form.unwrap_or_else(|| self.family.default_fit_form())
    }

    pub fn required<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run configurations serialize")
    }
}
