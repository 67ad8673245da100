//! Line-delimited JSON datasets: one header line, then one record per
//! sequence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use krylov_core::eval::Split;
use krylov_core::{LanczosSequence64, TfimParams64, XyzParams64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Family;
use crate::error::{CliError, Result};

pub const DATASET_FORMAT: &str = "krylov-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub format_version: u32,
    pub generator_version: String,
    pub split: Split,
    pub family: Family,
    pub count: usize,
    #[serde(rename = "T")]
    pub length: usize,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    pub master_seed: u64,
    /// Draws rejected for Lanczos breakdown and resampled.
    pub resampled: usize,
}

/// Couplings of one generated instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemParams {
    Tfim(TfimParams64),
    Xyz(XyzParams64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub family: Family,
    pub params: SystemParams,
    pub seed: u64,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[serde(rename = "T")]
    pub length: usize,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut w = BufWriter::new(file);
        let line = |w: &mut BufWriter<File>, json: String| writeln!(w, "{json}").map_err(CliError::io(path));
        line(&mut w, serde_json::to_string(&self.header).expect("headers serialize"))?;
        for r in &self.records {
            line(&mut w, serde_json::to_string(r).expect("records serialize"))?;
        }
        w.flush().map_err(CliError::io(path))
    }

    /// Reads and validates a dataset: header version, record count, lengths
    /// and positivity of every stored sequence.
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(CliError::io(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let bad = |line: usize, message: String| CliError::Format { path: path.to_path_buf(), line, message };

        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty dataset file".into()))?;
        let first = first.map_err(CliError::io(path))?;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| bad(1, format!("header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(bad(1, format!("not a dataset file (format `{}`)", header.format)));
        }
        if header.format_version != DATASET_VERSION {
            return Err(CliError::VersionMismatch {
                what: "dataset format".into(),
                found: header.format_version.to_string(),
                expected: DATASET_VERSION.to_string(),
            });
        }

        let mut records = Vec::with_capacity(header.count);
        for (i, line) in lines {
            let line = line.map_err(CliError::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
            if r.family != header.family || r.length != header.length || r.b.len() != r.length || r.sites != header.sites {
                return Err(bad(i + 1, "record disagrees with the header".into()));
            }
            LanczosSequence64::new(r.b.clone()).map_err(|e| bad(i + 1, e.to_string()))?;
            records.push(r);
        }
        if records.len() != header.count {
            return Err(bad(records.len() + 1, format!("header announces {} records, found {}", header.count, records.len())));
        }
        Ok(Self { header, records })
    }

    pub fn sequences(&self) -> Vec<LanczosSequence64> {
        self.records
            .iter()
            .map(|r| LanczosSequence64::new(r.b.clone()).expect("validated on load"))
            .collect()
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
