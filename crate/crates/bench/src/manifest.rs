use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{BenchError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Sweep,
    OrderStudy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Metric values of one cell; `None` where a metric was switched off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportRecord {
    pub sliced_w2: Option<f64>,
    pub energy: Option<f64>,
    pub mean_err: Option<f64>,
    pub cov_err: Option<f64>,
    pub oracle_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub target: String,
    pub sampler: String,
    pub steps: usize,
    pub seed: u64,
    pub chains: usize,
    /// Declared evaluations per chain.
    pub nfe: u64,
    /// Evaluations observed by the counting wrapper, summed over chains.
    pub counted_nfe: u64,
    /// SHA-256 of the initial batch handed to the sampler (before any
    /// sampler-specific rescaling).
    pub x0_hash: String,
    pub wall_ms: f64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportRecord>,
    /// Zero-based data row in the CSV, when one was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub target: String,
    /// Sampler id, or `exact` for the reference draw.
    pub source: String,
    pub steps: Option<usize>,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRecord {
    pub target: String,
    pub sampler: String,
    pub slope: Option<f64>,
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: RunKind,
    pub tool: String,
    pub version: String,
    pub platform: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub csv: String,
    pub cells: Vec<CellRecord>,
    #[serde(default)]
    pub samples: Vec<SampleFile>,
    #[serde(default)]
    pub slopes: Vec<SlopeRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub(crate) fn new(kind: RunKind, config: &ExperimentConfig, csv: &str) -> Self {
        Self {
            kind,
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            config_hash: config.hash(),
            config: config.clone(),
            csv: csv.to_string(),
            cells: Vec::new(),
            samples: Vec::new(),
            slopes: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn failed_cells(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.status == CellStatus::Failed)
            .count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| BenchError::io(path, e))
    }
}
