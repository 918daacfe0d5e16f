//! Experiment runner for the flowpath samplers.
//!
//! A TOML config names a set of analytic targets, a noise schedule and a list
//! of samplers; [`run_sweep`] evaluates every (target, sampler, N, seed) cell
//! and writes a CSV plus a JSON manifest, [`run_order_study`] fits empirical
//! convergence orders against an RK4 reference, and [`emit_plots`] turns a
//! manifest into SVG charts.

pub mod config;
pub mod manifest;
pub mod order;
pub mod plot;
pub mod sweep;

mod fields;
mod seeds;

pub use config::{validate_config, ExperimentConfig};
pub use manifest::{CellRecord, CellStatus, RunManifest};
pub use order::run_order_study;
pub use plot::emit_plots;
pub use sweep::{run_sweep, CSV_HEADER};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] flowpath_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status for the CLI: configuration problems map to 2,
    /// everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
