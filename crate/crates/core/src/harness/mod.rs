//! Everything around the engine needed to run experiments from files:
//! run configs, dataset manifests, prompt templates, batch evaluation,
//! noise injection and plot-data tables.

mod config;
mod eval;
mod heatmap;
mod manifest;
mod noise;
mod prompts;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{BackendConfig, BackendKind, FieldConfig, NoiseConfig, RunConfig};
pub use eval::{
    run_batch, AccuracyRow, BatchOutcome, DocumentVerdicts, EvalReport, FieldVerdict, Prediction, Verdict,
    REASON_BACKEND_DOWN, REASON_IMAGE_ERROR,
};
pub use heatmap::{read_trace, write_heatmap};
pub use manifest::{read_id_list, DocumentRecord, FieldRecord, Manifest, DEFAULT_GROUP};
pub use noise::{inject_noise, load_image};
pub use prompts::{PromptLibrary, FIELD_PLACEHOLDER};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad or inconsistent configuration, manifest or arguments.
    #[error("{0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }
}

fn read_text(path: &std::path::Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
        path: path.to_path_buf(),
        source,
    })
}
