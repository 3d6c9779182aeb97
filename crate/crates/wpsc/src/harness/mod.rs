//! Experiment engine: configuration, trace ingestion, synthetic data,
//! the end-to-end two-phase pipeline, and deterministic reports.

pub mod config;
pub mod data;
pub mod pipeline;
pub mod report;

use thiserror::Error;

pub use config::{DataSource, ExperimentConfig, SplitRule};
pub use data::{
    gen_synthetic, ingest_traces, IngestResult, SampleSet, SyntheticSpec, TraceRecord, WorkerTrace,
};
pub use pipeline::{run_pipeline, run_stage, PipelineOutput, PipelineStage};
pub use report::{fmt_sig, sig12};

/// Failure of a harness operation. [`HarnessError::exit_code`] maps the
/// variants to the process exit codes: configuration problems exit 2,
/// everything else (stage/runtime failures) exits 3.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Mdl(#[from] crate::mdl::MdlError),
}

impl HarnessError {
    /// Process exit code for this failure (2 = config, 3 = stage failure).
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}
