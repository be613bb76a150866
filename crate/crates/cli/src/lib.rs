//! Command-line pipeline for gaze-based street-view safety studies: log
//! ingestion, attention heatmaps, object metrics, safe/unsafe grouping,
//! human vs CAM similarity, reports, stimulus stratification, synthetic
//! studies, and the survey server.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod simulate;

pub use commands::{cmd_run, run_stage, Stage, StageOutcome, StageStatus};
pub use error::{CliError, CliResult, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
pub use manifest::{Params, PipelineManifest};
pub use simulate::{simulate, SimulationConfig, SimulationSummary};
