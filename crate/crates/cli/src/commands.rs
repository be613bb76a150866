//! Stage dispatch and the full pipeline run.

use std::collections::BTreeMap;
use std::fs;

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::PipelineManifest;
use crate::pipeline::{stage_compare, stage_group, stage_heatmaps, stage_ingest, stage_metrics, Layout};
use crate::report::stage_report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Heatmap,
    Metrics,
    Group,
    Compare,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Ingest,
        Stage::Heatmap,
        Stage::Metrics,
        Stage::Group,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Heatmap => "heatmap",
            Stage::Metrics => "metrics",
            Stage::Group => "group",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }
}

/// Runs one stage and returns a one-line summary of what it produced.
pub fn run_stage(stage: Stage, m: &PipelineManifest) -> CliResult<String> {
    Ok(match stage {
        Stage::Ingest => {
            let s = stage_ingest(m)?;
            let diagnostics: usize = s.files.iter().map(|f| f.diagnostics.len()).sum();
            format!(
                "{} streams, {} fixations, {} skipped lines, {} streams without a segmentation map",
                s.streams,
                s.fixations,
                diagnostics,
                s.skipped_streams.len()
            )
        }
        Stage::Heatmap => format!("{} heatmaps", stage_heatmaps(m)?.images.len()),
        Stage::Metrics => {
            let s = stage_metrics(m)?;
            format!("{} images, {} with heatmaps", s.images, s.with_heatmap)
        }
        Stage::Group => {
            let labels = stage_group(m)?;
            format!("{} images labelled", labels.len())
        }
        Stage::Compare => {
            let s = stage_compare(m)?;
            match s.report {
                Some(r) => format!("{} image/method rows", r.per_image.len()),
                None if m.xai.is_empty() => "skipped, no CAM heatmaps configured".to_string(),
                None => "no comparable image/method rows".to_string(),
            }
        }
        Stage::Report => {
            let r = stage_report(m)?;
            format!("{} metric summaries", r.means.len())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ok,
    Failed,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStatus {
    pub outcome: StageOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Runs every stage in order, stopping at the first failure. Writes
/// `run_status.json` either way.
pub fn cmd_run(m: &PipelineManifest) -> CliResult<BTreeMap<Stage, StageStatus>> {
    fs::create_dir_all(&m.output_dir)?;
    let mut status: BTreeMap<Stage, StageStatus> = Stage::ORDER
        .iter()
        .map(|s| {
            (
                *s,
                StageStatus {
                    outcome: StageOutcome::NotRun,
                    message: None,
                },
            )
        })
        .collect();
    let mut failure = None;
    for stage in Stage::ORDER {
        match run_stage(stage, m) {
            Ok(summary) => {
                tracing::info!(stage = stage.name(), "{summary}");
                status.insert(
                    stage,
                    StageStatus {
                        outcome: StageOutcome::Ok,
                        message: Some(summary),
                    },
                );
            }
            Err(e) => {
                status.insert(
                    stage,
                    StageStatus {
                        outcome: StageOutcome::Failed,
                        message: Some(e.to_string()),
                    },
                );
                failure = Some(e);
                break;
            }
        }
    }
    let named: BTreeMap<&str, &StageStatus> = status.iter().map(|(k, v)| (k.name(), v)).collect();
    let json = serde_json::to_string_pretty(&named).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(Layout::new(&m.output_dir).status(), json + "\n")?;
    match failure {
        Some(e) => Err(e),
        None => Ok(status),
    }
}
