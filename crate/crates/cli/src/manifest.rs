//! Pipeline manifest: where the inputs live, where outputs go, and the
//! analysis parameters. Relative paths resolve against the manifest's own
//! directory.
//!
//! ```toml
//! # Seed for every random choice the pipeline makes.
//! seed = 42
//! # Optional; only used to link stimuli from the HTML report.
//! image_dir = "images"
//! # One <image_id>.png class-index map per image.
//! segmentation_dir = "segmentation"
//! # Line-delimited gaze logs, coordinates in image pixels.
//! gaze_logs = ["gaze.jsonl"]
//! comparison_log = "comparisons.jsonl"
//! output_dir = "out"
//! # Optional LPIPS scores produced by the model sidecar.
//! lpips = "lpips.jsonl"
//!
//! # Optional CAM heatmap directories, one <image_id>.png per image.
//! [xai]
//! GradCAM = "xai/GradCAM"
//! EigenCAM = "xai/EigenCAM"
//!
//! [params]
//! thresholds = [15, 30]     # MoRH hue thresholds
//! group_threshold = 3       # wins (losses) for the safe (unsafe) group
//! source_hz = 120
//! target_hz = 60
//! pixel_pitch_mm = 0.2767   # physical size of one image pixel on screen
//! viewing_distance_mm = 700
//! # sigma_px = 6.0          # default: half a degree of visual angle
//! top_k = 10
//! strict = false            # fail on any malformed log line
//!
//! [params.ivt]
//! velocity_threshold_deg_s = 30
//! min_duration_ms = 60
//! max_gap_ms = 75
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streetgaze_core::grouping::DEFAULT_GROUP_THRESHOLD;
use streetgaze_core::heatmap::default_sigma;
use streetgaze_core::{CamMethod, IvtParams, ParseMode, ScreenGeometry, HUE_MAX};

use crate::error::{CliError, CliResult};

fn default_thresholds() -> Vec<f64> {
    vec![15.0, 30.0]
}
fn default_group_threshold() -> u32 {
    DEFAULT_GROUP_THRESHOLD
}
fn default_source_hz() -> f64 {
    120.0
}
fn default_target_hz() -> f64 {
    60.0
}
/// A 24-inch 16:9 monitor at 1920 pixels across.
fn default_pixel_pitch() -> f64 {
    0.2767
}
fn default_viewing_distance() -> f64 {
    ScreenGeometry::DEFAULT_VIEWING_DISTANCE_MM
}
fn default_top_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default)]
    pub sigma_px: Option<f64>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_group_threshold")]
    pub group_threshold: u32,
    #[serde(default = "default_source_hz")]
    pub source_hz: f64,
    #[serde(default = "default_target_hz")]
    pub target_hz: f64,
    #[serde(default = "default_pixel_pitch")]
    pub pixel_pitch_mm: f64,
    #[serde(default = "default_viewing_distance")]
    pub viewing_distance_mm: f64,
    #[serde(default)]
    pub ivt: IvtParams,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub strict: bool,
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("every parameter has a default")
    }
}

impl Params {
    pub fn parse_mode(&self) -> ParseMode {
        if self.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    /// Screen geometry for an image shown at `width` x `height` pixels.
    pub fn geometry(&self, width: usize, height: usize) -> CliResult<ScreenGeometry> {
        let g = ScreenGeometry::new(width as u32, height as u32, width as f64 * self.pixel_pitch_mm)?
            .with_viewing_distance(self.viewing_distance_mm)?;
        Ok(g)
    }

    pub fn sigma(&self) -> CliResult<f64> {
        match self.sigma_px {
            Some(s) => Ok(s),
            None => Ok(default_sigma(&self.geometry(1, 1)?)),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    seed: Option<u64>,
    image_dir: Option<PathBuf>,
    segmentation_dir: Option<PathBuf>,
    gaze_logs: Option<Vec<PathBuf>>,
    comparison_log: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    lpips: Option<PathBuf>,
    #[serde(default)]
    xai: BTreeMap<String, PathBuf>,
    #[serde(default)]
    params: Params,
}

/// A validated manifest with absolute paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineManifest {
    pub seed: u64,
    pub image_dir: Option<PathBuf>,
    pub segmentation_dir: PathBuf,
    pub gaze_logs: Vec<PathBuf>,
    pub comparison_log: PathBuf,
    pub output_dir: PathBuf,
    pub lpips: Option<PathBuf>,
    pub xai: BTreeMap<CamMethod, PathBuf>,
    pub params: Params,
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("manifest field `{field}`: {msg}"))
}

impl PipelineManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let raw: ManifestFile = toml::from_str(text)
            .map_err(|e| CliError::validation(format!("manifest is not valid: {e}")))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let dir = |field: &str, p: Option<PathBuf>| -> CliResult<PathBuf> {
            let p = resolve(p.ok_or_else(|| field_error(field, "is required"))?);
            if !p.is_dir() {
                return Err(field_error(field, format!("{} is not a directory", p.display())));
            }
            Ok(p)
        };
        let file = |field: &str, p: PathBuf| -> CliResult<PathBuf> {
            let p = resolve(p);
            if !p.is_file() {
                return Err(field_error(field, format!("{} does not exist", p.display())));
            }
            Ok(p)
        };

        let segmentation_dir = dir("segmentation_dir", raw.segmentation_dir)?;
        let image_dir = raw.image_dir.map(|p| dir("image_dir", Some(p))).transpose()?;
        let gaze_logs = raw
            .gaze_logs
            .ok_or_else(|| field_error("gaze_logs", "is required"))?
            .into_iter()
            .map(|p| file("gaze_logs", p))
            .collect::<CliResult<Vec<_>>>()?;
        if gaze_logs.is_empty() {
            return Err(field_error("gaze_logs", "lists no files"));
        }
        let comparison_log = file(
            "comparison_log",
            raw.comparison_log
                .ok_or_else(|| field_error("comparison_log", "is required"))?,
        )?;
        let output_dir = resolve(
            raw.output_dir
                .ok_or_else(|| field_error("output_dir", "is required"))?,
        );
        let lpips = raw.lpips.map(|p| file("lpips", p)).transpose()?;
        let mut xai = BTreeMap::new();
        for (name, p) in raw.xai {
            let method: CamMethod = name
                .parse()
                .map_err(|_| field_error("xai", format!("unknown CAM method `{name}`")))?;
            xai.insert(method, dir(&format!("xai.{name}"), Some(p))?);
        }

        let params = raw.params;
        if params.thresholds.is_empty() {
            return Err(field_error("params.thresholds", "lists no thresholds"));
        }
        if let Some(t) = params
            .thresholds
            .iter()
            .find(|t| !(0.0..=HUE_MAX).contains(*t))
        {
            return Err(field_error("params.thresholds", format!("{t} is outside [0, 150]")));
        }
        if let Some(s) = params.sigma_px {
            if !(s.is_finite() && s > 0.0) {
                return Err(field_error("params.sigma_px", "must be positive"));
            }
        }
        if !(params.target_hz > 0.0 && params.source_hz >= params.target_hz) {
            return Err(field_error(
                "params.target_hz",
                "must be positive and no greater than params.source_hz",
            ));
        }
        if !(params.pixel_pitch_mm > 0.0 && params.viewing_distance_mm > 0.0) {
            return Err(field_error(
                "params.pixel_pitch_mm",
                "pixel pitch and viewing distance must be positive",
            ));
        }
        if params.group_threshold == 0 {
            return Err(field_error("params.group_threshold", "must be at least 1"));
        }
        if params.top_k == 0 {
            return Err(field_error("params.top_k", "must be at least 1"));
        }

        Ok(Self {
            seed: raw.seed.unwrap_or(0),
            image_dir,
            segmentation_dir,
            gaze_logs,
            comparison_log,
            output_dir,
            lpips,
            xai,
            params,
        })
    }
}
