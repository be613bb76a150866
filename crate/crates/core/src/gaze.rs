//! Eye-tracker sample ingestion and velocity-threshold fixation detection.
//!
//! The pipeline for one recording is
//! [`parse_gaze_log`] → [`split_streams`] → [`downsample`] →
//! [`filter_invalid`] → [`classify_fixations_ivt`].

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::jsonl::{self, ParseMode, Parsed};

pub const GAZE_LOG_SCHEMA: &str = "streetgaze.gaze/1";
pub const FIXATION_LOG_SCHEMA: &str = "streetgaze.fixations/1";

/// Timestamp regressions up to this many milliseconds are clamped forward.
pub const MAX_CLAMPED_REGRESSION_MS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    Invalid,
}

#[derive(Debug, Clone)]
pub struct RawGazeSample {
    pub session_id: String,
    pub image_id: String,
    /// Milliseconds since session start.
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
    pub validity: Validity,
}

/// Coordinates compare equal when both are NaN, so invalid samples compare
/// by identity and time.
impl PartialEq for RawGazeSample {
    fn eq(&self, other: &Self) -> bool {
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.session_id == other.session_id
            && self.image_id == other.image_id
            && self.t_ms == other.t_ms
            && same(self.x, other.x)
            && same(self.y, other.y)
            && self.validity == other.validity
    }
}

impl RawGazeSample {
    pub fn valid(session_id: &str, image_id: &str, t_ms: u64, x: f64, y: f64) -> Self {
        Self {
            session_id: session_id.to_string(),
            image_id: image_id.to_string(),
            t_ms,
            x,
            y,
            validity: Validity::Valid,
        }
    }

    pub fn invalid(session_id: &str, image_id: &str, t_ms: u64) -> Self {
        Self {
            session_id: session_id.to_string(),
            image_id: image_id.to_string(),
            t_ms,
            x: f64::NAN,
            y: f64::NAN,
            validity: Validity::Invalid,
        }
    }

    pub fn is_usable(&self) -> bool {
        self.validity == Validity::Valid && self.x.is_finite() && self.y.is_finite()
    }

    pub fn stream_key(&self) -> StreamKey {
        StreamKey {
            session_id: self.session_id.clone(),
            image_id: self.image_id.clone(),
        }
    }
}

/// Identity of one recording: a participant looking at one image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub session_id: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationEvent {
    pub session_id: String,
    pub image_id: String,
    #[serde(rename = "cx_px")]
    pub cx: f64,
    #[serde(rename = "cy_px")]
    pub cy: f64,
    pub start_ms: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width_px: u32,
    pub height_px: u32,
    pub physical_width_mm: f64,
    #[serde(default = "default_viewing_distance")]
    pub viewing_distance_mm: f64,
}

fn default_viewing_distance() -> f64 {
    ScreenGeometry::DEFAULT_VIEWING_DISTANCE_MM
}

impl ScreenGeometry {
    pub const DEFAULT_VIEWING_DISTANCE_MM: f64 = 700.0;

    pub fn new(width_px: u32, height_px: u32, physical_width_mm: f64) -> Result<Self> {
        Self {
            width_px,
            height_px,
            physical_width_mm,
            viewing_distance_mm: Self::DEFAULT_VIEWING_DISTANCE_MM,
        }
        .validated()
    }

    pub fn with_viewing_distance(mut self, mm: f64) -> Result<Self> {
        self.viewing_distance_mm = mm;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.width_px == 0
            || self.height_px == 0
            || !positive(self.physical_width_mm)
            || !positive(self.viewing_distance_mm)
        {
            return Err(invalid(format!(
                "screen geometry must be strictly positive: {self:?}"
            )));
        }
        Ok(self)
    }

    /// Millimetres per pixel.
    pub fn pixel_pitch_mm(&self) -> f64 {
        self.physical_width_mm / f64::from(self.width_px)
    }

    /// Visual angle of a pixel displacement, small-angle approximation.
    pub fn degrees_for_pixels(&self, pixels: f64) -> f64 {
        (pixels * self.pixel_pitch_mm() / self.viewing_distance_mm).to_degrees()
    }

    /// On-screen extent, in pixels, of a visual angle of `degrees`.
    pub fn pixels_for_degrees(&self, degrees: f64) -> f64 {
        self.viewing_distance_mm * degrees.to_radians().tan() / self.pixel_pitch_mm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvtParams {
    pub velocity_threshold_deg_s: f64,
    pub min_duration_ms: u64,
    /// Two samples further apart than this never belong to one fixation.
    pub max_gap_ms: u64,
}

impl Default for IvtParams {
    fn default() -> Self {
        Self {
            velocity_threshold_deg_s: 30.0,
            min_duration_ms: 60,
            max_gap_ms: 75,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GazeRecord {
    session_id: String,
    image_id: String,
    t_ms: u64,
    x_px: Option<f64>,
    y_px: Option<f64>,
    valid: bool,
}

/// Parses the line-delimited gaze exchange format.
///
/// Within one `(session_id, image_id)` stream, timestamps that step back by at
/// most [`MAX_CLAMPED_REGRESSION_MS`] are clamped forward; larger regressions
/// make the line malformed.
pub fn parse_gaze_log<R: BufRead>(reader: R, mode: ParseMode) -> Result<Parsed<RawGazeSample>> {
    let mut last_t: HashMap<StreamKey, u64> = HashMap::new();
    jsonl::read_records(reader, GAZE_LOG_SCHEMA, mode, |rec: GazeRecord| {
        let (x, y) = match (rec.x_px, rec.y_px) {
            (Some(x), Some(y)) => (x, y),
            _ if !rec.valid => (f64::NAN, f64::NAN),
            _ => return Err("valid sample without coordinates".to_string()),
        };
        let key = StreamKey {
            session_id: rec.session_id,
            image_id: rec.image_id,
        };
        let mut t_ms = rec.t_ms;
        if let Some(&prev) = last_t.get(&key) {
            if t_ms < prev {
                if prev - t_ms > MAX_CLAMPED_REGRESSION_MS {
                    return Err(format!(
                        "timestamp {t_ms} regresses {} ms behind {prev}",
                        prev - t_ms
                    ));
                }
                t_ms = prev;
            }
        }
        last_t.insert(key.clone(), t_ms);
        Ok(RawGazeSample {
            session_id: key.session_id,
            image_id: key.image_id,
            t_ms,
            x,
            y,
            validity: if rec.valid {
                Validity::Valid
            } else {
                Validity::Invalid
            },
        })
    })
}

pub fn write_gaze_log<'a, W: Write>(
    mut w: W,
    samples: impl IntoIterator<Item = &'a RawGazeSample>,
) -> std::io::Result<()> {
    jsonl::write_header(&mut w, GAZE_LOG_SCHEMA)?;
    for s in samples {
        let finite = s.x.is_finite() && s.y.is_finite();
        let rec = GazeRecord {
            session_id: s.session_id.clone(),
            image_id: s.image_id.clone(),
            t_ms: s.t_ms,
            x_px: finite.then_some(s.x),
            y_px: finite.then_some(s.y),
            valid: s.validity == Validity::Valid,
        };
        jsonl::write_record(&mut w, &rec)?;
    }
    Ok(())
}

pub fn parse_fixation_log<R: BufRead>(reader: R, mode: ParseMode) -> Result<Parsed<FixationEvent>> {
    jsonl::read_records(reader, FIXATION_LOG_SCHEMA, mode, |f: FixationEvent| {
        if f.duration_ms == 0 {
            Err("fixation with zero duration".to_string())
        } else if !(f.cx.is_finite() && f.cy.is_finite()) {
            Err("fixation centroid is not finite".to_string())
        } else {
            Ok(f)
        }
    })
}

pub fn write_fixation_log<'a, W: Write>(
    mut w: W,
    fixations: impl IntoIterator<Item = &'a FixationEvent>,
) -> std::io::Result<()> {
    jsonl::write_header(&mut w, FIXATION_LOG_SCHEMA)?;
    for f in fixations {
        jsonl::write_record(&mut w, f)?;
    }
    Ok(())
}

/// Groups samples by `(session_id, image_id)`, preserving file order within
/// each stream. Streams come out in key order.
pub fn split_streams(
    samples: impl IntoIterator<Item = RawGazeSample>,
) -> BTreeMap<StreamKey, Vec<RawGazeSample>> {
    let mut streams: BTreeMap<StreamKey, Vec<RawGazeSample>> = BTreeMap::new();
    for s in samples {
        streams.entry(s.stream_key()).or_default().push(s);
    }
    streams
}

/// Reduces a stream to roughly `target_hz` by bucketing time into
/// `1/target_hz` windows and keeping one sample per window: the first valid
/// one, or the first sample if none in the window is valid.
pub fn downsample(
    samples: &[RawGazeSample],
    source_hz: f64,
    target_hz: f64,
) -> Result<Vec<RawGazeSample>> {
    if !(source_hz.is_finite() && target_hz.is_finite() && target_hz > 0.0) {
        return Err(invalid(format!(
            "sample rates must be positive and finite (source {source_hz}, target {target_hz})"
        )));
    }
    if source_hz < target_hz {
        return Err(invalid(format!(
            "cannot downsample from {source_hz} Hz up to {target_hz} Hz"
        )));
    }
    if source_hz == target_hz {
        return Ok(samples.to_vec());
    }

    let bucket_of = |s: &RawGazeSample| (s.t_ms as f64 * target_hz / 1000.0).floor() as u64;
    let mut out: Vec<RawGazeSample> = Vec::new();
    // (stream, bucket) of the window currently open, and whether its kept
    // sample is valid yet.
    let mut open: Option<(StreamKey, u64, bool)> = None;
    for s in samples {
        let bucket = bucket_of(s);
        let usable = s.is_usable();
        match &mut open {
            Some((key, b, has_valid))
                if *b == bucket && key.session_id == s.session_id && key.image_id == s.image_id =>
            {
                if !*has_valid && usable {
                    *out.last_mut().expect("open window has a sample") = s.clone();
                    *has_valid = true;
                }
            }
            _ => {
                out.push(s.clone());
                open = Some((s.stream_key(), bucket, usable));
            }
        }
    }
    Ok(out)
}

/// Drops blinks and other samples the tracker marked invalid, plus any
/// sample with non-finite coordinates.
pub fn filter_invalid(samples: &[RawGazeSample]) -> Vec<RawGazeSample> {
    samples.iter().filter(|s| s.is_usable()).cloned().collect()
}

/// Angular velocity in degrees per second between two samples.
pub fn angular_velocity(a: &RawGazeSample, b: &RawGazeSample, geom: &ScreenGeometry) -> f64 {
    let dist_px = (b.x - a.x).hypot(b.y - a.y);
    let dt_ms = b.t_ms.saturating_sub(a.t_ms);
    if dt_ms == 0 {
        return if dist_px == 0.0 { 0.0 } else { f64::INFINITY };
    }
    geom.degrees_for_pixels(dist_px) / (dt_ms as f64 / 1000.0)
}

/// Velocity-threshold fixation identification for a single stream.
///
/// Consecutive samples whose angular velocity is below the threshold (and
/// that are no more than `max_gap_ms` apart) are chained; every maximal
/// chain is a fixation candidate spanning from its first to its last sample.
/// Candidates shorter than `min_duration_ms` (or of zero duration) are
/// dropped. Centroids are unweighted sample means clamped to the screen.
pub fn classify_fixations_ivt(
    samples: &[RawGazeSample],
    geom: &ScreenGeometry,
    params: &IvtParams,
) -> Vec<FixationEvent> {
    let usable: Vec<&RawGazeSample> = samples.iter().filter(|s| s.is_usable()).collect();
    let mut out = Vec::new();
    if usable.len() < 2 {
        return out;
    }

    let emit = |chain: &[&RawGazeSample], out: &mut Vec<FixationEvent>| {
        let (first, last) = (chain[0], chain[chain.len() - 1]);
        let duration = last.t_ms - first.t_ms;
        if duration == 0 || duration < params.min_duration_ms {
            return;
        }
        let n = chain.len() as f64;
        let cx = chain.iter().map(|s| s.x).sum::<f64>() / n;
        let cy = chain.iter().map(|s| s.y).sum::<f64>() / n;
        out.push(FixationEvent {
            session_id: first.session_id.clone(),
            image_id: first.image_id.clone(),
            cx: cx.clamp(0.0, f64::from(geom.width_px)),
            cy: cy.clamp(0.0, f64::from(geom.height_px)),
            start_ms: first.t_ms,
            duration_ms: duration,
        });
    };

    let mut start = 0;
    for i in 1..usable.len() {
        let (prev, cur) = (usable[i - 1], usable[i]);
        let gap = cur.t_ms.saturating_sub(prev.t_ms) > params.max_gap_ms;
        let slow = angular_velocity(prev, cur, geom) < params.velocity_threshold_deg_s;
        if gap || !slow {
            emit(&usable[start..i], &mut out);
            start = i;
        }
    }
    emit(&usable[start..], &mut out);
    out
}
