//! Synthetic studies for smoke tests and demos.
//!
//! A simulated study draws segmentation maps with a street-scene layout,
//! runs participants through the survey service (balanced pair scheduling,
//! choices from a latent per-image score, gaze streamed per image), and
//! writes everything the analysis pipeline reads, including stand-in CAM
//! heatmaps and LPIPS scores, plus a ready-to-run manifest.
//!
//! ```toml
//! seed = 7
//! images = 8
//! participants = 5
//! pairs_per_session = 10
//! width = 160
//! height = 120
//! sample_hz = 120
//! view_ms = 3000
//! record_gaze = true
//!
//! # Share of fixations that land on each class, by name or index.
//! [bias]
//! car = 0.6
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use streetgaze_core::classes::class_index;
use streetgaze_core::io::{write_heatmap_png, write_segmentation_png};
use streetgaze_core::rng::{indexed_substream, substream};
use streetgaze_core::similarity::{write_lpips, LpipsTable};
use streetgaze_core::{
    cdf_normalize, hue_encode, l2_rms, AttentionAccumulator, AttentionHeatmap, CamMethod, Grid,
    SegmentationMap, Side, Stratum, NUM_CLASSES, UNLABELED,
};
use streetgaze_service::model::AGE_BANDS;
use streetgaze_service::{
    Demographics, ExportOptions, GazeSampleIn, Gender, ManualClock, ServiceError, StudyConfig,
    SurveyService,
};

use crate::error::{CliError, CliResult};

const SKY: u8 = 2;
const BUILDING: u8 = 1;
const SIDEWALK: u8 = 11;
const ROAD: u8 = 6;
/// Street furniture and traffic drawn as rectangles.
const OBJECTS: [u8; 8] = [4, 12, 20, 43, 83, 93, 127, 136];

fn default_images() -> usize {
    8
}
fn default_participants() -> usize {
    5
}
fn default_pairs() -> u32 {
    10
}
fn default_width() -> usize {
    160
}
fn default_height() -> usize {
    120
}
fn default_sample_hz() -> f64 {
    120.0
}
fn default_view_ms() -> u64 {
    3000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_images")]
    pub images: usize,
    #[serde(default = "default_participants")]
    pub participants: usize,
    #[serde(default = "default_pairs")]
    pub pairs_per_session: u32,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_sample_hz")]
    pub sample_hz: f64,
    /// Viewing time per pair, split between the two images.
    #[serde(default = "default_view_ms")]
    pub view_ms: u64,
    #[serde(default = "default_true")]
    pub record_gaze: bool,
    #[serde(default)]
    pub bias: BTreeMap<String, f64>,
}

impl SimulationConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| CliError::validation(format!("simulation config is not valid: {e}")))?;
        if cfg.images < 2 {
            return Err(CliError::validation("a simulated study needs at least 2 images"));
        }
        if cfg.width < 32 || cfg.height < 32 {
            return Err(CliError::validation("images must be at least 32x32 pixels"));
        }
        if !(cfg.sample_hz >= 60.0 && cfg.sample_hz <= 2000.0) {
            return Err(CliError::validation("sample_hz must lie in [60, 2000]"));
        }
        if cfg.view_ms < 500 {
            return Err(CliError::validation("view_ms must be at least 500"));
        }
        cfg.bias_classes()?;
        Ok(cfg)
    }

    /// Bias weights keyed by class index.
    pub fn bias_classes(&self) -> CliResult<BTreeMap<u8, f64>> {
        let mut out = BTreeMap::new();
        for (key, &w) in &self.bias {
            let class = key
                .parse::<usize>()
                .ok()
                .filter(|&c| c < NUM_CLASSES)
                .or_else(|| class_index(key))
                .ok_or_else(|| CliError::validation(format!("bias: unknown class `{key}`")))?;
            if !(w.is_finite() && w > 0.0) {
                return Err(CliError::validation(format!("bias: weight for `{key}` must be positive")));
            }
            out.insert(class as u8, w);
        }
        let total: f64 = out.values().sum();
        if total > 0.95 {
            return Err(CliError::validation("bias weights must sum to at most 0.95"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub images: usize,
    pub sessions: usize,
    pub comparisons: usize,
    pub gaze_samples: usize,
    pub manifest: PathBuf,
}

/// Draws a street scene: sky, buildings, sidewalk and road bands, with
/// objects in disjoint slots. Biased classes always appear.
pub fn synth_segmentation(cfg: &SimulationConfig, index: usize, bias: &BTreeMap<u8, f64>) -> SegmentationMap {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = indexed_substream(cfg.seed, "sim/segmentation", index as u64);
    let sky_end = h / 4 + rng.random_range(0..=h / 12);
    let building_end = h / 2;
    let sidewalk_end = h * 5 / 8;
    let mut labels = Grid::from_fn(w, h, |row, _| match row {
        r if r < sky_end => SKY,
        r if r < building_end => BUILDING,
        r if r < sidewalk_end => SIDEWALK,
        _ => ROAD,
    });

    let mut classes: Vec<u8> = bias.keys().copied().collect();
    let extra = rng.random_range(1..=3);
    for _ in 0..extra {
        let c = *OBJECTS.choose(&mut rng).expect("non-empty");
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let slots = 4;
    let slot_w = w / slots;
    let obj_w = slot_w * 3 / 4;
    let obj_h = h / 6;
    let top = h * 9 / 20;
    for (slot, &class) in classes.iter().take(slots * 2).enumerate() {
        let x0 = (slot % slots) * slot_w + rng.random_range(0..=slot_w - obj_w);
        let y0 = top + (slot / slots) * (obj_h + 2) + rng.random_range(0..=2);
        for y in y0..(y0 + obj_h).min(h) {
            for x in x0..x0 + obj_w {
                *labels.get_mut(y, x) = class;
            }
        }
    }
    for y in 0..2 {
        for x in 0..2 {
            *labels.get_mut(y, x) = UNLABELED;
        }
    }
    SegmentationMap::new(labels).expect("labels are in range")
}

/// Where attention is expected to go: 1 on biased classes, 0.1 elsewhere.
fn expected_saliency(seg: &SegmentationMap, bias: &BTreeMap<u8, f64>) -> Grid<f64> {
    seg.labels().map(|l| bias.get(l).map_or(0.1, |w| 0.1 + w * 1.5))
}

/// A bias weight and the pixels of its class.
type Target = (f64, Vec<(usize, usize)>);

fn pixels_of(seg: &SegmentationMap, classes: &[u8]) -> Vec<(usize, usize)> {
    let labels = seg.labels();
    let mut out = Vec::new();
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            if classes.contains(labels.get(y, x)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Gaze samples for one viewing interval on one image, starting at `t0`.
/// Fixations of 150-400 ms at chosen targets, joined by fast saccades, with
/// occasional blinks recorded as invalid samples.
fn synth_gaze(
    rng: &mut impl Rng,
    seg: &SegmentationMap,
    by_class: &[Target],
    t0: u64,
    duration_ms: u64,
    sample_hz: f64,
    out: &mut Vec<GazeSampleIn>,
) -> u64 {
    let (w, h) = seg.dims();
    let dt = 1000.0 / sample_hz;
    let end = t0 + duration_ms;
    let mut t = t0 as f64;
    let mut pos: Option<(f64, f64)> = None;
    while (t as u64) < end {
        let roll: f64 = rng.random();
        let mut acc = 0.0;
        let mut target = None;
        for (weight, pixels) in by_class {
            acc += weight;
            if roll < acc && !pixels.is_empty() {
                target = pixels.choose(rng).copied();
                break;
            }
        }
        let (tx, ty) = target.unwrap_or_else(|| (rng.random_range(0..w), rng.random_range(0..h)));
        let (tx, ty) = (tx as f64 + 0.5, ty as f64 + 0.5);
        if let Some((px, py)) = pos {
            for step in 1..=2 {
                let f = step as f64 / 3.0;
                out.push(GazeSampleIn {
                    t_ms: t as u64,
                    x_px: Some(px + (tx - px) * f),
                    y_px: Some(py + (ty - py) * f),
                    valid: true,
                });
                t += dt;
            }
        }
        if rng.random_bool(0.05) {
            for _ in 0..3 {
                out.push(GazeSampleIn {
                    t_ms: t as u64,
                    x_px: None,
                    y_px: None,
                    valid: false,
                });
                t += dt;
            }
        }
        let fixation_end = t + rng.random_range(150.0..400.0);
        while t < fixation_end && (t as u64) < end {
            out.push(GazeSampleIn {
                t_ms: t as u64,
                x_px: Some((tx + rng.random_range(-0.3..0.3)).clamp(0.0, w as f64 - 0.01)),
                y_px: Some((ty + rng.random_range(-0.3..0.3)).clamp(0.0, h as f64 - 0.01)),
                valid: true,
            });
            t += dt;
        }
        pos = Some((tx, ty));
    }
    t.ceil() as u64
}

/// Stand-in CAM heatmap: the expected saliency blended with
/// method-specific noise.
fn synth_cam(seed: u64, method: CamMethod, image: usize, saliency: &Grid<f64>) -> CliResult<AttentionHeatmap> {
    let mut rng = indexed_substream(seed, &format!("sim/cam/{method}"), image as u64);
    let fidelity = 0.1 + 0.12 * (method as usize as f64);
    let raw = saliency.map(|&s| fidelity * s + (1.0 - fidelity) * rng.random::<f64>());
    Ok(cdf_normalize(&AttentionAccumulator::from_grid(raw)?))
}

/// Runs a simulated study and writes its inputs and a pipeline manifest
/// into `out`.
pub fn simulate(cfg: &SimulationConfig, out: &Path) -> CliResult<SimulationSummary> {
    let bias = cfg.bias_classes()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seg_dir = out.join("segmentation");
    fs::create_dir_all(&seg_dir)?;

    let ids: Vec<String> = (0..cfg.images).map(|i| format!("img{i:03}")).collect();
    let segs: Vec<SegmentationMap> = (0..cfg.images).map(|i| synth_segmentation(cfg, i, &bias)).collect();
    for (id, seg) in ids.iter().zip(&segs) {
        write_segmentation_png(&seg_dir.join(format!("{id}.png")), seg)?;
    }
    let seg_of: BTreeMap<&str, &SegmentationMap> = ids.iter().map(String::as_str).zip(&segs).collect();
    let targets: BTreeMap<&str, Vec<Target>> = seg_of
        .iter()
        .map(|(id, seg)| (*id, bias.iter().map(|(c, w)| (*w, pixels_of(seg, &[*c]))).collect()))
        .collect();

    let mut latent_rng = substream(cfg.seed, "sim/latent");
    let latent: BTreeMap<&str, f64> = ids.iter().map(|id| (id.as_str(), latent_rng.random_range(-2.0..2.0))).collect();

    let mut study = StudyConfig::from_ids(ids.iter().map(|id| (id.clone(), Stratum::Medium)), cfg.seed)?;
    study.pairs_per_session = cfg.pairs_per_session;
    let study = study.validated()?;
    let clock = Arc::new(ManualClock::at(1_700_000_000_000));
    let mut svc = SurveyService::in_memory(study, clock.clone());

    let genders = [Gender::Female, Gender::Male, Gender::NonBinary, Gender::Undisclosed];
    for p in 0..cfg.participants {
        let mut rng = indexed_substream(cfg.seed, "sim/participant", p as u64);
        let demographics = Demographics {
            age_band: AGE_BANDS.choose(&mut rng).expect("non-empty").to_string(),
            gender: Some(*genders.choose(&mut rng).expect("non-empty")),
        };
        let session = svc.create_session(demographics)?;
        let sid = session.session_id;
        let mut t = 0u64;
        loop {
            let pair = match svc.next_pair(&sid) {
                Ok(pair) => pair,
                Err(ServiceError::NoMorePairs(_) | ServiceError::Exhausted(_)) => break,
                Err(e) => return Err(e.into()),
            };
            if cfg.record_gaze {
                let half = cfg.view_ms / 2;
                let mut batches: BTreeMap<&str, Vec<GazeSampleIn>> = BTreeMap::new();
                for (k, image) in [&pair.left_image, &pair.right_image, &pair.left_image, &pair.right_image]
                    .into_iter()
                    .enumerate()
                {
                    let seg = seg_of[image.as_str()];
                    let span = if k < 2 { half * 2 / 3 } else { half - half * 2 / 3 };
                    let batch = batches.entry(image.as_str()).or_default();
                    t = synth_gaze(&mut rng, seg, &targets[image.as_str()], t, span, cfg.sample_hz, batch);
                }
                for (image, samples) in batches {
                    svc.record_gaze_batch(&sid, image, &samples)?;
                }
            }
            let diff = latent[pair.left_image.as_str()] - latent[pair.right_image.as_str()];
            let p_left = 1.0 / (1.0 + (-1.5 * diff).exp());
            let side = if rng.random_bool(p_left) { Side::Left } else { Side::Right };
            clock.advance(cfg.view_ms + rng.random_range(200..1200));
            t += 500;
            svc.record_choice(&sid, &pair.pair_id, side)?;
        }
    }

    let export = svc.export_logs(out, ExportOptions::default())?;
    let mut exposure = String::from("image_id,exposure\n");
    for (id, n) in svc.exposure_table() {
        exposure.push_str(&format!("{id},{n}\n"));
    }
    fs::write(out.join("exposure.csv"), exposure)?;
    let stats = serde_json::to_string_pretty(&svc.exposure_stats()).context("serializing exposure")?;
    fs::write(out.join("exposure_summary.json"), stats + "\n")?;

    let mut lpips = LpipsTable::default();
    for method in CamMethod::ALL {
        let dir = out.join("xai").join(method.name());
        fs::create_dir_all(&dir)?;
        for (i, (id, seg)) in ids.iter().zip(&segs).enumerate() {
            let saliency = expected_saliency(seg, &bias);
            let cam = synth_cam(cfg.seed, method, i, &saliency)?;
            write_heatmap_png(&dir.join(format!("{id}.png")), &cam)?;
            let expected = hue_encode(&cdf_normalize(&AttentionAccumulator::from_grid(saliency)?));
            let d = l2_rms(&hue_encode(&cam), &expected)?;
            lpips.scores.insert((id.clone(), method), (0.15 + 0.7 * d).clamp(0.0, 1.0));
        }
    }
    let mut f = fs::File::create(out.join("lpips.jsonl"))?;
    write_lpips(&mut f, &lpips)?;

    let xai: String = CamMethod::ALL
        .iter()
        .map(|m| format!("{m} = \"xai/{m}\"\n"))
        .collect();
    let manifest = format!(
        "seed = {seed}\n\
         segmentation_dir = \"segmentation\"\n\
         gaze_logs = [\"gaze.jsonl\"]\n\
         comparison_log = \"comparisons.jsonl\"\n\
         output_dir = \"out\"\n\
         lpips = \"lpips.jsonl\"\n\
         \n[xai]\n{xai}\n\
         [params]\n\
         thresholds = [15, 30]\n\
         source_hz = {hz}\n\
         target_hz = 60\n\
         # Simulated images are small; one millimetre per pixel keeps the\n\
         # splat a few pixels wide.\n\
         pixel_pitch_mm = 1.0\n",
        seed = cfg.seed,
        hz = cfg.sample_hz,
    );
    let manifest_path = out.join("manifest.toml");
    fs::write(&manifest_path, manifest)?;

    Ok(SimulationSummary {
        images: cfg.images,
        sessions: export.sessions,
        comparisons: export.comparisons,
        gaze_samples: export.gaze_samples,
        manifest: manifest_path,
    })
}
