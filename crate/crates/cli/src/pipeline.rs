//! The analysis stages. Each stage reads its inputs from the manifest or
//! from earlier stages' files under the output directory and writes its own
//! files there, so stages can be run one at a time or all together.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use streetgaze_core::gaze::{parse_fixation_log, split_streams, write_fixation_log};
use streetgaze_core::grouping::{parse_comparison_log, read_group_table, write_group_table};
use streetgaze_core::heatmap::HeatmapMeta;
use streetgaze_core::io::{
    read_heatmap_meta, read_heatmap_png, read_segmentation_png, write_heatmap_meta,
    write_heatmap_png, write_hue_png,
};
use streetgaze_core::segmentation::{read_metric_table, write_metric_table};
use streetgaze_core::similarity::{ingest_lpips, ImageMethodScore, LpipsTable};
use streetgaze_core::{
    accumulate, aggregate_participants, cdf_normalize, classify_fixations_ivt, cosine_element,
    downsample, group_images, hue_encode, l2_rms, moh, mor, morh, parse_gaze_log,
    rank_methods, AttentionAccumulator, AttentionHeatmap, CamMethod, Error as CoreError,
    FixationEvent, GroupLabel, HueMap, LineDiagnostic, MetricKind, ObjectVector,
    SegmentationMap, SimilarityReport,
};

use crate::error::{CliError, CliResult};
use crate::manifest::PipelineManifest;

/// Per-image rows of one metric table.
pub type MetricRows = Vec<(String, ObjectVector)>;

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn fixations(&self) -> PathBuf {
        self.root.join("fixations.jsonl")
    }
    pub fn ingest_summary(&self) -> PathBuf {
        self.root.join("ingest_summary.json")
    }
    pub fn heatmap_dir(&self) -> PathBuf {
        self.root.join("heatmaps")
    }
    pub fn heatmap_png(&self, image_id: &str) -> PathBuf {
        self.heatmap_dir().join(format!("{image_id}.png"))
    }
    pub fn heatmap_meta(&self, image_id: &str) -> PathBuf {
        self.heatmap_dir().join(format!("{image_id}.json"))
    }
    pub fn hue_png(&self, image_id: &str) -> PathBuf {
        self.heatmap_dir().join(format!("{image_id}_hue.png"))
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn metric_table(&self, kind: MetricKind) -> PathBuf {
        let name = match kind {
            MetricKind::Mor => "mor.csv".to_string(),
            MetricKind::Morh { threshold } => format!("morh_t{threshold}.csv"),
            MetricKind::MohAdjusted => "moh.csv".to_string(),
        };
        self.metrics_dir().join(name)
    }
    pub fn groups(&self) -> PathBuf {
        self.root.join("groups.csv")
    }
    pub fn similarity_dir(&self) -> PathBuf {
        self.root.join("similarity")
    }
    pub fn similarity_summary(&self) -> PathBuf {
        self.similarity_dir().join("summary.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn status(&self) -> PathBuf {
        self.root.join("run_status.json")
    }
}

/// Recreates `dir` empty so stale files from earlier runs never mix in.
fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).context("serializing JSON")?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Segmentation maps keyed by image id (the PNG file stem).
pub fn load_segmentations(dir: &Path) -> CliResult<BTreeMap<String, SegmentationMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let maps: Vec<(String, SegmentationMap)> = paths
        .par_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, read_segmentation_png(p)?))
        })
        .collect::<CliResult<_>>()?;
    if maps.is_empty() {
        return Err(CliError::validation(format!(
            "no segmentation maps (*.png) in {}",
            dir.display()
        )));
    }
    Ok(maps.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDiagnostics {
    pub file: String,
    pub records: usize,
    pub diagnostics: Vec<LineDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub files: Vec<FileDiagnostics>,
    pub streams: usize,
    /// Streams whose image has no segmentation map.
    pub skipped_streams: Vec<String>,
    pub fixations: usize,
}

/// Parses gaze logs, downsamples each stream, and detects fixations.
pub fn stage_ingest(m: &PipelineManifest) -> CliResult<IngestSummary> {
    let layout = Layout::new(&m.output_dir);
    fs::create_dir_all(&layout.root)?;
    let segs = load_segmentations(&m.segmentation_dir)?;
    let mode = m.params.parse_mode();

    let mut files = Vec::new();
    let mut samples = Vec::new();
    for path in &m.gaze_logs {
        let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        let parsed = parse_gaze_log(reader, mode).map_err(|e| match e {
            CoreError::Parse { .. } => CliError::validation(format!("{}: {e}", path.display())),
            other => other.into(),
        })?;
        for d in &parsed.diagnostics {
            tracing::warn!(file = %path.display(), line = d.line, "{}", d.message);
        }
        files.push(FileDiagnostics {
            file: file_name(path),
            records: parsed.records.len(),
            diagnostics: parsed.diagnostics,
        });
        samples.extend(parsed.records);
    }

    let streams = split_streams(samples);
    let n_streams = streams.len();
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for (key, mut stream) in streams {
        match segs.get(&key.image_id) {
            Some(seg) => {
                stream.sort_by_key(|s| s.t_ms);
                jobs.push((seg.dims(), stream));
            }
            None => skipped.push(format!("{}/{}", key.session_id, key.image_id)),
        }
    }
    let per_stream: Vec<Vec<FixationEvent>> = jobs
        .par_iter()
        .map(|((w, h), stream)| {
            let geom = m.params.geometry(*w, *h)?;
            let reduced = downsample(stream, m.params.source_hz, m.params.target_hz)?;
            Ok(classify_fixations_ivt(&reduced, &geom, &m.params.ivt))
        })
        .collect::<CliResult<_>>()?;
    let fixations: Vec<FixationEvent> = per_stream.into_iter().flatten().collect();

    let mut w = create(&layout.fixations())?;
    write_fixation_log(&mut w, &fixations)?;
    w.flush()?;
    let summary = IngestSummary {
        files,
        streams: n_streams,
        skipped_streams: skipped,
        fixations: fixations.len(),
    };
    write_json(&layout.ingest_summary(), &summary)?;
    Ok(summary)
}

fn read_fixations(layout: &Layout) -> CliResult<Vec<FixationEvent>> {
    let path = layout.fixations();
    let f = File::open(&path).map_err(|_| {
        CliError::validation(format!("{} is missing; run the ingest stage first", path.display()))
    })?;
    Ok(parse_fixation_log(BufReader::new(f), streetgaze_core::ParseMode::Strict)?.records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub images: Vec<HeatmapMeta>,
}

/// Builds one heatmap per participant and image, then aggregates per image.
pub fn stage_heatmaps(m: &PipelineManifest) -> CliResult<HeatmapSummary> {
    let layout = Layout::new(&m.output_dir);
    let fixations = read_fixations(&layout)?;
    let segs = load_segmentations(&m.segmentation_dir)?;
    let sigma = m.params.sigma()?;
    fresh_dir(&layout.heatmap_dir())?;

    let mut by_image: BTreeMap<&str, BTreeMap<&str, Vec<FixationEvent>>> = BTreeMap::new();
    for f in &fixations {
        by_image
            .entry(&f.image_id)
            .or_default()
            .entry(&f.session_id)
            .or_default()
            .push(f.clone());
    }
    let jobs: Vec<_> = by_image
        .iter()
        .filter_map(|(id, per_session)| segs.get(*id).map(|s| (*id, per_session, s)))
        .collect();

    let images = jobs
        .par_iter()
        .map(|(image_id, per_session, seg)| {
            let (w, h) = seg.dims();
            let maps: Vec<AttentionHeatmap> = per_session
                .values()
                .map(|fx| Ok(cdf_normalize(&accumulate(fx, w, h, sigma)?)))
                .collect::<CliResult<_>>()?;
            let heatmap = aggregate_participants(&maps)?;
            write_heatmap_png(&layout.heatmap_png(image_id), &heatmap)?;
            write_hue_png(&layout.hue_png(image_id), &hue_encode(&heatmap))?;
            let meta = HeatmapMeta {
                image_id: image_id.to_string(),
                width: w,
                height: h,
                participants: maps.len(),
                sigma_px: sigma,
            };
            write_heatmap_meta(&layout.heatmap_meta(image_id), &meta)?;
            Ok(meta)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(HeatmapSummary { images })
}

/// Human hue maps for every image that has an exported heatmap.
fn read_human_hues(
    layout: &Layout,
    segs: &BTreeMap<String, SegmentationMap>,
) -> CliResult<BTreeMap<String, HueMap>> {
    let dir = layout.heatmap_dir();
    if !dir.is_dir() {
        return Err(CliError::validation(format!(
            "{} is missing; run the heatmap stage first",
            dir.display()
        )));
    }
    let ids: Vec<&String> = segs
        .keys()
        .filter(|id| layout.heatmap_meta(id).is_file())
        .collect();
    let hues = ids
        .par_iter()
        .map(|id| {
            let meta = read_heatmap_meta(&layout.heatmap_meta(id))?;
            let heatmap = read_heatmap_png(&layout.heatmap_png(id))?;
            if heatmap.dims() != (meta.width, meta.height) || heatmap.dims() != segs[*id].dims() {
                return Err(CliError::validation(format!(
                    "heatmap for {id} does not match its segmentation map's size"
                )));
            }
            Ok(((*id).clone(), hue_encode(&heatmap)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(hues.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub images: usize,
    pub with_heatmap: usize,
    /// `(image, threshold)` pairs whose highlighted region was empty.
    pub empty_highlight: Vec<(String, f64)>,
}

/// Per-image MoR, MoRH at each threshold, and adjusted MoH tables.
pub fn stage_metrics(m: &PipelineManifest) -> CliResult<MetricsSummary> {
    let layout = Layout::new(&m.output_dir);
    let segs = load_segmentations(&m.segmentation_dir)?;
    let hues = read_human_hues(&layout, &segs)?;
    fresh_dir(&layout.metrics_dir())?;

    let mor_rows: Vec<(String, ObjectVector)> = segs
        .par_iter()
        .map(|(id, seg)| Ok((id.clone(), mor(seg)?)))
        .collect::<CliResult<_>>()?;
    let mut w = create(&layout.metric_table(MetricKind::Mor))?;
    write_metric_table(&mut w, &mor_rows)?;
    w.flush()?;

    let mut empty = Vec::new();
    for &t in &m.params.thresholds {
        let results: Vec<(String, Result<ObjectVector, CoreError>)> = hues
            .par_iter()
            .map(|(id, hue)| (id.clone(), morh(&segs[id], hue, t)))
            .collect();
        let mut rows = Vec::new();
        for (id, r) in results {
            match r {
                Ok(v) => rows.push((id, v)),
                Err(CoreError::EmptyHighlightRegion { .. }) => empty.push((id, t)),
                Err(e) => return Err(e.into()),
            }
        }
        let mut w = create(&layout.metric_table(MetricKind::Morh { threshold: t }))?;
        write_metric_table(&mut w, &rows)?;
        w.flush()?;
    }

    let moh_rows: Vec<(String, ObjectVector)> = hues
        .par_iter()
        .map(|(id, hue)| Ok((id.clone(), moh(&segs[id], hue)?)))
        .collect::<CliResult<_>>()?;
    let mut w = create(&layout.metric_table(MetricKind::MohAdjusted))?;
    write_metric_table(&mut w, &moh_rows)?;
    w.flush()?;

    Ok(MetricsSummary {
        images: segs.len(),
        with_heatmap: hues.len(),
        empty_highlight: empty,
    })
}

/// Safe / unsafe / ambiguous labels from the comparison log.
pub fn stage_group(m: &PipelineManifest) -> CliResult<Vec<GroupLabel>> {
    let layout = Layout::new(&m.output_dir);
    fs::create_dir_all(&layout.root)?;
    let path = &m.comparison_log;
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let parsed = parse_comparison_log(reader, m.params.parse_mode()).map_err(|e| match e {
        CoreError::Parse { .. } => CliError::validation(format!("{}: {e}", path.display())),
        other => other.into(),
    })?;
    for d in &parsed.diagnostics {
        tracing::warn!(file = %path.display(), line = d.line, "{}", d.message);
    }
    let labels = group_images(&parsed.records, m.params.group_threshold);
    let mut w = create(&layout.groups())?;
    write_group_table(&mut w, &labels)?;
    w.flush()?;
    Ok(labels)
}

/// Standardizes a CAM heatmap: rank-normalize its activations, then encode
/// on the hue scale.
fn standardize_cam(heatmap: &AttentionHeatmap) -> CliResult<HueMap> {
    let acc = AttentionAccumulator::from_grid(heatmap.cells().clone())?;
    Ok(hue_encode(&cdf_normalize(&acc)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub report: Option<SimilarityReport>,
    /// `(image, method)` heatmaps the manifest's directories did not contain.
    pub missing_heatmaps: Vec<(String, CamMethod)>,
    pub missing_lpips: Vec<(String, CamMethod)>,
    /// Rows whose element cosine was forced to 0 by an all-zero vector.
    pub zero_cosine: Vec<(String, CamMethod)>,
}

/// Scene and element similarity between human and CAM heatmaps.
pub fn stage_compare(m: &PipelineManifest) -> CliResult<CompareSummary> {
    let layout = Layout::new(&m.output_dir);
    fresh_dir(&layout.similarity_dir())?;
    if m.xai.is_empty() {
        let summary = CompareSummary {
            report: None,
            missing_heatmaps: Vec::new(),
            missing_lpips: Vec::new(),
            zero_cosine: Vec::new(),
        };
        write_json(&layout.similarity_summary(), &summary)?;
        return Ok(summary);
    }
    let segs = load_segmentations(&m.segmentation_dir)?;
    let hues = read_human_hues(&layout, &segs)?;
    let lpips = match &m.lpips {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            ingest_lpips(BufReader::new(f))
                .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
        }
        None => LpipsTable::default(),
    };

    let jobs: Vec<(&String, CamMethod, PathBuf)> = hues
        .keys()
        .flat_map(|id| {
            m.xai
                .iter()
                .map(move |(method, dir)| (id, *method, dir.join(format!("{id}.png"))))
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|(id, method, path)| {
            if !path.is_file() {
                return Ok(Err((id.to_string(), *method)));
            }
            let seg = &segs[*id];
            let human = &hues[*id];
            let machine = standardize_cam(&read_heatmap_png(path)?)?;
            if machine.dims() != human.dims() {
                return Err(CliError::validation(format!(
                    "{} is {:?} but the image is {:?}",
                    path.display(),
                    machine.dims(),
                    human.dims()
                )));
            }
            let cosine = cosine_element(&moh(seg, human)?, &moh(seg, &machine)?)?;
            let row = ImageMethodScore {
                image_id: id.to_string(),
                method: *method,
                l2: l2_rms(human, &machine)?,
                lpips: lpips.get(id, *method),
                cosine: cosine.value,
            };
            Ok(Ok((row, cosine.zero_vector)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut missing_heatmaps = Vec::new();
    let mut zero_cosine = Vec::new();
    for r in results {
        match r {
            Ok((row, zero)) => {
                if zero {
                    zero_cosine.push((row.image_id.clone(), row.method));
                }
                rows.push(row);
            }
            Err(miss) => missing_heatmaps.push(miss),
        }
    }
    let missing_lpips: Vec<(String, CamMethod)> = rows
        .iter()
        .filter(|r| r.lpips.is_none())
        .map(|r| (r.image_id.clone(), r.method))
        .collect();

    let mut w = create(&layout.similarity_dir().join("scores.csv"))?;
    writeln!(w, "image_id,method,l2,lpips,cosine")?;
    for r in &rows {
        let lp = r.lpips.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{lp},{}", r.image_id, r.method, r.l2, r.cosine)?;
    }
    w.flush()?;

    let report = match rank_methods(&rows) {
        Ok(report) => {
            let mut t = create(&layout.similarity_dir().join("table.txt"))?;
            t.write_all(report.render_table().as_bytes())?;
            t.flush()?;
            Some(report)
        }
        Err(CoreError::InsufficientData(msg)) => {
            tracing::warn!("method ranking skipped: {msg}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let summary = CompareSummary {
        report,
        missing_heatmaps,
        missing_lpips,
        zero_cosine,
    };
    write_json(&layout.similarity_summary(), &summary)?;
    Ok(summary)
}

/// Metric tables as written by the metrics stage, in threshold order.
pub fn read_metric_tables(
    m: &PipelineManifest,
) -> CliResult<Vec<(MetricKind, MetricRows)>> {
    let layout = Layout::new(&m.output_dir);
    let kinds = std::iter::once(MetricKind::Mor)
        .chain(m.params.thresholds.iter().map(|&t| MetricKind::Morh { threshold: t }))
        .chain(std::iter::once(MetricKind::MohAdjusted));
    kinds
        .map(|kind| {
            let path = layout.metric_table(kind);
            let text = fs::read_to_string(&path).map_err(|_| {
                CliError::validation(format!("{} is missing; run the metrics stage first", path.display()))
            })?;
            Ok((kind, read_metric_table(&text)?))
        })
        .collect()
}

pub fn read_groups(m: &PipelineManifest) -> CliResult<Vec<GroupLabel>> {
    let path = Layout::new(&m.output_dir).groups();
    let text = fs::read_to_string(&path).map_err(|_| {
        CliError::validation(format!("{} is missing; run the group stage first", path.display()))
    })?;
    Ok(read_group_table(&text)?)
}

pub fn read_compare_summary(m: &PipelineManifest) -> CliResult<Option<CompareSummary>> {
    let path = Layout::new(&m.output_dir).similarity_summary();
    match fs::read(&path) {
        Ok(bytes) => Ok(Some(
            serde_json::from_slice(&bytes).context("reading similarity summary")?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}
