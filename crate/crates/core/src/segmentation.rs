//! Object-attention metrics over semantic segmentation maps.
//!
//! * **MoR** – per-class share of all pixels in the image.
//! * **MoRH** – per-class share of the highlighted pixels (hue `<= t`).
//! * **MoH (adjusted)** – `150 - mean hue` over a class's pixels, so larger
//!   values mean more attention.
//!
//! Per-image vectors are averaged across images with [`mean_over_images`]
//! and ranked with [`top_k`].

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classes::{class_name, NUM_CLASSES, UNLABELED};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::heatmap::{HueMap, HUE_MAX};

/// Per-pixel class labels; [`UNLABELED`] marks pixels without a class.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Grid<u8>,
}

impl SegmentationMap {
    pub fn new(labels: Grid<u8>) -> Result<Self> {
        if let Some(bad) = labels
            .as_slice()
            .iter()
            .find(|&&l| l != UNLABELED && usize::from(l) >= NUM_CLASSES)
        {
            return Err(Error::Validation(format!(
                "label {bad} is neither a class index below {NUM_CLASSES} nor {UNLABELED}"
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn unlabeled_fraction(&self) -> f64 {
        let n = self.labels.len();
        if n == 0 {
            return 0.0;
        }
        self.labels.as_slice().iter().filter(|&&l| l == UNLABELED).count() as f64 / n as f64
    }

    fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &l in self.labels.as_slice() {
            if l != UNLABELED {
                counts[usize::from(l)] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MetricKind {
    #[serde(rename = "MoR")]
    Mor,
    #[serde(rename = "MoRH")]
    Morh { threshold: f64 },
    #[serde(rename = "MoH_adjusted")]
    MohAdjusted,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MoR" => Ok(MetricKind::Mor),
            "MoH_adjusted" => Ok(MetricKind::MohAdjusted),
            _ => s
                .strip_prefix("MoRH@")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| (0.0..=HUE_MAX).contains(t))
                .map(|threshold| MetricKind::Morh { threshold })
                .ok_or_else(|| Error::Validation(format!("unknown metric kind `{s}`"))),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Mor => f.write_str("MoR"),
            MetricKind::Morh { threshold } => write!(f, "MoRH@{threshold}"),
            MetricKind::MohAdjusted => f.write_str("MoH_adjusted"),
        }
    }
}

/// One value per class. `None` marks an object that is absent from the
/// image (MoH) or from its highlighted region (MoRH).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectVector {
    pub kind: MetricKind,
    pub values: Vec<Option<f64>>,
}

impl ObjectVector {
    pub fn get(&self, class: usize) -> Option<f64> {
        self.values.get(class).copied().flatten()
    }

    /// Values with missing entries read as zero.
    pub fn dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(0.0)).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Share of the whole image covered by each class.
pub fn mor(seg: &SegmentationMap) -> Result<ObjectVector> {
    let total = seg.labels.len();
    if total == 0 {
        return Err(invalid("segmentation map has zero area"));
    }
    let counts = seg.class_counts();
    Ok(ObjectVector {
        kind: MetricKind::Mor,
        values: counts
            .iter()
            .map(|&c| Some(c as f64 / total as f64))
            .collect(),
    })
}

fn check_pair(seg: &SegmentationMap, hue: &HueMap) -> Result<()> {
    if seg.dims() != hue.dims() {
        return Err(invalid(format!(
            "segmentation {:?} and hue map {:?} dimensions differ",
            seg.dims(),
            hue.dims()
        )));
    }
    Ok(())
}

/// Share of the highlighted region (pixels with hue `<= threshold`) covered
/// by each class.
pub fn morh(seg: &SegmentationMap, hue: &HueMap, threshold: f64) -> Result<ObjectVector> {
    check_pair(seg, hue)?;
    if !(0.0..=HUE_MAX).contains(&threshold) {
        return Err(invalid(format!("threshold {threshold} outside [0, 150]")));
    }
    let mut counts = [0usize; NUM_CLASSES];
    let mut region = 0usize;
    for (&label, &h) in seg.labels.as_slice().iter().zip(hue.cells().as_slice()) {
        if h <= threshold {
            region += 1;
            if label != UNLABELED {
                counts[usize::from(label)] += 1;
            }
        }
    }
    if region == 0 {
        return Err(Error::EmptyHighlightRegion { threshold });
    }
    Ok(ObjectVector {
        kind: MetricKind::Morh { threshold },
        values: counts
            .iter()
            .map(|&c| (c > 0).then(|| c as f64 / region as f64))
            .collect(),
    })
}

/// `150 - mean hue` over each present class's pixels.
pub fn moh(seg: &SegmentationMap, hue: &HueMap) -> Result<ObjectVector> {
    check_pair(seg, hue)?;
    let mut sums = [0.0f64; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (&label, &h) in seg.labels.as_slice().iter().zip(hue.cells().as_slice()) {
        if label != UNLABELED {
            sums[usize::from(label)] += h;
            counts[usize::from(label)] += 1;
        }
    }
    Ok(ObjectVector {
        kind: MetricKind::MohAdjusted,
        values: sums
            .iter()
            .zip(counts)
            .map(|(&s, c)| (c > 0).then(|| HUE_MAX - s / c as f64))
            .collect(),
    })
}

/// Per-class mean across images, skipping missing entries.
pub fn mean_over_images(vectors: &[ObjectVector]) -> Result<ObjectVector> {
    let first = vectors
        .first()
        .ok_or_else(|| invalid("cannot average an empty set of object vectors"))?;
    if let Some(other) = vectors.iter().find(|v| v.kind != first.kind) {
        return Err(invalid(format!(
            "mixed metric kinds: {} and {}",
            first.kind, other.kind
        )));
    }
    let width = first.values.len();
    if vectors.iter().any(|v| v.values.len() != width) {
        return Err(invalid("object vectors have different lengths"));
    }
    let values = (0..width)
        .map(|class| {
            let (sum, n) = vectors
                .iter()
                .filter_map(|v| v.values[class])
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| sum / n as f64)
        })
        .collect();
    Ok(ObjectVector {
        kind: first.kind,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedObject {
    pub class_index: usize,
    pub class_name: &'static str,
    pub value: f64,
}

/// The `k` largest present entries, descending; ties go to the lower class
/// index.
pub fn top_k(vector: &ObjectVector, k: usize) -> Vec<RankedObject> {
    let mut present: Vec<(usize, f64)> = vector.present().collect();
    present.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    present
        .into_iter()
        .take(k)
        .map(|(class_index, value)| RankedObject {
            class_index,
            class_name: class_name(class_index).unwrap_or("?"),
            value,
        })
        .collect()
}

/// Writes one CSV row per image: `image_id`, `kind`, then one column per
/// class named after it. Missing values are empty fields.
pub fn write_metric_table<W: Write>(
    mut w: W,
    rows: &[(String, ObjectVector)],
) -> std::io::Result<()> {
    write!(w, "image_id,kind")?;
    for class in 0..NUM_CLASSES {
        write!(w, ",{}", class_name(class).unwrap_or("?"))?;
    }
    writeln!(w)?;
    for (image_id, vector) in rows {
        write!(w, "{image_id},{}", vector.kind)?;
        for v in &vector.values {
            match v {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a table written by [`write_metric_table`].
pub fn read_metric_table(text: &str) -> Result<Vec<(String, ObjectVector)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().ok_or_else(|| invalid("metric table is empty"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let expected = 2 + NUM_CLASSES;
    if columns.len() != expected
        || columns[..2] != ["image_id", "kind"]
        || (0..NUM_CLASSES).any(|c| Some(columns[2 + c]) != class_name(c))
    {
        return Err(Error::Validation(
            "metric table header does not list image_id, kind and the 150 classes".into(),
        ));
    }
    lines
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |what: String| Error::Validation(format!("metric table line {}: {what}", n + 1));
            if fields.len() != expected {
                return Err(bad(format!("{} fields, expected {expected}", fields.len())));
            }
            let kind: MetricKind = fields[1].parse().map_err(|e: Error| bad(e.to_string()))?;
            let values = fields[2..]
                .iter()
                .map(|f| match *f {
                    "" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .map(Some)
                        .ok_or_else(|| bad(format!("bad value `{v}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((fields[0].to_string(), ObjectVector { kind, values }))
        })
        .collect()
}
