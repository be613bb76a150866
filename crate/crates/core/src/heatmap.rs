//! Attention heatmaps built from fixations.
//!
//! Fixations are splatted into an [`AttentionAccumulator`] as duration-weighted
//! Gaussians, rank-normalized into an [`AttentionHeatmap`] with the empirical
//! CDF, and finally encoded onto the 0–150 hue scale where **lower hue means
//! more attention**.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaze::{FixationEvent, ScreenGeometry};
use crate::grid::Grid;

/// Upper end of the hue scale.
pub const HUE_MAX: f64 = 150.0;

/// Splats are truncated at this many standard deviations.
pub const SPLAT_RADIUS_SIGMAS: f64 = 3.0;

/// Visual angle used for the default splat width.
pub const DEFAULT_SIGMA_DEGREES: f64 = 0.5;

/// Raw accumulated attention in fixation-milliseconds per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAccumulator {
    cells: Grid<f64>,
}

/// Rank-normalized attention, every cell in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    cells: Grid<f64>,
}

/// Hue encoding of attention, every cell in `[0, 150]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HueMap {
    cells: Grid<f64>,
}

/// Metadata stored next to an exported heatmap PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub participants: usize,
    pub sigma_px: f64,
}

/// Default splat sigma: the pixel extent of half a degree of visual angle.
pub fn default_sigma(geom: &ScreenGeometry) -> f64 {
    geom.pixels_for_degrees(DEFAULT_SIGMA_DEGREES)
}

impl AttentionAccumulator {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("heatmap must be non-empty, got {width}x{height}")));
        }
        Ok(Self {
            cells: Grid::filled(width, height, 0.0),
        })
    }

    pub fn from_grid(cells: Grid<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(invalid("accumulator must have at least one cell"));
        }
        if cells.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("accumulator cells must be finite and non-negative"));
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &Grid<f64> {
        &self.cells
    }

    pub fn total(&self) -> f64 {
        self.cells.as_slice().iter().sum()
    }

    /// Deposits one duration-weighted Gaussian centred at `(cx, cy)`.
    ///
    /// Pixel `(row, col)` is sampled at its centre `(col + 0.5, row + 0.5)`.
    /// The kernel is normalized over its full truncated disk, so a splat that
    /// does not touch the border deposits exactly `weight`.
    pub fn splat(&mut self, cx: f64, cy: f64, weight: f64, sigma: f64) {
        let radius = SPLAT_RADIUS_SIGMAS * sigma;
        let inv_two_var = 1.0 / (2.0 * sigma * sigma);
        let kernel = |dx: f64, dy: f64| {
            let d2 = dx * dx + dy * dy;
            (d2 <= radius * radius).then(|| (-d2 * inv_two_var).exp())
        };

        let (width, height) = self.cells.dims();
        let col_lo = (cx - radius - 0.5).floor() as i64;
        let col_hi = (cx + radius - 0.5).ceil() as i64;
        let row_lo = (cy - radius - 0.5).floor() as i64;
        let row_hi = (cy + radius - 0.5).ceil() as i64;

        let mut norm = 0.0;
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                if let Some(k) = kernel(col as f64 + 0.5 - cx, row as f64 + 0.5 - cy) {
                    norm += k;
                }
            }
        }
        if norm == 0.0 {
            return;
        }
        let scale = weight / norm;
        for row in row_lo.max(0)..=row_hi.min(height as i64 - 1) {
            for col in col_lo.max(0)..=col_hi.min(width as i64 - 1) {
                if let Some(k) = kernel(col as f64 + 0.5 - cx, row as f64 + 0.5 - cy) {
                    *self.cells.get_mut(row as usize, col as usize) += k * scale;
                }
            }
        }
    }

    pub fn add(&mut self, other: &AttentionAccumulator) -> Result<()> {
        if !self.cells.same_dims(&other.cells) {
            return Err(invalid("accumulator dimensions differ"));
        }
        for (a, b) in self.cells.as_mut_slice().iter_mut().zip(other.cells.as_slice()) {
            *a += b;
        }
        Ok(())
    }
}

/// Splats every fixation, weighted by its duration in milliseconds.
pub fn accumulate(
    fixations: &[FixationEvent],
    width: usize,
    height: usize,
    sigma: f64,
) -> Result<AttentionAccumulator> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut acc = AttentionAccumulator::zeros(width, height)?;
    for f in fixations {
        acc.splat(f.cx, f.cy, f.duration_ms as f64, sigma);
    }
    Ok(acc)
}

/// Empirical CDF over the grid's own cells:
/// `a = #{cells with value <= v} / #cells`. Tied values share the highest rank.
pub fn cdf_normalize(acc: &AttentionAccumulator) -> AttentionHeatmap {
    AttentionHeatmap {
        cells: rank_cdf(&acc.cells),
    }
}

fn rank_cdf(cells: &Grid<f64>) -> Grid<f64> {
    let mut sorted: Vec<f64> = cells.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    cells.map(|v| {
        let at_or_below = sorted.partition_point(|s| s.total_cmp(v).is_le());
        at_or_below as f64 / n
    })
}

impl AttentionHeatmap {
    /// Wraps an already-normalized grid, checking the `[0, 1]` range.
    pub fn from_grid(cells: Grid<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(invalid("heatmap must have at least one cell"));
        }
        if cells.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("attention values must lie in [0, 1]"));
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &Grid<f64> {
        &self.cells
    }

    pub fn dims(&self) -> (usize, usize) {
        self.cells.dims()
    }
}

/// `hue = 150 * (1 - a)`.
pub fn hue_of(attention: f64) -> f64 {
    HUE_MAX * (1.0 - attention)
}

pub fn hue_encode(h: &AttentionHeatmap) -> HueMap {
    HueMap {
        cells: h.cells.map(|&a| hue_of(a)),
    }
}

impl HueMap {
    pub fn from_grid(cells: Grid<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(invalid("hue map must have at least one cell"));
        }
        if cells.as_slice().iter().any(|v| !(0.0..=HUE_MAX).contains(v)) {
            return Err(invalid("hue values must lie in [0, 150]"));
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &Grid<f64> {
        &self.cells
    }

    pub fn dims(&self) -> (usize, usize) {
        self.cells.dims()
    }
}

/// Cellwise mean of per-participant heatmaps, rank-normalized again.
pub fn aggregate_participants(heatmaps: &[AttentionHeatmap]) -> Result<AttentionHeatmap> {
    let first = heatmaps
        .first()
        .ok_or_else(|| invalid("cannot aggregate an empty set of heatmaps"))?;
    if let Some(bad) = heatmaps.iter().find(|h| h.dims() != first.dims()) {
        return Err(invalid(format!(
            "heatmap dimensions differ: {:?} vs {:?}",
            first.dims(),
            bad.dims()
        )));
    }
    let mut sum = Grid::filled(first.cells.width(), first.cells.height(), 0.0);
    for h in heatmaps {
        for (s, v) in sum.as_mut_slice().iter_mut().zip(h.cells.as_slice()) {
            *s += v;
        }
    }
    let n = heatmaps.len() as f64;
    let mean = sum.map(|s| s / n);
    Ok(AttentionHeatmap {
        cells: rank_cdf(&mean),
    })
}
