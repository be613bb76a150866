//! PNG exchange formats.
//!
//! * Heatmaps: 16-bit single-channel PNG, stored value `round(a * 65535)`,
//!   with a JSON sidecar ([`HeatmapMeta`]). 8-bit grayscale is accepted on
//!   read (`a = v / 255`).
//! * Hue visualizations: 8-bit RGB, HSV ramp at full saturation and value.
//!   The 0–150 hue scale is drawn over 0–240 degrees (red to blue).
//! * Segmentation: 8-bit single-channel PNG, value = class index, 255 =
//!   unlabeled.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::heatmap::{AttentionHeatmap, HeatmapMeta, HueMap, HUE_MAX};
use crate::segmentation::SegmentationMap;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_heatmap_png(path: &Path, heatmap: &AttentionHeatmap) -> Result<()> {
    let (w, h) = heatmap.dims();
    let data: Vec<u16> = heatmap
        .cells()
        .as_slice()
        .iter()
        .map(|a| (a * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(image_err(path))
}

pub fn read_heatmap_png(path: &Path) -> Result<AttentionHeatmap> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let cells = match img {
        image::DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        image::DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        other => {
            return Err(Error::Validation(format!(
                "{}: heatmap must be single-channel, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    AttentionHeatmap::from_grid(Grid::from_vec(w, h, cells)?)
}

pub fn write_heatmap_meta(path: &Path, meta: &HeatmapMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_heatmap_meta(path: &Path) -> Result<HeatmapMeta> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// RGB for a hue-scale value read as an HSV hue in degrees, at full
/// saturation and value.
pub fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let deg = hue.clamp(0.0, HUE_MAX);
    let sector = deg / 60.0;
    let x = 1.0 - (sector % 2.0 - 1.0).abs();
    let (r, g, b) = match sector as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        _ => (x, 0.0, 1.0),
    };
    let q = |c: f64| (c * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn write_hue_png(path: &Path, hue: &HueMap) -> Result<()> {
    let (w, h) = hue.dims();
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (i, &v) in hue.cells().as_slice().iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(hue_to_rgb(v)));
    }
    img.save(path).map_err(image_err(path))
}

pub fn read_segmentation_png(path: &Path) -> Result<SegmentationMap> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            SegmentationMap::new(Grid::from_vec(w, h, buf.into_raw())?)
        }
        other => Err(Error::Validation(format!(
            "{}: segmentation must be 8-bit single-channel, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_segmentation_png(path: &Path, seg: &SegmentationMap) -> Result<()> {
    let (w, h) = seg.dims();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, seg.labels().as_slice().to_vec())
            .expect("buffer matches dimensions");
    img.save(path).map_err(image_err(path))
}
