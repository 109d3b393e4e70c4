//! Plant stand detection on top-down plot images: excess-green index,
//! thresholding, 8-connected blob labelling and splitting of blobs that
//! hold several touching plants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pixel_to_meters_unchecked, Extents, Point, PointSet};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {0}: {1}")]
    Codec(String, #[source] image::ImageError),
    #[error("image must be at least 1x1, got {0}x{1}")]
    Empty(u32, u32),
    #[error("pixel buffer holds {got} pixels, expected {expected}")]
    BufferSize { got: usize, expected: usize },
}

/// An 8-bit RGB plot image plus the ground area it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
    pub extents: Extents,
}

impl PlotImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>, extents: Extents) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty(width, height));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            extents,
        })
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3], extents: Extents) -> Result<Self, ImageError> {
        Self::new(width, height, vec![color; width as usize * height as usize], extents)
    }

    /// Reads PNG, JPEG or PPM/PGM; the extents come from the dataset
    /// manifest, not from the file.
    pub fn open(path: &Path, extents: Extents) -> Result<Self, ImageError> {
        let rgb = image::open(path)
            .map_err(|e| ImageError::Codec(path.display().to_string(), e))?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0).collect();
        Self::new(w, h, pixels, extents)
    }

    /// Writes the image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buf = image::RgbImage::from_raw(self.width, self.height, raw).expect("buffer size checked on construction");
        buf.save(path)
            .map_err(|e| ImageError::Codec(path.display().to_string(), e))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.pixels[(y * self.width + x) as usize] = rgb;
    }

    pub fn rotated_180(&self) -> Self {
        let mut pixels = self.pixels.clone();
        pixels.reverse();
        Self { pixels, ..self.clone() }
    }
}

/// Row-major scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// Chromaticity-normalised excess green, `2g - r - b`; black maps to 0.
pub fn exg(rgb: [u8; 3]) -> f64 {
    let [r, g, b] = rgb.map(f64::from);
    let sum = r + g + b;
    if sum == 0.0 {
        return 0.0;
    }
    (2.0 * g - r - b) / sum
}

pub fn exg_map(img: &PlotImage) -> ScalarField {
    ScalarField {
        width: img.width,
        height: img.height,
        values: img.pixels.iter().map(|&p| exg(p)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Otsu's threshold on the ExG histogram, never below `floor` so that a
    /// plain soil image does not get split into two noise classes.
    Otsu {
        floor: f64,
    },
    Fixed {
        value: f64,
    },
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Otsu { floor: 0.1 }
    }
}

const OTSU_BINS: usize = 256;

/// Otsu's method over a 256-bin histogram spanning the field's value range.
/// Returns the upper edge of the last background bin.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    // Also catches an empty slice, where `lo` stays infinite.
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return hi;
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_bg, mut sum_bg) = (0.0, 0.0);
    let (mut best_var, mut best_bin) = (-1.0, 0usize);
    for (i, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w_bg += count as f64;
        sum_bg += i as f64 * count as f64;
        let w_fg = total - w_bg;
        if w_bg == 0.0 || w_fg == 0.0 {
            continue;
        }
        let mean_bg = sum_bg / w_bg;
        let mean_fg = (sum_all - sum_bg) / w_fg;
        let between = w_bg * w_fg * (mean_bg - mean_fg).powi(2);
        if between > best_var {
            best_var = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

/// Row-major foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }
}

pub fn threshold_value(field: &ScalarField, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Fixed { value } => value,
        ThresholdMode::Otsu { floor } => otsu_threshold(&field.values).max(floor),
    }
}

/// Foreground where ExG is strictly above the threshold.
pub fn segment(field: &ScalarField, mode: ThresholdMode) -> Mask {
    let t = threshold_value(field, mode);
    Mask {
        width: field.width,
        height: field.height,
        bits: field.values.iter().map(|&v| v > t).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> u32 {
        self.max_y - self.min_y + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(u32, u32)>,
    pub bbox: BBox,
    /// Center of gravity in pixel-index coordinates.
    pub centroid: (f64, f64),
}

impl Blob {
    pub fn from_pixels(pixels: Vec<(u32, u32)>) -> Option<Self> {
        let &(x0, y0) = pixels.first()?;
        let mut bbox = BBox {
            min_x: x0,
            min_y: y0,
            max_x: x0,
            max_y: y0,
        };
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(x, y) in &pixels {
            bbox.min_x = bbox.min_x.min(x);
            bbox.min_y = bbox.min_y.min(y);
            bbox.max_x = bbox.max_x.max(x);
            bbox.max_y = bbox.max_y.max(y);
            sx += f64::from(x);
            sy += f64::from(y);
        }
        let n = pixels.len() as f64;
        Some(Self {
            centroid: (sx / n, sy / n),
            pixels,
            bbox,
        })
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Extent along the blob's longer bounding-box side, with that axis.
    pub fn major_extent(&self) -> (u32, Axis) {
        if self.bbox.height() >= self.bbox.width() {
            (self.bbox.height(), Axis::Row)
        } else {
            (self.bbox.width(), Axis::Across)
        }
    }
}

/// `Row` is the image's vertical axis (along the planted row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Across,
}

/// 8-connected components with at least `min_area_px` pixels, in raster
/// order of their first pixel.
pub fn detect_blobs(mask: &Mask, min_area_px: usize) -> Vec<Blob> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; mask.bits.len()];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if !mask.bits[idx] || seen[idx] {
                continue;
            }
            seen[idx] = true;
            stack.push((x, y));
            let mut pixels = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                pixels.push((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (i64::from(cx) + dx, i64::from(cy) + dy);
                        if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let nidx = (ny * w + nx) as usize;
                        if mask.get(nx, ny) && !seen[nidx] {
                            seen[nidx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if pixels.len() >= min_area_px {
                pixels.sort_unstable_by_key(|&(px, py)| (py, px));
                blobs.extend(Blob::from_pixels(pixels));
            }
        }
    }
    blobs
}

/// Splits a blob that spans more than `factor` single-plant extents into
/// `round(extent / median)` equal slices along its longer axis.
pub fn split_merged(blob: &Blob, median_extent_px: f64, factor: f64) -> Vec<Blob> {
    let (extent, axis) = blob.major_extent();
    let extent = f64::from(extent);
    if median_extent_px <= 0.0 || extent <= factor * median_extent_px {
        return vec![blob.clone()];
    }
    let n = (extent / median_extent_px).round().max(1.0) as usize;
    let start = match axis {
        Axis::Row => blob.bbox.min_y,
        Axis::Across => blob.bbox.min_x,
    };
    let mut slices: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    for &(x, y) in &blob.pixels {
        let c = match axis {
            Axis::Row => y,
            Axis::Across => x,
        };
        let t = (f64::from(c - start) + 0.5) / extent;
        let k = ((t * n as f64) as usize).min(n - 1);
        slices[k].push((x, y));
    }
    slices.into_iter().filter_map(Blob::from_pixels).collect()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub threshold: ThresholdMode,
    /// Multiple of the median single-plant extent above which a blob is split.
    pub split_factor: f64,
    /// Minimum blob area as a fraction of the image area.
    pub min_area_fraction: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::default(),
            split_factor: 1.5,
            min_area_fraction: 0.0005,
        }
    }
}

impl DetectParams {
    pub fn min_area_px(&self, width: u32, height: u32) -> usize {
        (self.min_area_fraction * f64::from(width) * f64::from(height)).ceil() as usize
    }
}

/// Plant blobs after splitting, ordered top to bottom along the row.
pub fn detect_plant_blobs(img: &PlotImage, params: &DetectParams) -> Vec<Blob> {
    let mask = segment(&exg_map(img), params.threshold);
    let mut blobs = detect_blobs(&mask, params.min_area_px(img.width, img.height));
    blobs.sort_by(|a, b| {
        a.centroid
            .1
            .total_cmp(&b.centroid.1)
            .then(a.centroid.0.total_cmp(&b.centroid.0))
    });
    let mut extents: Vec<f64> = blobs.iter().map(|b| f64::from(b.major_extent().0)).collect();
    let Some(median_extent) = median(&mut extents) else {
        return Vec::new();
    };
    blobs
        .iter()
        .flat_map(|b| split_merged(b, median_extent, params.split_factor))
        .collect()
}

/// Full pipeline: ExG, threshold, blobs, split, pixel-to-meter conversion.
pub fn detect_plants(img: &PlotImage, params: &DetectParams) -> PointSet {
    let points: Vec<Point> = detect_plant_blobs(img, params)
        .iter()
        .map(|b| pixel_to_meters_unchecked(b.centroid.0, b.centroid.1, img.width, img.height, img.extents))
        .collect();
    PointSet::new(points, img.extents)
}
