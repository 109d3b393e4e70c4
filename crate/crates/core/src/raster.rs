//! Top-down synthetic plot images drawn from a configuration: soil
//! background and one filled ellipse per plant sized by growth stage.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimulationConfig;
use crate::detection::{ImageError, PlotImage};
use crate::geometry::{meters_to_pixel, pixel_pitch, Point};

/// Piecewise-linear plant radius (m) against days after planting, clamped
/// outside the anchor range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCurve {
    /// `(dap, radius_m)` pairs with increasing dap.
    pub anchors: Vec<(f64, f64)>,
}

impl Default for GrowthCurve {
    fn default() -> Self {
        Self {
            anchors: vec![(0.0, 0.02), (10.0, 0.05), (50.0, 0.30), (90.0, 0.45)],
        }
    }
}

impl GrowthCurve {
    pub fn radius_m(&self, dap: f64) -> f64 {
        let a = &self.anchors;
        let Some(&(first_dap, first_r)) = a.first() else {
            return 0.0;
        };
        if dap <= first_dap {
            return first_r;
        }
        for w in a.windows(2) {
            let ((d0, r0), (d1, r1)) = (w[0], w[1]);
            if dap <= d1 {
                return r0 + (dap - d0) / (d1 - d0) * (r1 - r0);
            }
        }
        a[a.len() - 1].1
    }
}

/// Default growth curve radius.
pub fn growth_radius(dap: f64) -> f64 {
    GrowthCurve::default().radius_m(dap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterParams {
    pub width_px: u32,
    pub height_px: u32,
    pub soil_color: [u8; 3],
    pub plant_color: [u8; 3],
    pub growth: GrowthCurve,
    pub noise_seed: u64,
    /// Uniform per-channel noise in `[-amplitude, amplitude]`.
    pub noise_amplitude: u8,
}

impl Default for RasterParams {
    fn default() -> Self {
        Self {
            width_px: 381,
            height_px: 1080,
            soil_color: [110, 85, 60],
            plant_color: [60, 140, 40],
            growth: GrowthCurve::default(),
            noise_seed: 0,
            noise_amplitude: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub image: PlotImage,
    /// `(plot index, plant index)` of plants outside the plot extents.
    pub skipped: Vec<(usize, usize)>,
}

pub fn rasterize(c: &SimulationConfig, p: &RasterParams) -> Result<RasterOutput, ImageError> {
    let extents = c.extents();
    let (w, h) = (p.width_px, p.height_px);
    let mut img = PlotImage::filled(w, h, p.soil_color, extents)?;
    let radius = p.growth.radius_m(f64::from(c.metadata.dap));
    let (pitch_x, pitch_y) = pixel_pitch(w, h, extents);
    let (rx, ry) = (radius / pitch_x, radius / pitch_y);

    let mut skipped = Vec::new();
    for (i, plot) in c.field.plots.iter().enumerate() {
        for (j, plant) in plot.plants.iter().enumerate() {
            let pt = Point::from(*plant);
            if !(pt.x.is_finite() && pt.y.is_finite() && extents.contains(pt)) {
                warn!(
                    "plant {j} of plot {i} at ({}, {}) lies outside the plot; skipped",
                    pt.x, pt.y
                );
                skipped.push((i, j));
                continue;
            }
            let (cx, cy) = meters_to_pixel(pt, w, h, extents);
            let x0 = (cx - rx).floor().max(0.0) as u32;
            let x1 = ((cx + rx).ceil().max(0.0) as u32).min(w - 1);
            let y0 = (cy - ry).floor().max(0.0) as u32;
            let y1 = ((cy + ry).ceil().max(0.0) as u32).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = (f64::from(x) - cx) / rx;
                    let dy = (f64::from(y) - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        img.set_pixel(x, y, p.plant_color);
                    }
                }
            }
        }
    }

    if p.noise_amplitude > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        let a = i16::from(p.noise_amplitude);
        for y in 0..h {
            for x in 0..w {
                let px = img
                    .pixel(x, y)
                    .map(|v| (i16::from(v) + rng.gen_range(-a..=a)).clamp(0, 255) as u8);
                img.set_pixel(x, y, px);
            }
        }
    }
    Ok(RasterOutput { image: img, skipped })
}
