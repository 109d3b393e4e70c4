//! Planar point sets in the plot-local frame and the scalar/point-set error
//! metrics computed on them.
//!
//! The plot-local frame has its origin at the image (and plot) center, `x`
//! across the row and `y` along the row. Image rows grow downwards, so moving
//! down the image decreases `y`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point set `{0}` is empty")]
    EmptySet(&'static str),
    #[error("length mismatch: {pred} predictions vs {truth} ground-truth values")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no values to average")]
    NoValues,
    #[error("pixel ({px}, {py}) outside a {width}x{height} image")]
    PixelOutOfRange { px: f64, py: f64, width: u32, height: u32 },
}

/// A plant location in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Physical size of the area an image covers, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extents {
    pub width_m: f64,
    pub height_m: f64,
}

impl Extents {
    pub const fn new(width_m: f64, height_m: f64) -> Self {
        Self { width_m, height_m }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x.abs() <= self.width_m / 2.0 && p.y.abs() <= self.height_m / 2.0
    }
}

/// Ordered plant positions together with the frame extents they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
    pub extents: Extents,
}

impl PointSet {
    pub fn new(points: Vec<Point>, extents: Extents) -> Self {
        Self { points, extents }
    }

    pub fn empty(extents: Extents) -> Self {
        Self::new(Vec::new(), extents)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }
}

/// Nearest-neighbour lookup over a point set sorted by `x`.
///
/// A query walks outwards from its insertion position and stops in each
/// direction once the `x` gap alone exceeds the best distance found.
struct SortedByX {
    pts: Vec<Point>,
}

impl SortedByX {
    fn new(points: &[Point]) -> Self {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        Self { pts }
    }

    fn nearest_distance(&self, q: Point) -> f64 {
        let start = self.pts.partition_point(|p| p.x < q.x);
        let mut best = f64::INFINITY;
        for p in &self.pts[start..] {
            if p.x - q.x > best {
                break;
            }
            best = best.min(q.distance(*p));
        }
        for p in self.pts[..start].iter().rev() {
            if q.x - p.x > best {
                break;
            }
            best = best.min(q.distance(*p));
        }
        best
    }
}

/// Average distance from each point of `from` to its nearest neighbour in `to`.
pub fn directed_mean_nn(from: &[Point], to: &[Point]) -> Result<f64, GeometryError> {
    if from.is_empty() {
        return Err(GeometryError::EmptySet("from"));
    }
    if to.is_empty() {
        return Err(GeometryError::EmptySet("to"));
    }
    let index = SortedByX::new(to);
    let total: f64 = from.iter().map(|&p| index.nearest_distance(p)).sum();
    Ok(total / from.len() as f64)
}

/// Chamfer distance: the sum of both directed mean nearest-neighbour distances.
pub fn chamfer_distance(s1: &PointSet, s2: &PointSet) -> Result<f64, GeometryError> {
    chamfer_points(&s1.points, &s2.points)
}

pub fn chamfer_points(s1: &[Point], s2: &[Point]) -> Result<f64, GeometryError> {
    if s1.is_empty() {
        return Err(GeometryError::EmptySet("s1"));
    }
    if s2.is_empty() {
        return Err(GeometryError::EmptySet("s2"));
    }
    Ok(directed_mean_nn(s1, s2)? + directed_mean_nn(s2, s1)?)
}

fn check_lengths(pred: usize, truth: usize) -> Result<(), GeometryError> {
    if pred != truth {
        return Err(GeometryError::LengthMismatch { pred, truth });
    }
    if pred == 0 {
        return Err(GeometryError::NoValues);
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, GeometryError> {
    check_lengths(pred.len(), truth.len())?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Smallest angular difference between two bearings in degrees, in `[0, 180]`.
pub fn angular_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn circular_mae_deg(pred_deg: &[f64], truth_deg: &[f64]) -> Result<f64, GeometryError> {
    check_lengths(pred_deg.len(), truth_deg.len())?;
    let sum: f64 = pred_deg
        .iter()
        .zip(truth_deg)
        .map(|(&p, &t)| angular_difference_deg(p, t))
        .sum();
    Ok(sum / pred_deg.len() as f64)
}

/// Relative image coordinates (`0..1`, origin top-left) to plot meters.
pub fn rel_to_meters(rx: f64, ry: f64, extents: Extents) -> Point {
    Point::new((rx - 0.5) * extents.width_m, -(ry - 0.5) * extents.height_m)
}

pub fn meters_to_rel(p: Point, extents: Extents) -> (f64, f64) {
    (p.x / extents.width_m + 0.5, 0.5 - p.y / extents.height_m)
}

/// Pixel indices to plot meters; the pixel's center is used.
pub fn pixel_to_meters(px: f64, py: f64, img_w: u32, img_h: u32, extents: Extents) -> Result<Point, GeometryError> {
    if !(0.0..img_w as f64).contains(&px) || !(0.0..img_h as f64).contains(&py) {
        return Err(GeometryError::PixelOutOfRange {
            px,
            py,
            width: img_w,
            height: img_h,
        });
    }
    Ok(pixel_to_meters_unchecked(px, py, img_w, img_h, extents))
}

/// Same as [`pixel_to_meters`] without the range check; sub-pixel centroids
/// of edge blobs may sit a fraction outside `[0, w)`.
pub fn pixel_to_meters_unchecked(px: f64, py: f64, img_w: u32, img_h: u32, extents: Extents) -> Point {
    rel_to_meters((px + 0.5) / img_w as f64, (py + 0.5) / img_h as f64, extents)
}

/// Inverse of [`pixel_to_meters`], returning continuous pixel indices.
pub fn meters_to_pixel(p: Point, img_w: u32, img_h: u32, extents: Extents) -> (f64, f64) {
    let (rx, ry) = meters_to_rel(p, extents);
    (rx * img_w as f64 - 0.5, ry * img_h as f64 - 0.5)
}

/// Meters per pixel along each image axis.
pub fn pixel_pitch(img_w: u32, img_h: u32, extents: Extents) -> (f64, f64) {
    (extents.width_m / img_w as f64, extents.height_m / img_h as f64)
}
