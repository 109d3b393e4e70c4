//! Synthetic configuration sampling, synthetic row layouts and mean-guess
//! baselines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    Camera, ConfigSchema, Environment, FieldLayout, Metadata, PlantLocation, PlantProperties, Plot, SimulationConfig,
};
use crate::geometry::{Extents, Point, PointSet};

/// Either a uniform `[low, high]` range or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Uniform { low: f64, high: f64 },
    Fixed { fixed: f64 },
}

impl ParamRange {
    pub const fn uniform(low: f64, high: f64) -> Self {
        ParamRange::Uniform { low, high }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            ParamRange::Uniform { low, high } => (low, high),
            ParamRange::Fixed { fixed } => (fixed, fixed),
        }
    }

    pub fn mean(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (lo + hi) / 2.0
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ParamRange::Fixed { fixed } => fixed,
            ParamRange::Uniform { low, high } if low == high => low,
            ParamRange::Uniform { low, high } => rng.gen_range(low..high),
        }
    }

    /// Mean-guess MAE: a quarter of the range for a uniform distribution.
    pub fn mean_guess_mae(&self) -> f64 {
        let (lo, hi) = self.bounds();
        mean_guess_mae_uniform(lo, hi)
    }
}

/// Sampling ranges for every scalar config field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub year: i32,
    pub location: String,
    pub plant_type: String,
    pub soil_categories: Vec<String>,
    pub soil_specular_coefficient: ParamRange,
    pub sun_elevation_deg: ParamRange,
    pub sun_azimuth_deg: ParamRange,
    pub num_beds: u32,
    pub prospect_n: ParamRange,
    pub chlorophyll_ug_cm2: ParamRange,
    pub carotenoid_ug_cm2: ParamRange,
    pub anthocyanin_ug_cm2: ParamRange,
    pub water_g_cm2: ParamRange,
    pub dry_matter_g_cm2: ParamRange,
    pub leaf_pitch_deg: ParamRange,
    pub shutter_speed_s: ParamRange,
    pub iso_choices: Vec<u32>,
    pub camera_model: String,
    pub camera_height_m: ParamRange,
    pub camera_lookat: [f64; 3],
    /// Plant counts for synthetic row layouts, inclusive.
    pub plant_count: (usize, usize),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            year: 2024,
            location: "Davis, CA".into(),
            plant_type: "cowpea".into(),
            soil_categories: ConfigSchema::builtin().soil_categories.clone(),
            soil_specular_coefficient: ParamRange::uniform(0.0, 0.3),
            sun_elevation_deg: ParamRange::uniform(20.0, 70.0),
            sun_azimuth_deg: ParamRange::uniform(90.0, 270.0),
            num_beds: 1,
            prospect_n: ParamRange::uniform(1.0, 3.0),
            chlorophyll_ug_cm2: ParamRange::uniform(10.0, 80.0),
            carotenoid_ug_cm2: ParamRange::uniform(2.0, 25.0),
            anthocyanin_ug_cm2: ParamRange::uniform(0.0, 10.0),
            water_g_cm2: ParamRange::uniform(0.004, 0.04),
            dry_matter_g_cm2: ParamRange::uniform(0.002, 0.02),
            leaf_pitch_deg: ParamRange::uniform(10.0, 60.0),
            shutter_speed_s: ParamRange::uniform(0.0005, 0.004),
            iso_choices: vec![100, 200, 400],
            camera_model: "generic-rgb".into(),
            camera_height_m: ParamRange::uniform(10.0, 20.0),
            camera_lookat: [0.0, 0.0, -1.0],
            plant_count: (5, 20),
        }
    }
}

impl ParamRanges {
    /// Named continuous ranges, keyed by their config path.
    pub fn continuous(&self) -> [(&'static str, ParamRange); 12] {
        [
            ("environment.soil_specular_coefficient", self.soil_specular_coefficient),
            ("environment.sun_elevation_deg", self.sun_elevation_deg),
            ("environment.sun_azimuth_deg", self.sun_azimuth_deg),
            ("plant_properties.prospect_n", self.prospect_n),
            ("plant_properties.chlorophyll_ug_cm2", self.chlorophyll_ug_cm2),
            ("plant_properties.carotenoid_ug_cm2", self.carotenoid_ug_cm2),
            ("plant_properties.anthocyanin_ug_cm2", self.anthocyanin_ug_cm2),
            ("plant_properties.water_g_cm2", self.water_g_cm2),
            ("plant_properties.dry_matter_g_cm2", self.dry_matter_g_cm2),
            ("plant_properties.leaf_pitch_deg", self.leaf_pitch_deg),
            ("camera.shutter_speed_s", self.shutter_speed_s),
            ("camera.height_m", self.camera_height_m),
        ]
    }

    /// Checks `low <= high` and that each range sits inside the schema's
    /// valid interval, so every sample validates.
    pub fn check(&self, schema: &ConfigSchema) -> Result<(), String> {
        for (path, r) in self.continuous() {
            let (lo, hi) = r.bounds();
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(format!("{path}: invalid range [{lo}, {hi}]"));
            }
            if let Some(e) = schema.entry(path) {
                let below = e.min.is_some_and(|m| lo < m || (e.min_exclusive && lo == m));
                let above = e.max.is_some_and(|m| hi > m || (e.max_exclusive && hi == m));
                // Uniform draws never reach `high`, so an exclusive max equal to
                // `high` is fine for a non-degenerate range.
                let above = above && !(e.max_exclusive && Some(hi) == e.max && lo < hi);
                if below || above {
                    return Err(format!("{path}: [{lo}, {hi}] leaves the valid range"));
                }
            }
        }
        if self.soil_categories.is_empty() {
            return Err("soil_categories: empty".into());
        }
        if self.iso_choices.is_empty() || self.iso_choices.contains(&0) {
            return Err("iso_choices: need at least one positive ISO".into());
        }
        if self.plant_count.0 > self.plant_count.1 {
            return Err("plant_count: low above high".into());
        }
        if self.num_beds == 0 {
            return Err("num_beds: must be at least 1".into());
        }
        Ok(())
    }
}

/// Draws one configuration. Plants are copied from `layout`, whose extents
/// become the plot size; `camera_resolution` is the rendered image size.
pub fn sample_config(
    seed: u64,
    ranges: &ParamRanges,
    layout: &PointSet,
    dap: u32,
    camera_resolution: [u32; 2],
) -> SimulationConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim_seed = rng.gen_range(0..(1u64 << 31));
    let soil = ranges.soil_categories.choose(&mut rng).cloned().unwrap_or_default();
    let environment = Environment {
        soil_category: soil,
        soil_specular_coefficient: ranges.soil_specular_coefficient.sample(&mut rng),
        sun_elevation_deg: ranges.sun_elevation_deg.sample(&mut rng),
        sun_azimuth_deg: ranges.sun_azimuth_deg.sample(&mut rng),
    };
    let plant_properties = PlantProperties {
        prospect_n: ranges.prospect_n.sample(&mut rng),
        chlorophyll_ug_cm2: ranges.chlorophyll_ug_cm2.sample(&mut rng),
        carotenoid_ug_cm2: ranges.carotenoid_ug_cm2.sample(&mut rng),
        anthocyanin_ug_cm2: ranges.anthocyanin_ug_cm2.sample(&mut rng),
        water_g_cm2: ranges.water_g_cm2.sample(&mut rng),
        dry_matter_g_cm2: ranges.dry_matter_g_cm2.sample(&mut rng),
        leaf_pitch_deg: ranges.leaf_pitch_deg.sample(&mut rng),
    };
    let camera = Camera {
        shutter_speed_s: ranges.shutter_speed_s.sample(&mut rng),
        iso: ranges.iso_choices.choose(&mut rng).copied().unwrap_or(100),
        resolution: camera_resolution,
        model: ranges.camera_model.clone(),
        height_m: ranges.camera_height_m.sample(&mut rng),
        lookat: ranges.camera_lookat,
    };
    SimulationConfig {
        seed: sim_seed,
        metadata: Metadata {
            year: ranges.year,
            location: ranges.location.clone(),
            plant_type: ranges.plant_type.clone(),
            dap,
        },
        environment,
        field: FieldLayout {
            plot_width_m: layout.extents.width_m,
            plot_length_m: layout.extents.height_m,
            num_beds: ranges.num_beds,
            plots: vec![Plot {
                bed_id: 1,
                row_id: 1,
                plants: layout.points.iter().copied().map(PlantLocation::from).collect(),
            }],
        },
        plant_properties,
        camera,
    }
}

/// Fraction of the plot length the row occupies.
const ROW_SPAN: f64 = 0.9;
/// Across-row jitter half-width as a fraction of the plot width.
const JITTER: f64 = 0.05;

/// `n` plants evenly spaced down a single row (cell centers over 90% of the
/// length, top first) with a little across-row jitter.
pub fn synth_row_layout(n: usize, extents: Extents, jitter_seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let span = ROW_SPAN * extents.height_m;
    let cell = if n == 0 { 0.0 } else { span / n as f64 };
    let jitter = JITTER * extents.width_m;
    let points = (0..n)
        .map(|i| {
            let y = span / 2.0 - (i as f64 + 0.5) * cell;
            let x = if jitter > 0.0 {
                rng.gen_range(-jitter..=jitter)
            } else {
                0.0
            };
            Point::new(x, y)
        })
        .collect();
    PointSet::new(points, extents)
}

pub fn mean_guess_mae_uniform(low: f64, high: f64) -> f64 {
    (high - low) / 4.0
}

/// Mean absolute deviation from the sample mean.
pub fn mean_guess_mae_empirical(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n)
}
