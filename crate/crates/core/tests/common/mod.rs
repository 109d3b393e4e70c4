//! Fixture builders shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use plotbench::config::{canonical_serialize, ConfigSchema, ResponseDocument, SimulationConfig};
use plotbench::dataset::{sample_config, synth_row_layout, ParamRanges};
use plotbench::geometry::{Extents, Point, PointSet};
use plotbench::prompt::{
    build, build_blind, example_reasoning, grounding_from_truth, FewShotExample, PromptBundle, PromptOptions,
};
use plotbench::raster::growth_radius;
use plotbench::solar::SunPosition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub const EXTENTS: Extents = Extents::new(1.3521, 3.8405);
pub const RESOLUTION: [u32; 2] = [381, 1080];

/// Frozen list of every key path a full configuration carries.
pub const GOLDEN_KEYS: [&str; 31] = [
    "seed",
    "metadata",
    "metadata.year",
    "metadata.location",
    "metadata.plant_type",
    "metadata.dap",
    "environment",
    "environment.soil_category",
    "environment.soil_specular_coefficient",
    "environment.sun_elevation_deg",
    "environment.sun_azimuth_deg",
    "field",
    "field.plot_width_m",
    "field.plot_length_m",
    "field.num_beds",
    "field.plots",
    "plant_properties",
    "plant_properties.prospect_n",
    "plant_properties.chlorophyll_ug_cm2",
    "plant_properties.carotenoid_ug_cm2",
    "plant_properties.anthocyanin_ug_cm2",
    "plant_properties.water_g_cm2",
    "plant_properties.dry_matter_g_cm2",
    "plant_properties.leaf_pitch_deg",
    "camera",
    "camera.shutter_speed_s",
    "camera.iso",
    "camera.resolution",
    "camera.model",
    "camera.height_m",
    "camera.lookat",
];

pub fn golden_keys() -> Vec<String> {
    GOLDEN_KEYS.iter().map(|k| k.to_string()).collect()
}

/// Golden keys removed when the member at `path` is deleted.
pub fn keys_under(path: &str) -> usize {
    let prefix = format!("{path}.");
    GOLDEN_KEYS
        .iter()
        .filter(|k| **k == path || k.starts_with(&prefix))
        .count()
}

/// Directory of the core crate, from either crate's test binaries.
pub fn core_dir() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    if here.ends_with("core") {
        here
    } else {
        here.join("../core")
    }
}

pub fn row_config(seed: u64, n: usize, dap: u32) -> SimulationConfig {
    let layout = synth_row_layout(n, EXTENTS, seed ^ 0x5eed);
    sample_config(seed, &ParamRanges::default(), &layout, dap, RESOLUTION)
}

/// `n` plants placed uniformly at random, at least `min_gap` apart and
/// `margin` inside the plot edges.
pub fn scattered_points(rng: &mut impl Rng, n: usize, min_gap: f64, margin: f64) -> Vec<Point> {
    let (hw, hh) = (EXTENTS.width_m / 2.0 - margin, EXTENTS.height_m / 2.0 - margin);
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Point::new(rng.gen_range(-hw..=hw), rng.gen_range(-hh..=hh));
        if pts.iter().all(|q| q.distance(p) > min_gap) {
            pts.push(p);
        }
    }
    pts
}

/// A plot at `dap` with `n` randomly placed, non-touching plants.
pub fn scattered_config(seed: u64, n: usize, dap: u32) -> SimulationConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = growth_radius(f64::from(dap));
    let pts = scattered_points(&mut rng, n, 2.0 * r, r);
    sample_config(
        seed,
        &ParamRanges::default(),
        &PointSet::new(pts, EXTENTS),
        dap,
        RESOLUTION,
    )
}

pub fn answer_json(c: &SimulationConfig) -> String {
    let doc = ResponseDocument {
        reasoning: example_reasoning(c),
        config: c.clone(),
    };
    canonical_serialize(&doc).unwrap()
}

pub fn golden_examples() -> Vec<FewShotExample> {
    [(10, 8, 11u64), (50, 14, 12), (90, 12, 13)]
        .into_iter()
        .enumerate()
        .map(|(i, (dap, n, seed))| FewShotExample {
            image: Some(PathBuf::from(format!("few_shot/example{}.png", i + 1))),
            answer_json: answer_json(&row_config(seed, n, dap)),
        })
        .collect()
}

pub fn golden_grounding() -> String {
    let truth = row_config(21, 14, 10);
    let sun = SunPosition {
        elevation_deg: 62.9,
        azimuth_deg: 169.4,
    };
    grounding_from_truth(10, &truth.plant_points(), sun, EXTENTS)
}

/// The five methods and their blind variants built from fixed inputs,
/// labelled `m1`..`m5` and `m1-blind`..`m5-blind`.
pub fn golden_bundles() -> Vec<(String, PromptBundle)> {
    let examples = golden_examples();
    let grounding = golden_grounding();
    let mut out = Vec::new();
    for m in 1..=5u8 {
        let g = (m == 5).then_some(grounding.as_str());
        let b = build(
            m,
            ConfigSchema::builtin(),
            &examples,
            g,
            PathBuf::from("images/dap010_p000.png"),
            PromptOptions::default(),
        )
        .unwrap();
        let blind = build_blind(&b);
        out.push((b.label(), b));
        out.push((blind.label(), blind));
    }
    out
}

pub fn render_bundle(b: &PromptBundle) -> String {
    serde_json::to_string_pretty(b).unwrap() + "\n"
}

pub fn golden_dir() -> PathBuf {
    core_dir().join("tests/golden")
}

/// Direct O(n·m) Chamfer distance.
pub fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    let directed = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    directed(a, b) + directed(b, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    None,
    Prose,
    TrailingComma,
    MissingBrace,
    Subtree,
    CommaAndSubtree,
    BrokenNesting,
}

/// One corpus response and what was planted in it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub defect: Defect,
    pub text: String,
    pub syntax_error: bool,
    pub repairable: bool,
    /// Golden keys missing once the response is read; all 31 when it
    /// cannot be read at all.
    pub missing: usize,
}

const DEFECT_MIX: [(Defect, usize); 7] = [
    (Defect::None, 40),
    (Defect::Prose, 30),
    (Defect::TrailingComma, 35),
    (Defect::MissingBrace, 35),
    (Defect::Subtree, 30),
    (Defect::CommaAndSubtree, 20),
    (Defect::BrokenNesting, 10),
];

fn delete_random_member(doc: &mut Value, rng: &mut impl Rng) -> usize {
    let path = GOLDEN_KEYS[rng.gen_range(0..GOLDEN_KEYS.len())];
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().unwrap();
    let mut node = &mut *doc;
    for p in parts {
        node = node.get_mut(p).unwrap();
    }
    node.as_object_mut().unwrap().shift_remove(leaf).unwrap();
    keys_under(path)
}

/// Adds a comma before a randomly chosen closing brace or bracket line.
fn plant_trailing_comma(text: &str, rng: &mut impl Rng) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let closers: Vec<usize> = (1..lines.len())
        .filter(|&i| {
            let t = lines[i].trim();
            (t.starts_with('}') || t.starts_with(']')) && !lines[i - 1].trim_end().ends_with(['{', '['])
        })
        .collect();
    let i = closers[rng.gen_range(0..closers.len())];
    lines[i - 1].push(',');
    lines.join("\n")
}

fn wrap(text: &str, rng: &mut impl Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!("```json\n{text}\n```"),
        1 => format!("Here is the configuration:\n```json\n{text}\n```\nLet me know if anything needs adjusting."),
        _ => text.to_string(),
    }
}

/// 200 responses against `truth`, with defects planted in fixed
/// proportions and shuffled.
pub fn integrity_corpus(truth: &SimulationConfig, seed: u64) -> Vec<Planted> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Value = serde_json::from_str(&answer_json(truth)).unwrap();
    let mut out = Vec::new();
    for (defect, count) in DEFECT_MIX {
        for _ in 0..count {
            let mut doc = base.clone();
            let mut missing = 0;
            if matches!(defect, Defect::Subtree | Defect::CommaAndSubtree) {
                missing = delete_random_member(&mut doc, &mut rng);
            }
            let pretty = serde_json::to_string_pretty(&doc).unwrap();
            let (text, syntax_error, repairable) = match defect {
                Defect::None | Defect::Subtree => (wrap(&pretty, &mut rng), false, true),
                Defect::Prose => (
                    format!("Based on the image, my estimate is {pretty} which matches the visible canopy."),
                    false,
                    true,
                ),
                Defect::TrailingComma | Defect::CommaAndSubtree => {
                    (wrap(&plant_trailing_comma(&pretty, &mut rng), &mut rng), true, true)
                }
                Defect::MissingBrace => {
                    let cut = pretty.trim_end().strip_suffix('}').unwrap().to_string();
                    (wrap(&cut, &mut rng), true, true)
                }
                Defect::BrokenNesting => {
                    let swapped = pretty.trim_end().strip_suffix('}').unwrap().to_string() + "]";
                    missing = GOLDEN_KEYS.len();
                    (wrap(&swapped, &mut rng), true, false)
                }
            };
            out.push(Planted {
                defect,
                text,
                syntax_error,
                repairable,
                missing,
            });
        }
    }
    use rand::seq::SliceRandom;
    out.shuffle(&mut rng);
    out
}
