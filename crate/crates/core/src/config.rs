//! The plot-simulation configuration document, its schema manifest,
//! validation, canonical serialization and key flattening.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{Extents, Point, PointSet};

const BUILTIN_SCHEMA: &str = include_str!("../schema/config_schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("non-finite number at `{0}`")]
    NonFinite(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema manifest: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub metadata: Metadata,
    pub environment: Environment,
    pub field: FieldLayout,
    pub plant_properties: PlantProperties,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub year: i32,
    pub location: String,
    pub plant_type: String,
    pub dap: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub soil_category: String,
    pub soil_specular_coefficient: f64,
    pub sun_elevation_deg: f64,
    pub sun_azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLayout {
    pub plot_width_m: f64,
    pub plot_length_m: f64,
    pub num_beds: u32,
    pub plots: Vec<Plot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub bed_id: u32,
    pub row_id: u32,
    pub plants: Vec<PlantLocation>,
}

/// `[x, y]` in meters, plot-centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantLocation(pub f64, pub f64);

impl From<Point> for PlantLocation {
    fn from(p: Point) -> Self {
        Self(p.x, p.y)
    }
}

impl From<PlantLocation> for Point {
    fn from(p: PlantLocation) -> Self {
        Point::new(p.0, p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantProperties {
    pub prospect_n: f64,
    pub chlorophyll_ug_cm2: f64,
    pub carotenoid_ug_cm2: f64,
    pub anthocyanin_ug_cm2: f64,
    pub water_g_cm2: f64,
    pub dry_matter_g_cm2: f64,
    pub leaf_pitch_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub shutter_speed_s: f64,
    pub iso: u32,
    /// `[width_px, height_px]`
    pub resolution: [u32; 2],
    pub model: String,
    pub height_m: f64,
    /// Viewing direction; `[0, 0, -1]` looks straight down.
    pub lookat: [f64; 3],
}

impl SimulationConfig {
    pub fn extents(&self) -> Extents {
        Extents::new(self.field.plot_width_m, self.field.plot_length_m)
    }

    /// Every plant of every plot, in document order.
    pub fn plant_points(&self) -> PointSet {
        let points = self
            .field
            .plots
            .iter()
            .flat_map(|p| p.plants.iter().copied().map(Point::from))
            .collect();
        PointSet::new(points, self.extents())
    }

    pub fn plant_count(&self) -> usize {
        self.field.plots.iter().map(|p| p.plants.len()).sum()
    }

    fn float_fields(&self) -> Vec<(String, f64)> {
        let e = &self.environment;
        let pp = &self.plant_properties;
        let cam = &self.camera;
        let mut out = vec![
            (
                "environment.soil_specular_coefficient".to_string(),
                e.soil_specular_coefficient,
            ),
            ("environment.sun_elevation_deg".into(), e.sun_elevation_deg),
            ("environment.sun_azimuth_deg".into(), e.sun_azimuth_deg),
            ("field.plot_width_m".into(), self.field.plot_width_m),
            ("field.plot_length_m".into(), self.field.plot_length_m),
            ("plant_properties.prospect_n".into(), pp.prospect_n),
            ("plant_properties.chlorophyll_ug_cm2".into(), pp.chlorophyll_ug_cm2),
            ("plant_properties.carotenoid_ug_cm2".into(), pp.carotenoid_ug_cm2),
            ("plant_properties.anthocyanin_ug_cm2".into(), pp.anthocyanin_ug_cm2),
            ("plant_properties.water_g_cm2".into(), pp.water_g_cm2),
            ("plant_properties.dry_matter_g_cm2".into(), pp.dry_matter_g_cm2),
            ("plant_properties.leaf_pitch_deg".into(), pp.leaf_pitch_deg),
            ("camera.shutter_speed_s".into(), cam.shutter_speed_s),
            ("camera.height_m".into(), cam.height_m),
        ];
        for (i, v) in cam.lookat.iter().enumerate() {
            out.push((format!("camera.lookat[{i}]"), *v));
        }
        for (i, plot) in self.field.plots.iter().enumerate() {
            for (j, p) in plot.plants.iter().enumerate() {
                out.push((format!("field.plots[{i}].plants[{j}].x"), p.0));
                out.push((format!("field.plots[{i}].plants[{j}].y"), p.1));
            }
        }
        out
    }

    fn check_finite(&self) -> Result<(), ConfigError> {
        match self.float_fields().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((path, _)) => Err(ConfigError::NonFinite(path)),
            None => Ok(()),
        }
    }
}

/// A model answer: free-text reasoning followed by the configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDocument {
    pub reasoning: String,
    #[serde(flatten)]
    pub config: SimulationConfig,
}

/// Documents with a deterministic text form.
pub trait CanonicalSerialize {
    fn to_canonical_value(&self) -> Result<Value, ConfigError>;
}

impl CanonicalSerialize for SimulationConfig {
    fn to_canonical_value(&self) -> Result<Value, ConfigError> {
        self.check_finite()?;
        Ok(serde_json::to_value(self)?)
    }
}

impl CanonicalSerialize for ResponseDocument {
    fn to_canonical_value(&self) -> Result<Value, ConfigError> {
        self.config.check_finite()?;
        Ok(serde_json::to_value(self)?)
    }
}

/// Schema key order, two-space indentation, shortest round-trip floats.
pub fn canonical_serialize<T: CanonicalSerialize + ?Sized>(doc: &T) -> Result<String, ConfigError> {
    Ok(render_value(&doc.to_canonical_value()?))
}

/// Pretty-prints a JSON value in its existing member order.
pub fn render_value(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("serializing a serde_json::Value cannot fail")
}

/// Dotted paths of every object member in document order. Array-valued
/// members contribute one path and are not descended into.
pub fn flatten_keys(doc: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, seen: &mut HashSet<String>, out: &mut Vec<String>) {
        let Value::Object(map) = v else { return };
        for (k, child) in map {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            if seen.insert(path.clone()) {
                out.push(path.clone());
            }
            if child.is_object() {
                walk(&path, child, seen, out);
            }
        }
    }
    let mut out = Vec::new();
    walk("", doc, &mut HashSet::new(), &mut out);
    out
}

/// Looks up a dotted path (object members only).
pub fn value_at<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, key| v.as_object()?.get(key))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Integer,
    Number,
    String,
    Object,
    Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub path: String,
    #[serde(rename = "type")]
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default)]
    pub min_exclusive: bool,
    #[serde(default)]
    pub max_exclusive: bool,
    /// Name of a label list in the manifest (e.g. `soil_categories`).
    #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
    pub enum_ref: Option<String>,
    pub description: String,
    /// Element layout of array members, as rendered into JSON schema blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Value>,
}

impl SchemaEntry {
    pub fn depth(&self) -> usize {
        self.path.matches('.').count()
    }

    pub fn leaf_name(&self) -> &str {
        self.path.rsplit('.').next().unwrap_or(&self.path)
    }

    fn range_text(&self) -> Option<String> {
        let lo = self
            .min
            .map(|m| format!("{}{}", if self.min_exclusive { ">" } else { ">=" }, m));
        let hi = self
            .max
            .map(|m| format!("{}{}", if self.max_exclusive { "<" } else { "<=" }, m));
        match (lo, hi) {
            (Some(l), Some(h)) => Some(format!("{l}, {h}")),
            (Some(l), None) => Some(l),
            (None, Some(h)) => Some(h),
            (None, None) => None,
        }
    }

    /// One-line human description used in prompt parameter references.
    pub fn describe(&self) -> String {
        let mut s = self.description.clone();
        let mut notes = Vec::new();
        if let Some(u) = &self.unit {
            notes.push(u.clone());
        }
        if let Some(r) = self.range_text() {
            notes.push(r);
        }
        if !notes.is_empty() {
            s.push_str(&format!(" ({})", notes.join("; ")));
        }
        s
    }
}

/// Machine-readable list of config key paths, types, units and ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSchema {
    pub version: u32,
    pub soil_categories: Vec<String>,
    pub entries: Vec<SchemaEntry>,
}

impl ConfigSchema {
    /// The manifest shipped in `schema/config_schema.json`.
    pub fn builtin() -> &'static ConfigSchema {
        static SCHEMA: OnceLock<ConfigSchema> = OnceLock::new();
        SCHEMA.get_or_init(|| ConfigSchema::from_json(BUILTIN_SCHEMA).expect("builtin schema is valid"))
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let schema: ConfigSchema = serde_json::from_str(text)?;
        let mut seen = HashSet::new();
        for e in &schema.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(ConfigError::Schema(format!("duplicate path `{}`", e.path)));
            }
            if let Some((parent, _)) = e.path.rsplit_once('.') {
                if !seen.contains(parent) {
                    return Err(ConfigError::Schema(format!(
                        "`{}` listed before its parent `{parent}`",
                        e.path
                    )));
                }
            }
            if let Some(r) = &e.enum_ref {
                if r != "soil_categories" {
                    return Err(ConfigError::Schema(format!("unknown label list `{r}`")));
                }
            }
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Every dotted key path, in manifest order.
    pub fn key_paths(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.path.clone()).collect()
    }

    pub fn entry(&self, path: &str) -> Option<&SchemaEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    fn labels(&self, name: &str) -> &[String] {
        match name {
            "soil_categories" => &self.soil_categories,
            _ => &[],
        }
    }
}

/// A broken invariant, named by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub fn validate(c: &SimulationConfig) -> Vec<Violation> {
    validate_with(c, ConfigSchema::builtin())
}

pub fn validate_with(c: &SimulationConfig, schema: &ConfigSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    // Serializing turns NaN into null, so report those by name first.
    for (path, v) in c.float_fields() {
        if !v.is_finite() {
            out.push(Violation::new(path, "non-finite number"));
        }
    }
    let doc = match serde_json::to_value(c) {
        Ok(v) => v,
        Err(e) => {
            out.push(Violation::new("", e.to_string()));
            return out;
        }
    };
    for entry in &schema.entries {
        match value_at(&doc, &entry.path) {
            None => out.push(Violation::new(&entry.path, "missing")),
            Some(v) => check_entry(entry, v, schema, &mut out),
        }
    }
    let extents = c.extents();
    for (i, plot) in c.field.plots.iter().enumerate() {
        for (j, p) in plot.plants.iter().enumerate() {
            let pt = Point::from(*p);
            if pt.x.is_finite() && pt.y.is_finite() && !extents.contains(pt) {
                out.push(Violation::new(
                    format!("field.plots[{i}].plants[{j}]"),
                    format!(
                        "({}, {}) outside the {} x {} m plot",
                        pt.x, pt.y, extents.width_m, extents.height_m
                    ),
                ));
            }
        }
    }
    out
}

fn check_range(entry: &SchemaEntry, path: &str, x: f64, out: &mut Vec<Violation>) {
    if let Some(lo) = entry.min {
        if x < lo || (entry.min_exclusive && x == lo) {
            out.push(Violation::new(path, format!("{x} below minimum {lo}")));
        }
    }
    if let Some(hi) = entry.max {
        if x > hi || (entry.max_exclusive && x == hi) {
            out.push(Violation::new(path, format!("{x} above maximum {hi}")));
        }
    }
}

fn check_entry(entry: &SchemaEntry, v: &Value, schema: &ConfigSchema, out: &mut Vec<Violation>) {
    let path = entry.path.as_str();
    match entry.kind {
        FieldKind::Object if !v.is_object() => out.push(Violation::new(path, "expected object")),
        FieldKind::String => match v.as_str() {
            None => out.push(Violation::new(path, "expected string")),
            Some(s) => {
                if let Some(list) = &entry.enum_ref {
                    let labels = schema.labels(list);
                    if !labels.iter().any(|l| l == s) {
                        out.push(Violation::new(path, format!("`{s}` not in {list}")));
                    }
                }
            }
        },
        FieldKind::Integer => match v.as_i64().map(|i| i as f64).or_else(|| v.as_u64().map(|u| u as f64)) {
            None => out.push(Violation::new(path, "expected integer")),
            Some(x) => check_range(entry, path, x, out),
        },
        FieldKind::Number => match v.as_f64() {
            None => out.push(Violation::new(path, "expected number")),
            Some(x) => check_range(entry, path, x, out),
        },
        FieldKind::Array => match v.as_array() {
            None => out.push(Violation::new(path, "expected array")),
            Some(items) => {
                if let Some(Value::Array(shape)) = &entry.shape {
                    let fixed_len = shape.iter().all(Value::is_string);
                    if fixed_len && items.len() != shape.len() {
                        out.push(Violation::new(
                            path,
                            format!("expected {} elements, found {}", shape.len(), items.len()),
                        ));
                    }
                }
                for (i, item) in items.iter().enumerate() {
                    if let Some(x) = item.as_f64() {
                        check_range(entry, &format!("{path}[{i}]"), x, out);
                    }
                }
            }
        },
        FieldKind::Object => {}
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A valid hand-written config with sample sun angles.
    pub(crate) fn sample_config() -> SimulationConfig {
        SimulationConfig {
            seed: 42,
            metadata: Metadata {
                year: 2024,
                location: "Davis, CA".into(),
                plant_type: "cowpea".into(),
                dap: 10,
            },
            environment: Environment {
                soil_category: "loam".into(),
                soil_specular_coefficient: 0.1625,
                sun_elevation_deg: 62.9,
                sun_azimuth_deg: 169.4,
            },
            field: FieldLayout {
                plot_width_m: 1.5,
                plot_length_m: 3.8405,
                num_beds: 1,
                plots: vec![Plot {
                    bed_id: 1,
                    row_id: 1,
                    plants: vec![PlantLocation(-0.02, 1.6), PlantLocation(0.01, 0.4)],
                }],
            },
            plant_properties: PlantProperties {
                prospect_n: 1.8,
                chlorophyll_ug_cm2: 45.0,
                carotenoid_ug_cm2: 10.0,
                anthocyanin_ug_cm2: 1.0,
                water_g_cm2: 0.015,
                dry_matter_g_cm2: 0.005,
                leaf_pitch_deg: 30.0,
            },
            camera: Camera {
                shutter_speed_s: 0.001,
                iso: 100,
                resolution: [381, 1080],
                model: "generic-rgb".into(),
                height_m: 15.0,
                lookat: [0.0, 0.0, -1.0],
            },
        }
    }

    #[test]
    fn valid_config_has_no_violations() {
        let c = sample_config();
        assert_eq!(validate(&c), vec![]);
    }

    #[test]
    fn negative_elevation_is_flagged() {
        let mut c = sample_config();
        c.environment.sun_elevation_deg = -5.0;
        let v = validate(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "environment.sun_elevation_deg");
    }

    #[test]
    fn plant_outside_plot_is_flagged() {
        let mut c = sample_config();
        c.field.plots[0].plants[0] = PlantLocation(10.0, 0.0);
        let v = validate(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "field.plots[0].plants[0]");
    }

    #[test]
    fn other_range_violations() {
        let mut c = sample_config();
        c.environment.sun_azimuth_deg = 360.0;
        c.metadata.dap = 201;
        c.camera.resolution = [0, 1080];
        c.environment.soil_category = "gravel".into();
        c.plant_properties.prospect_n = 0.5;
        let paths: Vec<_> = validate(&c).into_iter().map(|v| v.path).collect();
        assert_eq!(
            paths,
            [
                "metadata.dap",
                "environment.soil_category",
                "environment.sun_azimuth_deg",
                "plant_properties.prospect_n",
                "camera.resolution[0]",
            ]
        );
    }

    #[test]
    fn nan_is_reported_not_serialized() {
        let mut c = sample_config();
        c.plant_properties.water_g_cm2 = f64::NAN;
        let v = validate(&c);
        assert!(v.iter().any(|v| v.path == "plant_properties.water_g_cm2"));
        assert!(matches!(
            canonical_serialize(&c),
            Err(ConfigError::NonFinite(p)) if p == "plant_properties.water_g_cm2"
        ));
    }

    #[test]
    fn flatten_examples() {
        let doc: Value = serde_json::from_str(r#"{"a":1,"b":{"c":2}}"#).unwrap();
        assert_eq!(flatten_keys(&doc), ["a", "b", "b.c"]);
        let doc: Value = serde_json::from_str(r#"{"plants":[[0,1],[2,3]]}"#).unwrap();
        assert_eq!(flatten_keys(&doc), ["plants"]);
        assert!(flatten_keys(&Value::from(3)).is_empty());
    }

    #[test]
    fn canonical_is_deterministic_and_round_trips() {
        let c = sample_config();
        let a = canonical_serialize(&c).unwrap();
        let b = canonical_serialize(&c).unwrap();
        assert_eq!(a, b);
        let back: SimulationConfig = serde_json::from_str(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.environment.soil_specular_coefficient, 0.1625);
        assert!(a.contains("0.1625"));
    }

    #[test]
    fn response_document_puts_reasoning_first() {
        let doc = ResponseDocument {
            reasoning: "Visual analysis: ten days of growth.".into(),
            config: sample_config(),
        };
        let text = canonical_serialize(&doc).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        let first = v.as_object().unwrap().keys().next().unwrap();
        assert_eq!(first, "reasoning");
        let back: ResponseDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn schema_rejects_out_of_order_entries() {
        let bad = r#"{"version":1,"soil_categories":[],"entries":[
            {"path":"a.b","type":"integer","description":""},
            {"path":"a","type":"object","description":""}]}"#;
        assert!(ConfigSchema::from_json(bad).is_err());
    }
}
