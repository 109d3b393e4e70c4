//! Trial execution and per-trial metrics.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{Client, ClientError, FailureKind, RawResponse};
use crate::config::{canonical_serialize, value_at, ConfigSchema, SimulationConfig};
use crate::geometry::{angular_difference_deg, chamfer_distance, Extents, Point, PointSet};
use crate::integrity::{assess, IntegrityReport};
use crate::manifest::{DatasetManifest, ManifestError};
use crate::prompt::{build, build_blind, grounding_from_truth, method_label, PromptBundle, PromptError, PromptOptions};
use crate::solar::SunPosition;

/// First eight bytes (little endian) of SHA-256 over the NUL-joined parts.
pub fn seed_from(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn trial_seed(suite_seed: u64, image_id: &str, model: &str, method: &str) -> u64 {
    seed_from(&[&suite_seed.to_string(), image_id, model, method])
}

/// Ground truth available for real images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialTruth {
    pub dap: u32,
    pub plants: PointSet,
    pub sun: SunPosition,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Full(Box<SimulationConfig>),
    Partial(PartialTruth),
}

impl GroundTruth {
    pub fn dap(&self) -> u32 {
        match self {
            GroundTruth::Full(c) => c.metadata.dap,
            GroundTruth::Partial(p) => p.dap,
        }
    }

    pub fn plants(&self) -> PointSet {
        match self {
            GroundTruth::Full(c) => c.plant_points(),
            GroundTruth::Partial(p) => p.plants.clone(),
        }
    }

    pub fn sun(&self) -> SunPosition {
        match self {
            GroundTruth::Full(c) => SunPosition {
                elevation_deg: c.environment.sun_elevation_deg,
                azimuth_deg: c.environment.sun_azimuth_deg,
            },
            GroundTruth::Partial(p) => p.sun,
        }
    }

    pub fn extents(&self) -> Extents {
        match self {
            GroundTruth::Full(c) => c.extents(),
            GroundTruth::Partial(p) => p.plants.extents,
        }
    }

    pub fn config(&self) -> Option<&SimulationConfig> {
        match self {
            GroundTruth::Full(c) => Some(c),
            GroundTruth::Partial(_) => None,
        }
    }

    /// Canonical text BLEU is scored against; real images have none.
    pub fn reference_text(&self) -> Option<String> {
        self.config()
            .map(|c| canonical_serialize(c).expect("ground truth is finite"))
    }

    pub fn grounding(&self) -> String {
        grounding_from_truth(self.dap(), &self.plants(), self.sun(), self.extents())
    }
}

/// Per-trial metric vector. Missing values are `None`, never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trial_id: String,
    pub model_name: String,
    pub method_id: u8,
    pub blind: bool,
    pub dap: u32,
    pub image_id: String,
    pub seed: u64,
    pub json_found: bool,
    pub strict_parse_ok: bool,
    pub repaired_parse_ok: bool,
    pub repair_log: Vec<String>,
    pub missing_keys: Option<Vec<String>>,
    pub key_missing_rate: Option<f64>,
    pub extra_keys: Vec<String>,
    pub bleu4: Option<f64>,
    pub dap_abs_err: Option<f64>,
    pub plant_count_abs_err: Option<f64>,
    pub chamfer_m: Option<f64>,
    /// The response parsed but predicted no plants.
    pub chamfer_no_prediction: bool,
    pub sun_elev_abs_err: Option<f64>,
    pub sun_azim_abs_err: Option<f64>,
    pub leaf_pitch_abs_err: Option<f64>,
    pub chlorophyll_abs_err: Option<f64>,
    pub carotenoid_abs_err: Option<f64>,
    pub anthocyanin_abs_err: Option<f64>,
    pub water_abs_err: Option<f64>,
    pub dry_matter_abs_err: Option<f64>,
    pub prospect_n_abs_err: Option<f64>,
    pub latency_ms: Option<u64>,
    pub failure: Option<FailureKind>,
    pub failure_message: Option<String>,
}

/// Integrity measures averaged over every trial.
pub const INTEGRITY_METRICS: [&str; 4] = ["syntax_error", "repaired_syntax_error", "key_missing_rate", "bleu4"];

/// Value measures averaged over trials that produced them.
pub const VALUE_METRICS: [&str; 14] = [
    "dap_abs_err",
    "plant_count_abs_err",
    "chamfer_m",
    "sun_elev_abs_err",
    "sun_azim_abs_err",
    "leaf_pitch_abs_err",
    "chlorophyll_abs_err",
    "carotenoid_abs_err",
    "anthocyanin_abs_err",
    "water_abs_err",
    "dry_matter_abs_err",
    "prospect_n_abs_err",
    "chamfer_no_prediction",
    "latency_ms",
];

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl MetricRecord {
    pub fn method_label(&self) -> String {
        method_label(self.method_id, self.blind)
    }

    /// Value of a named metric; see [`INTEGRITY_METRICS`] and [`VALUE_METRICS`].
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "syntax_error" => Some(flag(!self.strict_parse_ok)),
            "repaired_syntax_error" => Some(flag(!self.repaired_parse_ok)),
            "key_missing_rate" => Some(self.key_missing_rate.unwrap_or(1.0)),
            "bleu4" => self.bleu4,
            "dap_abs_err" => self.dap_abs_err,
            "plant_count_abs_err" => self.plant_count_abs_err,
            "chamfer_m" => self.chamfer_m,
            "sun_elev_abs_err" => self.sun_elev_abs_err,
            "sun_azim_abs_err" => self.sun_azim_abs_err,
            "leaf_pitch_abs_err" => self.leaf_pitch_abs_err,
            "chlorophyll_abs_err" => self.chlorophyll_abs_err,
            "carotenoid_abs_err" => self.carotenoid_abs_err,
            "anthocyanin_abs_err" => self.anthocyanin_abs_err,
            "water_abs_err" => self.water_abs_err,
            "dry_matter_abs_err" => self.dry_matter_abs_err,
            "prospect_n_abs_err" => self.prospect_n_abs_err,
            "chamfer_no_prediction" => self.repaired_parse_ok.then_some(flag(self.chamfer_no_prediction)),
            "latency_ms" => self.latency_ms.map(|v| v as f64),
            _ => None,
        }
    }
}

fn number(doc: &Value, path: &str) -> Option<f64> {
    value_at(doc, path)?.as_f64().filter(|v| v.is_finite())
}

/// Plant positions listed under `field.plots[*].plants`; `None` when the
/// response has no plot list.
pub fn predicted_plants(doc: &Value) -> Option<Vec<Point>> {
    let plots = value_at(doc, "field.plots")?.as_array()?;
    let mut out = Vec::new();
    for plot in plots {
        let Some(plants) = plot.get("plants").and_then(Value::as_array) else {
            continue;
        };
        for p in plants {
            let xy = p.as_array().filter(|a| a.len() >= 2);
            if let Some([x, y, ..]) = xy.map(Vec::as_slice) {
                if let (Some(x), Some(y)) = (x.as_f64(), y.as_f64()) {
                    if x.is_finite() && y.is_finite() {
                        out.push(Point::new(x, y));
                    }
                }
            }
        }
    }
    Some(out)
}

/// Identification of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialInfo {
    pub image_id: String,
    pub model_name: String,
    pub method_id: u8,
    pub blind: bool,
    pub seed: u64,
}

impl TrialInfo {
    pub fn trial_id(&self) -> String {
        format!(
            "{}/{}/{}",
            self.image_id,
            self.model_name,
            method_label(self.method_id, self.blind)
        )
    }
}

/// Scores one response (or transport failure) against ground truth.
pub fn evaluate(
    info: &TrialInfo,
    outcome: &Result<RawResponse, ClientError>,
    truth: &GroundTruth,
    truth_keys: &[String],
) -> MetricRecord {
    let reference = truth.reference_text();
    let mut record = MetricRecord {
        trial_id: info.trial_id(),
        model_name: info.model_name.clone(),
        method_id: info.method_id,
        blind: info.blind,
        dap: truth.dap(),
        image_id: info.image_id.clone(),
        seed: info.seed,
        json_found: false,
        strict_parse_ok: false,
        repaired_parse_ok: false,
        repair_log: Vec::new(),
        missing_keys: None,
        key_missing_rate: None,
        extra_keys: Vec::new(),
        bleu4: None,
        dap_abs_err: None,
        plant_count_abs_err: None,
        chamfer_m: None,
        chamfer_no_prediction: false,
        sun_elev_abs_err: None,
        sun_azim_abs_err: None,
        leaf_pitch_abs_err: None,
        chlorophyll_abs_err: None,
        carotenoid_abs_err: None,
        anthocyanin_abs_err: None,
        water_abs_err: None,
        dry_matter_abs_err: None,
        prospect_n_abs_err: None,
        latency_ms: None,
        failure: None,
        failure_message: None,
    };
    let response = match outcome {
        Ok(r) => r,
        Err(e) => {
            record.failure = Some(e.kind());
            record.failure_message = Some(e.to_string());
            return record;
        }
    };
    record.latency_ms = Some(response.latency_ms);

    let (report, doc): (IntegrityReport, Option<Value>) =
        assess(&response.text, Some(truth_keys), reference.as_deref());
    record.json_found = report.json_found;
    record.strict_parse_ok = report.strict_parse_ok;
    record.repaired_parse_ok = report.repaired_parse_ok;
    record.repair_log = report.repair_log.iter().map(ToString::to_string).collect();
    record.missing_keys = report.missing_keys;
    record.key_missing_rate = report.key_missing_rate;
    record.extra_keys = report.extra_keys;
    record.bleu4 = report.bleu4;
    let Some(doc) = doc else {
        return record;
    };

    let abs = |path: &str, t: f64| number(&doc, path).map(|p| (p - t).abs());
    record.dap_abs_err = abs("metadata.dap", f64::from(truth.dap()));
    let sun = truth.sun();
    record.sun_elev_abs_err = abs("environment.sun_elevation_deg", sun.elevation_deg);
    record.sun_azim_abs_err =
        number(&doc, "environment.sun_azimuth_deg").map(|p| angular_difference_deg(p, sun.azimuth_deg));

    let truth_plants = truth.plants();
    if let Some(pred) = predicted_plants(&doc) {
        record.plant_count_abs_err = Some((pred.len() as f64 - truth_plants.len() as f64).abs());
        if pred.is_empty() {
            record.chamfer_no_prediction = true;
        } else {
            let pred = PointSet::new(pred, truth_plants.extents);
            record.chamfer_m = chamfer_distance(&pred, &truth_plants).ok();
        }
    }

    if let Some(c) = truth.config() {
        let p = &c.plant_properties;
        record.leaf_pitch_abs_err = abs("plant_properties.leaf_pitch_deg", p.leaf_pitch_deg);
        record.chlorophyll_abs_err = abs("plant_properties.chlorophyll_ug_cm2", p.chlorophyll_ug_cm2);
        record.carotenoid_abs_err = abs("plant_properties.carotenoid_ug_cm2", p.carotenoid_ug_cm2);
        record.anthocyanin_abs_err = abs("plant_properties.anthocyanin_ug_cm2", p.anthocyanin_ug_cm2);
        record.water_abs_err = abs("plant_properties.water_g_cm2", p.water_g_cm2);
        record.dry_matter_abs_err = abs("plant_properties.dry_matter_g_cm2", p.dry_matter_g_cm2);
        record.prospect_n_abs_err = abs("plant_properties.prospect_n", p.prospect_n);
    }
    record
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("image {image}: {source}")]
    Prompt {
        image: String,
        #[source]
        source: PromptError,
    },
    #[error("no methods selected")]
    NoMethods,
    #[error("no endpoints configured")]
    NoEndpoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub methods: Vec<u8>,
    pub include_blind: bool,
    pub seed: u64,
    /// Worker threads issuing requests.
    pub parallel: usize,
    pub prompt: PromptOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            methods: crate::prompt::METHODS.to_vec(),
            include_blind: false,
            seed: 0,
            parallel: 4,
            prompt: PromptOptions::default(),
        }
    }
}

struct Trial {
    info: TrialInfo,
    bundle: PromptBundle,
    truth: usize,
}

/// Runs every (image, model, method[, blind]) trial. Truth loading and
/// prompt construction finish before the first request; records come back
/// in trial order.
pub fn run_suite(
    manifest: &DatasetManifest,
    clients: &[Client],
    opts: &SuiteOptions,
) -> Result<Vec<MetricRecord>, SuiteError> {
    if opts.methods.is_empty() {
        return Err(SuiteError::NoMethods);
    }
    if clients.is_empty() {
        return Err(SuiteError::NoEndpoints);
    }
    manifest.check()?;
    let truths = manifest
        .images
        .iter()
        .map(|e| manifest.load_truth(e))
        .collect::<Result<Vec<_>, _>>()?;
    let needs_examples = opts.methods.iter().any(|&m| m >= 3);
    let examples = if needs_examples {
        manifest.few_shot_examples()?
    } else {
        Vec::new()
    };
    let schema = ConfigSchema::builtin();
    let truth_keys = schema.key_paths();

    let mut trials = Vec::new();
    for (ti, (entry, truth)) in manifest.images.iter().zip(&truths).enumerate() {
        let target: PathBuf = manifest.resolve(&entry.path);
        for &method in &opts.methods {
            let grounding = (method == 5).then(|| truth.grounding());
            let bundle = build(
                method,
                schema,
                &examples,
                grounding.as_deref(),
                target.clone(),
                opts.prompt,
            )
            .map_err(|source| SuiteError::Prompt {
                image: entry.id.clone(),
                source,
            })?;
            for client in clients {
                let model = client.config().model_name.clone();
                let variants: &[bool] = if opts.include_blind { &[false, true] } else { &[false] };
                for &blind in variants {
                    let b = if blind { build_blind(&bundle) } else { bundle.clone() };
                    trials.push(Trial {
                        info: TrialInfo {
                            image_id: entry.id.clone(),
                            model_name: model.clone(),
                            method_id: method,
                            blind,
                            seed: trial_seed(opts.seed, &entry.id, &model, &b.label()),
                        },
                        bundle: b,
                        truth: ti,
                    });
                }
            }
        }
    }
    info!("running {} trials", trials.len());

    let client_for = |model: &str| {
        clients
            .iter()
            .find(|c| c.config().model_name == model)
            .expect("trial models come from the client list")
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<MetricRecord>>> = Mutex::new(vec![None; trials.len()]);
    std::thread::scope(|s| {
        for _ in 0..opts.parallel.clamp(1, trials.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(t) = trials.get(i) else { break };
                let outcome = client_for(&t.info.model_name).chat(&t.bundle, Some(t.info.seed));
                if let Err(e) = &outcome {
                    warn!("{}: {e}", t.info.trial_id());
                }
                let record = evaluate(&t.info, &outcome, &truths[t.truth], &truth_keys);
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(record);
            });
        }
    });
    Ok(results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every trial produces a record"))
        .collect())
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<MetricRecord>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
