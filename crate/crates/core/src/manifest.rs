//! Dataset manifest: extents, ranges, detection and raster settings, image
//! list with ground-truth references, and synthetic dataset generation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime, TimeZone, Utc};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{load_coco, CocoError};
use crate::config::{canonical_serialize, ConfigError, ConfigSchema, ResponseDocument, SimulationConfig};
use crate::dataset::{sample_config, synth_row_layout, ParamRanges};
use crate::detection::{detect_plants, DetectParams, ImageError, PlotImage};
use crate::eval::{seed_from, GroundTruth, PartialTruth};
use crate::geometry::{Extents, PointSet};
use crate::prompt::{example_reasoning, FewShotExample, DEFAULT_NUM_EXAMPLES};
use crate::raster::{rasterize, RasterParams};
use crate::solar::{sun_position, SolarError};

/// Plot extents of the published example prompt.
pub const DEFAULT_EXTENTS: Extents = Extents::new(1.3521, 3.8405);

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Coco(#[from] CocoError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Solar(#[from] SolarError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn read(path: &Path) -> Result<String, ManifestError> {
    std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ManifestError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ManifestError> {
    serde_json::from_str(&read(path)?).map_err(|source| ManifestError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotEntry {
    pub image: PathBuf,
    /// File holding the example answer (a response document).
    pub answer: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialTruthRef {
    pub dap: u32,
    /// COCO annotation file with the plant boxes.
    pub coco: PathBuf,
    pub coco_image_id: u64,
    pub lat: f64,
    pub lon: f64,
    /// Local capture time, `YYYY-MM-DDTHH:MM:SS`; shifted by the manifest's
    /// UTC offset.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthRef {
    /// Path to a full configuration.
    Config(PathBuf),
    Partial(PartialTruthRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: PathBuf,
    pub truth: TruthRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub name: String,
    pub extents: Extents,
    pub stages: Vec<u32>,
    pub ranges: ParamRanges,
    pub detection: DetectParams,
    pub raster: RasterParams,
    pub utc_offset_hours: f64,
    pub seed: u64,
    pub plots_per_stage: usize,
    /// Images whose detected plants seed the synthetic layouts. Synthetic
    /// rows are used when empty.
    pub layout_sources: Vec<PathBuf>,
    pub few_shot: Vec<FewShotEntry>,
    pub images: Vec<ImageEntry>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            extents: DEFAULT_EXTENTS,
            stages: vec![10, 30, 50, 70, 90],
            ranges: ParamRanges::default(),
            detection: DetectParams::default(),
            raster: RasterParams::default(),
            utc_offset_hours: 0.0,
            seed: 0,
            plots_per_stage: 2,
            layout_sources: Vec::new(),
            few_shot: Vec::new(),
            images: Vec::new(),
            root: PathBuf::from("."),
        }
    }
}

impl DatasetManifest {
    pub fn from_json(text: &str, root: &Path) -> Result<Self, ManifestError> {
        let mut m: Self = serde_json::from_str(text).map_err(|source| ManifestError::Json {
            path: root.join("manifest.json"),
            source,
        })?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    /// Loads and checks a manifest; paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::from_json(&read(path)?, &root)?;
        m.check()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Static checks plus existence of every referenced file.
    pub fn check(&self) -> Result<(), ManifestError> {
        let invalid = |m: String| Err(ManifestError::Invalid(m));
        if !(self.extents.width_m > 0.0 && self.extents.height_m > 0.0) {
            return invalid("extents must be positive".into());
        }
        self.ranges
            .check(ConfigSchema::builtin())
            .map_err(ManifestError::Invalid)?;
        let mut ids = HashSet::new();
        let mut files: Vec<PathBuf> = Vec::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return invalid(format!("duplicate image id `{}`", img.id));
            }
            files.push(img.path.clone());
            match &img.truth {
                TruthRef::Config(p) => files.push(p.clone()),
                TruthRef::Partial(p) => {
                    files.push(p.coco.clone());
                    self.partial_time(p)?;
                }
            }
        }
        for f in &self.few_shot {
            files.push(f.image.clone());
            files.push(f.answer.clone());
        }
        for f in files {
            let full = self.resolve(&f);
            if !full.is_file() {
                return invalid(format!("missing file {}", full.display()));
            }
        }
        Ok(())
    }

    fn partial_time(&self, p: &PartialTruthRef) -> Result<chrono::DateTime<Utc>, ManifestError> {
        let local = NaiveDateTime::parse_from_str(&p.timestamp, "%Y-%m-%dT%H:%M:%S")
            .map_err(|e| ManifestError::Invalid(format!("timestamp `{}`: {e}", p.timestamp)))?;
        let offset = Duration::milliseconds((self.utc_offset_hours * 3_600_000.0).round() as i64);
        Ok(Utc.from_utc_datetime(&(local - offset)))
    }

    pub fn load_truth(&self, entry: &ImageEntry) -> Result<GroundTruth, ManifestError> {
        match &entry.truth {
            TruthRef::Config(p) => Ok(GroundTruth::Full(Box::new(parse_json(&self.resolve(p))?))),
            TruthRef::Partial(p) => {
                let images = load_coco(&self.resolve(&p.coco), self.extents)?;
                let img = images.get(&p.coco_image_id).ok_or_else(|| {
                    ManifestError::Invalid(format!("{}: no COCO image {}", entry.id, p.coco_image_id))
                })?;
                let sun = sun_position(p.lat, p.lon, self.partial_time(p)?)?;
                Ok(GroundTruth::Partial(PartialTruth {
                    dap: p.dap,
                    plants: img.plants.clone(),
                    sun,
                }))
            }
        }
    }

    pub fn few_shot_examples(&self) -> Result<Vec<FewShotExample>, ManifestError> {
        self.few_shot
            .iter()
            .map(|f| {
                Ok(FewShotExample {
                    image: Some(self.resolve(&f.image)),
                    answer_json: read(&self.resolve(&f.answer))?,
                })
            })
            .collect()
    }

    /// Writes the manifest with paths relative to its own directory.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write(path, &(text + "\n"))
    }
}

fn derive_seed(base: u64, tag: &str, index: usize) -> u64 {
    seed_from(&[&base.to_string(), tag, &index.to_string()])
}

fn layout_for(m: &DatasetManifest, sources: &[PointSet], index: usize) -> PointSet {
    if sources.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(m.seed, "count", index));
        let (lo, hi) = m.ranges.plant_count;
        let n = rng.gen_range(lo..=hi);
        synth_row_layout(n, m.extents, derive_seed(m.seed, "jitter", index))
    } else {
        sources[index % sources.len()].clone()
    }
}

fn render_entry(
    m: &DatasetManifest,
    out: &Path,
    stem: &str,
    config: &SimulationConfig,
    noise_seed: u64,
) -> Result<PathBuf, ManifestError> {
    let params = RasterParams {
        noise_seed,
        ..m.raster.clone()
    };
    let raster = rasterize(config, &params)?;
    let rel = PathBuf::from("images").join(format!("{stem}.png"));
    let full = out.join(&rel);
    if let Some(dir) = full.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    raster.image.save(&full)?;
    Ok(rel)
}

/// Samples and renders `stages × plots_per_stage` plots plus the few-shot
/// examples into `out`, and writes `out/manifest.json`.
pub fn generate_dataset(template: &DatasetManifest, out: &Path) -> Result<DatasetManifest, ManifestError> {
    template
        .ranges
        .check(ConfigSchema::builtin())
        .map_err(ManifestError::Invalid)?;
    let mut m = template.clone();
    m.root = out.to_path_buf();
    m.images.clear();
    m.few_shot.clear();
    let resolution = [m.raster.width_px, m.raster.height_px];

    let mut sources = Vec::new();
    for src in &template.layout_sources {
        let img = PlotImage::open(&template.resolve(src), m.extents)?;
        sources.push(detect_plants(&img, &m.detection));
    }

    let mut index = 0;
    for &dap in &m.stages {
        for k in 0..m.plots_per_stage {
            let id = format!("dap{dap:03}_p{k:03}");
            let layout = layout_for(&m, &sources, k);
            let config = sample_config(
                derive_seed(m.seed, "config", index),
                &m.ranges,
                &layout,
                dap,
                resolution,
            );
            let image = render_entry(&m, out, &id, &config, derive_seed(m.seed, "noise", index))?;
            let truth = PathBuf::from("truth").join(format!("{id}.json"));
            write(&out.join(&truth), &(canonical_serialize(&config)? + "\n"))?;
            m.images.push(ImageEntry {
                id,
                path: image,
                truth: TruthRef::Config(truth),
            });
            index += 1;
        }
    }

    for k in 0..DEFAULT_NUM_EXAMPLES {
        let stem = format!("example{}", k + 1);
        let dap = m.stages.get(k % m.stages.len().max(1)).copied().unwrap_or(10);
        let layout = layout_for(&m, &sources, 1000 + k);
        let config = sample_config(derive_seed(m.seed, "example", k), &m.ranges, &layout, dap, resolution);
        let image = render_entry(&m, out, &stem, &config, derive_seed(m.seed, "example-noise", k))?;
        let doc = ResponseDocument {
            reasoning: example_reasoning(&config),
            config,
        };
        let answer = PathBuf::from("few_shot").join(format!("{stem}.json"));
        write(&out.join(&answer), &(canonical_serialize(&doc)? + "\n"))?;
        m.few_shot.push(FewShotEntry { image, answer });
    }

    m.save(&out.join("manifest.json"))?;
    info!(
        "generated {} images and {} examples in {}",
        m.images.len(),
        m.few_shot.len(),
        out.display()
    );
    Ok(m)
}
