//! Aggregation of trial records into summary rows with bootstrap intervals
//! and compact letter displays, plus CSV and metadata output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::mean_guess_mae_empirical;
use crate::eval::{seed_from, GroundTruth, MetricRecord, INTEGRITY_METRICS, VALUE_METRICS};
use crate::manifest::DatasetManifest;
use crate::stats::{bonferroni, bootstrap_ci, kruskal_wallis, letter_display, mann_whitney_u, BOOTSTRAP_RESAMPLES};

pub const ALPHA: f64 = 0.05;
pub const CONFIDENCE: f64 = 0.95;
pub const CSV_HEADER: &str = "group,metric,mean,ci_lo,ci_hi,n,letter";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    /// One group per (model, method); letters compare models within a method.
    #[default]
    Method,
    /// One group per (model, method, DAP); letters compare within (method, DAP).
    Dap,
}

impl std::str::FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "method" => Ok(GroupBy::Method),
            "dap" => Ok(GroupBy::Dap),
            other => Err(format!("unknown grouping `{other}`; expected method or dap")),
        }
    }
}

fn keys(r: &MetricRecord, by: GroupBy) -> (String, String) {
    let stratum = match by {
        GroupBy::Method => r.method_label(),
        GroupBy::Dap => format!("{}/dap{}", r.method_label(), r.dap),
    };
    (format!("{}/{stratum}", r.model_name), stratum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub stratum: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
    /// Records in the group without a value for this metric.
    pub excluded: usize,
    pub letter: String,
}

pub fn metric_names() -> impl Iterator<Item = &'static str> {
    INTEGRITY_METRICS.iter().chain(VALUE_METRICS.iter()).copied()
}

/// Letters for the groups of one stratum and metric. Kruskal-Wallis gates
/// the pairwise Mann-Whitney tests (Bonferroni over all pairs).
pub fn stratum_letters(samples: &[Vec<f64>], means: &[f64]) -> Vec<String> {
    let k = samples.len();
    let all_a = || vec!["a".to_string(); k];
    let testable: Vec<usize> = (0..k).filter(|&i| !samples[i].is_empty()).collect();
    if testable.len() < 2 {
        return all_a();
    }
    let groups: Vec<Vec<f64>> = testable.iter().map(|&i| samples[i].clone()).collect();
    match kruskal_wallis(&groups) {
        Ok(r) if r.p_value < ALPHA => {}
        _ => return all_a(),
    }
    let mut pairs = Vec::new();
    let mut pvals = Vec::new();
    for a in 0..testable.len() {
        for b in a + 1..testable.len() {
            let p = mann_whitney_u(&groups[a], &groups[b]).map_or(1.0, |r| r.p_value);
            pairs.push((testable[a], testable[b]));
            pvals.push(p);
        }
    }
    let adjusted = bonferroni(&pvals, pvals.len()).expect("family size equals the number of p values");
    let mut sig = vec![vec![false; k]; k];
    for (&(a, b), p) in pairs.iter().zip(adjusted) {
        sig[a][b] = p < ALPHA;
        sig[b][a] = p < ALPHA;
    }
    letter_display(means, &sig).expect("matrix is square and symmetric")
}

/// Mean and interval per (group, metric); rows sorted by group then metric
/// order. Deterministic for fixed records and seed.
pub fn aggregate(records: &[MetricRecord], by: GroupBy, seed: u64) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<String, (String, Vec<&MetricRecord>)> = BTreeMap::new();
    for r in records {
        let (g, s) = keys(r, by);
        groups.entry(g).or_insert_with(|| (s, Vec::new())).1.push(r);
    }

    let mut rows = Vec::new();
    for (group, (stratum, recs)) in &groups {
        for metric in metric_names() {
            let values: Vec<f64> = recs.iter().filter_map(|r| r.metric(metric)).collect();
            let ci = bootstrap_ci(
                &values,
                BOOTSTRAP_RESAMPLES,
                CONFIDENCE,
                seed_from(&[&seed.to_string(), group, metric]),
            );
            rows.push(SummaryRow {
                group: group.clone(),
                stratum: stratum.clone(),
                metric: metric.to_string(),
                mean: ci.map(|c| c.mean),
                ci_lo: ci.map(|c| c.lo),
                ci_hi: ci.map(|c| c.hi),
                n: values.len(),
                excluded: recs.len() - values.len(),
                letter: "a".into(),
            });
        }
    }

    // Letters per (stratum, metric) across the groups sharing that stratum.
    let mut cells: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        cells
            .entry((row.stratum.clone(), row.metric.clone()))
            .or_default()
            .push(i);
    }
    for ((_, metric), idx) in cells {
        let samples: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                groups[&rows[i].group]
                    .1
                    .iter()
                    .filter_map(|r| r.metric(&metric))
                    .collect()
            })
            .collect();
        let means: Vec<f64> = idx.iter().map(|&i| rows[i].mean.unwrap_or(f64::INFINITY)).collect();
        for (&i, l) in idx.iter().zip(stratum_letters(&samples, &means)) {
            rows[i].letter = l;
        }
    }
    rows
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.group),
            csv_field(&r.metric),
            num(r.mean),
            num(r.ci_lo),
            num(r.ci_hi),
            r.n,
            r.letter
        );
    }
    out
}

/// Mean-guess MAE per value metric: a quarter of each uniform range, and
/// the empirical mean absolute deviation for DAP and plant count.
pub fn baselines(manifest: &DatasetManifest, truths: &[GroundTruth]) -> BTreeMap<String, f64> {
    let metric_for = |path: &str| -> Option<&'static str> {
        Some(match path {
            "environment.sun_elevation_deg" => "sun_elev_abs_err",
            "environment.sun_azimuth_deg" => "sun_azim_abs_err",
            "plant_properties.prospect_n" => "prospect_n_abs_err",
            "plant_properties.chlorophyll_ug_cm2" => "chlorophyll_abs_err",
            "plant_properties.carotenoid_ug_cm2" => "carotenoid_abs_err",
            "plant_properties.anthocyanin_ug_cm2" => "anthocyanin_abs_err",
            "plant_properties.water_g_cm2" => "water_abs_err",
            "plant_properties.dry_matter_g_cm2" => "dry_matter_abs_err",
            "plant_properties.leaf_pitch_deg" => "leaf_pitch_abs_err",
            _ => return None,
        })
    };
    let mut out = BTreeMap::new();
    for (path, range) in manifest.ranges.continuous() {
        if let Some(m) = metric_for(path) {
            out.insert(m.to_string(), range.mean_guess_mae());
        }
    }
    let daps: Vec<f64> = truths.iter().map(|t| f64::from(t.dap())).collect();
    let counts: Vec<f64> = truths.iter().map(|t| t.plants().len() as f64).collect();
    if let Some(v) = mean_guess_mae_empirical(&daps) {
        out.insert("dap_abs_err".into(), v);
    }
    if let Some(v) = mean_guess_mae_empirical(&counts) {
        out.insert("plant_count_abs_err".into(), v);
    }
    out
}

/// Report settings and exclusion counts, written next to the CSV.
pub fn metadata(rows: &[SummaryRow], by: GroupBy, seed: u64, baselines: Option<&BTreeMap<String, f64>>) -> Value {
    let mut exclusions: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.excluded > 0) {
        exclusions.entry(&r.group).or_default().insert(&r.metric, r.excluded);
    }
    json!({
        "seed": seed,
        "group_by": by,
        "confidence_interval": {
            "method": "bias-corrected percentile bootstrap of the mean",
            "resamples": BOOTSTRAP_RESAMPLES,
            "confidence": CONFIDENCE,
        },
        "letters": {
            "omnibus": "Kruskal-Wallis H (tie-corrected, chi-square p)",
            "pairwise": "two-sided Mann-Whitney U (exact for n <= 8, else normal with tie and continuity correction)",
            "correction": "Bonferroni over all pairs within a stratum",
            "alpha": ALPHA,
            "display": "insert-and-absorb; letters assigned from the lowest mean",
        },
        "integrity": {
            "syntax_error": "strict JSON parse of the extracted text; missing JSON counts as an error",
            "repaired_syntax_error": "parse after trailing-comma, closing-bracket and control-character repair",
            "key_missing_rate": "array-valued members count as one key; unparseable responses count as 1",
            "bleu4_input": "extracted JSON without the reasoning member, pretty-printed",
            "bleu4_tokens": "whitespace split with each of {}[],:\" as its own token",
        },
        "detection": "chromaticity excess green 2g - r - b, Otsu threshold by default",
        "value_metrics": "averaged over trials that produced a value; counts of other trials are listed in exclusions",
        "exclusions": exclusions,
        "mean_guess_baselines": baselines,
    })
}

/// Writes `summary.csv` and `report_metadata.json` into `dir`.
pub fn write_report(
    dir: &Path,
    rows: &[SummaryRow],
    by: GroupBy,
    seed: u64,
    baselines: Option<&BTreeMap<String, f64>>,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.csv"), to_csv(rows))?;
    let meta = serde_json::to_string_pretty(&metadata(rows, by, seed, baselines)).expect("metadata serializes");
    std::fs::write(dir.join("report_metadata.json"), meta + "\n")
}
