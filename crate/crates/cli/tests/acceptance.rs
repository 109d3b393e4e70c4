//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if
//! any criterion failed. Runs without the libtest harness so the lines are
//! always printed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chrono::{DateTime, Utc};
use common::{
    brute_chamfer, core_dir, golden_bundles, golden_dir, golden_keys, integrity_corpus, render_bundle, row_config,
    scattered_config, Defect, EXTENTS,
};
use plotbench::bleu::bleu4;
use plotbench::dataset::{mean_guess_mae_uniform, ParamRange};
use plotbench::detection::{detect_plants, DetectParams};
use plotbench::geometry::{
    angular_difference_deg, chamfer_distance, chamfer_points, pixel_pitch, rel_to_meters, Point, PointSet,
};
use plotbench::integrity::{assess, RepairAction};
use plotbench::prompt::{extends, grounding_from_truth, Part, BLIND_PROMPT};
use plotbench::raster::{rasterize, RasterParams};
use plotbench::solar::{sun_position, SunPosition};
use plotbench::stats::{kruskal_wallis, mann_whitney_u, PMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(core_dir().join("tests/fixtures").join(name)).unwrap()
}

fn chamfer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut set = || -> Vec<Point> {
            (0..rng.gen_range(1..=50))
                .map(|_| Point::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect()
        };
        let (a, b) = (set(), set());
        worst = worst.max((chamfer_points(&a, &b).map_err(|e| e.to_string())? - brute_chamfer(&a, &b)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    check(secs < 1.0, || format!("took {secs:.2} s"))?;
    Ok(format!("200 pairs, max deviation {worst:.1e} m, {secs:.3} s"))
}

fn quarter_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = rng.gen_range(-100.0..100.0);
        let b = a + rng.gen_range(0.1..200.0);
        let mean = ParamRange::uniform(a, b).mean();
        let mae = (0..100_000).map(|_| (rng.gen_range(a..b) - mean).abs()).sum::<f64>() / 100_000.0;
        let law = mean_guess_mae_uniform(a, b);
        check(law == (b - a) / 4.0, || format!("law for [{a}, {b}] is {law}"))?;
        worst = worst.max(((mae - law) / law).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 0.02, || format!("relative error {worst:.4}"))?;
    check(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!(
        "10 ranges, max relative error {:.3}%, {secs:.2} s",
        worst * 100.0
    ))
}

fn table_conversion() -> Outcome {
    let published = [(0.163, 0.073), (0.162, 0.085)];
    let pts: Vec<Point> = published
        .iter()
        .map(|&(rx, ry)| rel_to_meters(rx, ry, EXTENTS))
        .collect();
    for (&(rx, ry), p) in published.iter().zip(&pts) {
        let (x, y) = ((rx - 0.5) * 1.3521, -(ry - 0.5) * 3.8405);
        check((p.x - x).abs() < 1e-6 && (p.y - y).abs() < 1e-6, || {
            format!("({rx}, {ry}) -> {p:?}")
        })?;
    }
    let sun = SunPosition {
        elevation_deg: 62.9,
        azimuth_deg: 169.4,
    };
    let text = grounding_from_truth(10, &PointSet::new(pts.clone(), EXTENTS), sun, EXTENTS);
    check(text.contains("[(0.163, 0.073), (0.162, 0.085)]"), || {
        format!("grounding: {text}")
    })?;
    Ok(format!(
        "({:.4}, {:.4}) and ({:.4}, {:.4}) m; inverse exact to 3 decimals",
        pts[0].x, pts[0].y, pts[1].x, pts[1].y
    ))
}

fn detection_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut limit = 0.0;
    for i in 0..100u64 {
        let n = rng.gen_range(5..=20);
        let c = scattered_config(5000 + i, n, 10);
        let img = rasterize(
            &c,
            &RasterParams {
                noise_seed: i,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?
        .image;
        let found = detect_plants(&img, &DetectParams::default());
        check(found.len() == n, || format!("plot {i}: {} of {n} plants", found.len()))?;
        let (px, py) = pixel_pitch(img.width(), img.height(), img.extents);
        limit = 2.0 * px.max(py);
        worst = worst.max(chamfer_distance(&found, &c.plant_points()).map_err(|e| e.to_string())?);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= limit, || format!("chamfer {worst:.5} m > {limit:.5} m"))?;
    check(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "100/100 counts exact, max chamfer {worst:.5} m (limit {limit:.5}), {secs:.1} s"
    ))
}

fn integrity() -> Outcome {
    let keys = golden_keys();
    let corpus = integrity_corpus(&row_config(5, 12, 30), 2024);
    let (mut syntax, mut missing, mut planted_syntax, mut planted_missing) = (0, 0, 0, 0);
    let (mut quoted, mut quoted_ok) = (0, 0);
    for p in &corpus {
        let (r, _) = assess(&p.text, Some(&keys), None);
        syntax += usize::from(!r.strict_parse_ok);
        missing += r.missing_keys.as_ref().map_or(keys.len(), Vec::len);
        planted_syntax += usize::from(p.syntax_error);
        planted_missing += p.missing;
        let expected = match p.defect {
            Defect::TrailingComma => Some(RepairAction::TrailingComma { count: 1 }),
            Defect::MissingBrace => Some(RepairAction::CloseBrace { count: 1 }),
            _ => None,
        };
        if let Some(action) = expected {
            quoted += 1;
            quoted_ok +=
                usize::from(r.repaired_parse_ok && r.repair_log == [action] && r.key_missing_rate == Some(0.0));
        }
    }
    let n = corpus.len() as f64;
    let k = keys.len() as f64;
    check(corpus.len() == 200, || format!("{} responses", corpus.len()))?;
    check(syntax == planted_syntax, || {
        format!("syntax errors {syntax} vs planted {planted_syntax}")
    })?;
    check(missing == planted_missing, || {
        format!("missing keys {missing} vs planted {planted_missing}")
    })?;
    check(quoted_ok == quoted, || {
        format!("repaired {quoted_ok}/{quoted} quoted defects")
    })?;
    Ok(format!(
        "syntax-error rate {:.3}, key-missing rate {:.5} (both as planted); {quoted_ok}/{quoted} comma/brace defects repaired",
        syntax as f64 / n,
        missing as f64 / (n * k)
    ))
}

#[derive(Deserialize)]
struct BleuPair {
    candidate: String,
    reference: String,
    bleu4: f64,
}

fn bleu_oracle() -> Outcome {
    let pairs: Vec<BleuPair> = serde_json::from_str(&read_fixture("bleu_reference.json")).map_err(|e| e.to_string())?;
    check(pairs.len() == 20, || format!("{} fixture pairs", pairs.len()))?;
    let mut worst = 0.0f64;
    for (i, p) in pairs.iter().enumerate() {
        let d = (bleu4(&p.candidate, &p.reference) - p.bleu4).abs();
        check(d < 1e-6, || format!("pair {i} off by {d:e}"))?;
        worst = worst.max(d);
        if !p.reference.trim().is_empty() {
            let s = bleu4(&p.reference, &p.reference);
            check(s == 1.0, || format!("identity pair {i} scored {s}"))?;
        }
    }
    Ok(format!("20 pairs, max deviation {worst:.1e}; identity pairs 1.0"))
}

#[derive(Deserialize)]
struct SolarVector {
    label: String,
    lat: f64,
    lon: f64,
    utc: DateTime<Utc>,
    elevation_deg: f64,
    azimuth_deg: f64,
}

fn solar() -> Outcome {
    let v: Vec<SolarVector> = serde_json::from_str(&read_fixture("solar_reference.json")).map_err(|e| e.to_string())?;
    check(v.len() == 50, || format!("{} vectors", v.len()))?;
    check(v.iter().any(|r| r.label == "nrel-spa-validation"), || {
        "published case missing".into()
    })?;
    let (mut de, mut da) = (0.0f64, 0.0f64);
    for r in &v {
        let s = sun_position(r.lat, r.lon, r.utc).map_err(|e| e.to_string())?;
        de = de.max((s.elevation_deg - r.elevation_deg).abs());
        da = da.max(angular_difference_deg(s.azimuth_deg, r.azimuth_deg));
    }
    check(de <= 0.1 && da <= 0.1, || {
        format!("max error elevation {de:.3}°, azimuth {da:.3}°")
    })?;
    Ok(format!("50 vectors, max error elevation {de:.4}°, azimuth {da:.4}°"))
}

#[derive(Deserialize)]
struct MwCase {
    a: Vec<f64>,
    b: Vec<f64>,
    u: f64,
    p: f64,
    method: PMethod,
}

#[derive(Deserialize)]
struct KwCase {
    groups: Vec<Vec<f64>>,
    h: f64,
    p: f64,
}

#[derive(Deserialize)]
struct StatsReference {
    mann_whitney: Vec<MwCase>,
    kruskal_wallis: Vec<KwCase>,
}

fn statistics() -> Outcome {
    let r: StatsReference = serde_json::from_str(&read_fixture("stats_reference.json")).map_err(|e| e.to_string())?;
    let mut exact = 0;
    for (i, c) in r.mann_whitney.iter().enumerate() {
        let got = mann_whitney_u(&c.a, &c.b).map_err(|e| e.to_string())?;
        check(got.method == c.method, || {
            format!("MW case {i}: method {:?}", got.method)
        })?;
        check((got.u - c.u).abs() < 1e-6, || {
            format!("MW case {i}: U {} vs {}", got.u, c.u)
        })?;
        check((got.p_value - c.p).abs() < 1e-4, || {
            format!("MW case {i}: p {} vs {}", got.p_value, c.p)
        })?;
        exact += usize::from(c.method == PMethod::Exact);
    }
    for (i, c) in r.kruskal_wallis.iter().enumerate() {
        let got = kruskal_wallis(&c.groups).map_err(|e| e.to_string())?;
        check((got.statistic - c.h).abs() < 1e-6, || {
            format!("KW case {i}: H {} vs {}", got.statistic, c.h)
        })?;
        check((got.p_value - c.p).abs() < 1e-4, || {
            format!("KW case {i}: p {} vs {}", got.p_value, c.p)
        })?;
    }
    let small = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
    check((small.p_value - 1.0 / 3.0).abs() < 1e-12, || {
        format!("[1,2] vs [3,4]: p {}", small.p_value)
    })?;
    Ok(format!(
        "{} Mann-Whitney ({exact} exact) and {} Kruskal-Wallis cases; [1,2] vs [3,4] p = {:.6}",
        r.mann_whitney.len(),
        r.kruskal_wallis.len(),
        small.p_value
    ))
}

fn prompt_ladder() -> Outcome {
    let bundles = golden_bundles();
    for (label, b) in &bundles {
        let path = golden_dir().join(format!("{label}.json"));
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        check(render_bundle(b) == want, || {
            format!("{label} differs from its golden file")
        })?;
    }
    let sighted: Vec<_> = bundles.iter().filter(|(_, b)| !b.blind).map(|(_, b)| b).collect();
    for w in sighted.windows(2) {
        check(extends(w[0], w[1]), || {
            format!("m{} does not extend m{}", w[1].method, w[0].method)
        })?;
    }
    for (label, b) in bundles.iter().filter(|(_, b)| b.blind) {
        let last = &b.messages.last().unwrap().parts;
        check(last.as_slice() == [Part::text(BLIND_PROMPT)], || {
            format!("{label} final turn {last:?}")
        })?;
    }
    Ok(format!(
        "{} golden files byte-equal; ladder strict; blind ends with \"{BLIND_PROMPT}\"",
        bundles.len()
    ))
}

fn plotbench(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_plotbench"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!(
            "plotbench {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

struct Row {
    group: String,
    metric: String,
    mean: f64,
    lo: f64,
    hi: f64,
    letter: String,
}

fn summary(dir: &Path) -> Result<Vec<Row>, String> {
    let text = std::fs::read_to_string(dir.join("summary.csv")).map_err(|e| e.to_string())?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Ok(Row {
                group: f[0].into(),
                metric: f[1].into(),
                mean: num(f[2])?,
                lo: num(f[3])?,
                hi: num(f[4])?,
                letter: f[6].into(),
            })
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let (ds, manifest) = (d("ds"), d("ds/manifest.json"));
    plotbench(&["generate", "--out", &ds, "--plots-per-stage", "1"])?;

    let echo = d("echo");
    plotbench(&[
        "run",
        "--manifest",
        &manifest,
        "--endpoint",
        "mock",
        "--model",
        "alpha",
        "--model",
        "beta",
        "--blind",
        "--out",
        &echo,
    ])?;
    // Blind trials answer without the image and are scored separately.
    let records = std::fs::read_to_string(d("echo/records.jsonl")).map_err(|e| e.to_string())?;
    let sighted: Vec<&str> = records.lines().filter(|l| l.contains("\"blind\":false")).collect();
    std::fs::write(d("echo/sighted.jsonl"), sighted.join("\n") + "\n").map_err(|e| e.to_string())?;
    plotbench(&[
        "report",
        "--records",
        &d("echo/sighted.jsonl"),
        "--manifest",
        &manifest,
        "--out",
        &echo,
    ])?;
    let rows = summary(dir.path().join("echo").as_path())?;
    check(rows.len() == 2 * 5 * 18, || format!("{} summary rows", rows.len()))?;
    for r in rows.iter().filter(|r| r.metric != "latency_ms") {
        let want = if r.metric == "bleu4" { 1.0 } else { 0.0 };
        check(r.mean == want && r.lo == want && r.hi == want, || {
            format!("{} {}: {} [{}, {}]", r.group, r.metric, r.mean, r.lo, r.hi)
        })?;
    }
    check(rows.iter().all(|r| r.letter == "a"), || {
        "letter other than \"a\"".into()
    })?;

    let perturb = d("perturb");
    plotbench(&[
        "run",
        "--manifest",
        &manifest,
        "--endpoint",
        "mock:perturb",
        "--out",
        &perturb,
        "--report",
    ])?;
    let rows = summary(dir.path().join("perturb").as_path())?;
    let by: HashMap<(&str, &str), f64> = rows
        .iter()
        .map(|r| ((r.group.as_str(), r.metric.as_str()), r.mean))
        .collect();
    for m in 1..=5 {
        let g = format!("mock/m{m}");
        let dap = by.get(&(g.as_str(), "dap_abs_err")).copied().unwrap_or(f64::NAN);
        let cd = by.get(&(g.as_str(), "chamfer_m")).copied().unwrap_or(f64::NAN);
        check(dap == 2.0, || format!("{g}: DAP MAE {dap}"))?;
        check((cd - 0.2).abs() < 1e-9, || format!("{g}: Chamfer {cd}"))?;
    }
    Ok("echo: all errors 0, BLEU 1, zero-width CIs, letters \"a\"; perturb: DAP MAE 2.0, Chamfer 0.2 m".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("chamfer oracle equivalence", chamfer_oracle),
        ("mean-guess quarter-range law", quarter_range),
        ("relative-coordinate conversion", table_conversion),
        ("detection round trip", detection_round_trip),
        ("integrity corpus", integrity),
        ("BLEU-4 oracle", bleu_oracle),
        ("solar position", solar),
        ("statistics oracles", statistics),
        ("prompt ladder", prompt_ladder),
        ("hermetic end-to-end", end_to_end),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: 10/10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
