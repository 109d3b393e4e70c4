use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use plotbench::client::{Client, EndpointConfig, WireFormat, DEFAULT_TOKEN_ENV};
use plotbench::config::ConfigSchema;
use plotbench::detection::{detect_plants, DetectParams, PlotImage};
use plotbench::eval::{read_records, run_suite, write_records, SuiteOptions};
use plotbench::geometry::Extents;
use plotbench::manifest::{generate_dataset, DatasetManifest};
use plotbench::mock::{MockProfile, MockServer, MockState};
use plotbench::prompt::{build, build_blind, PromptOptions};
use plotbench::report::{aggregate, baselines, write_report, GroupBy};

#[derive(Parser)]
#[command(
    name = "plotbench",
    version,
    about = "Benchmark VLMs on plot-simulation config generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample configurations, rasterize plots and write a dataset manifest.
    Generate(GenerateArgs),
    /// Detect plants in images and write their positions.
    Detect(DetectArgs),
    /// Write the prompt bundles for one image.
    Prompts(PromptsArgs),
    /// Run the benchmark suite against one or more endpoints.
    Run(RunArgs),
    /// Aggregate trial records into a CSV summary.
    Report(ReportArgs),
    /// Serve the fixture endpoint.
    MockServe(MockArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Template manifest with ranges and settings; defaults apply when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    plots_per_stage: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    /// Detect every image listed in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Extra images, read with `--extents`.
    images: Vec<PathBuf>,
    /// Ground extents `WIDTH,HEIGHT` in meters for positional images.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<Extents>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Image id to build prompts for; the first image by default.
    #[arg(long)]
    image: Option<String>,
    #[arg(long, default_value = "1-5", value_parser = parse_methods)]
    methods: MethodList,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EndpointArgs {
    /// Endpoint base URL, or `mock` / `mock:perturb` for an in-process fixture.
    #[arg(long, default_value = "mock")]
    endpoint: String,
    /// Model name; repeat to compare models.
    #[arg(long = "model", default_values_t = vec!["mock".to_string()])]
    models: Vec<String>,
    #[arg(long, default_value = "openai")]
    wire: WireFormat,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 600.0)]
    timeout_s: f64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
    #[arg(long, default_value_t = 32768)]
    context: usize,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = DEFAULT_TOKEN_ENV)]
    token_env: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[arg(long, default_value = "1-5", value_parser = parse_methods)]
    methods: MethodList,
    /// Also run every trial without the target image.
    #[arg(long)]
    blind: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    parallel: usize,
    #[arg(long, default_value_t = 3)]
    examples: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also aggregate the records into `--out`.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trial records (JSON lines) from `run`.
    #[arg(long)]
    records: PathBuf,
    /// Manifest for mean-guess baselines.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "method")]
    by: GroupBy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MockArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long, default_value = "echo")]
    profile: MockProfile,
    /// JSON object mapping request-body SHA-256 to canned answer text.
    #[arg(long)]
    canned: Option<PathBuf>,
    /// Answer the first N requests with HTTP 500.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

fn parse_extents(s: &str) -> Result<Extents, String> {
    let (w, h) = s.split_once(',').ok_or("expected WIDTH,HEIGHT")?;
    let w: f64 = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: f64 = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if !(w > 0.0 && h > 0.0) {
        return Err("extents must be positive".into());
    }
    Ok(Extents::new(w, h))
}

#[derive(Debug, Clone, PartialEq)]
struct MethodList(Vec<u8>);

/// `1-5`, `1,3,5` or `2`.
fn parse_methods(s: &str) -> Result<MethodList, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a, b),
            None => (part, part),
        };
        let lo: u8 = lo.trim().parse().map_err(|_| format!("bad method `{part}`"))?;
        let hi: u8 = hi.trim().parse().map_err(|_| format!("bad method `{part}`"))?;
        if !(1..=5).contains(&lo) || !(1..=5).contains(&hi) || lo > hi {
            return Err(format!("methods must lie in 1-5, got `{part}`"));
        }
        for m in lo..=hi {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    Ok(MethodList(out))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut template = match &a.manifest {
        Some(p) => {
            let root = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetManifest::from_json(&text, &root)?
        }
        None => DatasetManifest::default(),
    };
    if let Some(s) = a.seed {
        template.seed = s;
    }
    if let Some(n) = a.plots_per_stage {
        template.plots_per_stage = n;
    }
    let m = generate_dataset(&template, &a.out)?;
    println!(
        "wrote {} images and {} few-shot examples; manifest {}",
        m.images.len(),
        m.few_shot.len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let mut out = BTreeMap::new();
    let mut detect_one = |id: String, path: &Path, extents: Extents, params: &DetectParams| -> Result<()> {
        let img = PlotImage::open(path, extents)?;
        let pts = detect_plants(&img, params);
        out.insert(
            id,
            json!({"path": path, "count": pts.len(), "points": pts.points, "extents": pts.extents}),
        );
        Ok(())
    };
    if let Some(p) = &a.manifest {
        let m = DatasetManifest::load(p)?;
        for e in &m.images {
            detect_one(e.id.clone(), &m.resolve(&e.path), m.extents, &m.detection)?;
        }
    }
    if !a.images.is_empty() {
        let extents = a.extents.context("--extents is required for positional images")?;
        for p in &a.images {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            detect_one(id, p, extents, &DetectParams::default())?;
        }
    }
    if out.is_empty() {
        bail!("nothing to detect; pass --manifest or image paths");
    }
    write_json(&a.out, &out)?;
    println!("detected plants in {} images -> {}", out.len(), a.out.display());
    Ok(())
}

fn prompts(a: PromptsArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let entry = match &a.image {
        Some(id) => m
            .images
            .iter()
            .find(|e| &e.id == id)
            .with_context(|| format!("no image `{id}`"))?,
        None => m.images.first().context("manifest lists no images")?,
    };
    let truth = m.load_truth(entry)?;
    let examples = if a.methods.0.iter().any(|&x| x >= 3) {
        m.few_shot_examples()?
    } else {
        Vec::new()
    };
    for &method in &a.methods.0 {
        let grounding = (method == 5).then(|| truth.grounding());
        let bundle = build(
            method,
            ConfigSchema::builtin(),
            &examples,
            grounding.as_deref(),
            m.resolve(&entry.path),
            PromptOptions::default(),
        )?;
        let blind = build_blind(&bundle);
        write_json(&a.out.join(format!("{}.json", bundle.label())), &bundle)?;
        write_json(&a.out.join(format!("{}.json", blind.label())), &blind)?;
        println!("{}: ~{} tokens", bundle.label(), bundle.token_estimate);
    }
    Ok(())
}

fn endpoint_configs(e: &EndpointArgs, base_url: &str, parallel: usize) -> Vec<EndpointConfig> {
    e.models
        .iter()
        .map(|model| EndpointConfig {
            base_url: base_url.to_string(),
            model_name: model.clone(),
            wire: e.wire,
            context_window_tokens: e.context,
            temperature: e.temperature,
            request_timeout_s: e.timeout_s,
            max_retries: e.retries,
            token_env: Some(e.token_env.clone()),
            max_in_flight: parallel.max(1),
            ..Default::default()
        })
        .collect()
}

fn run(a: RunArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mock = match a.endpoint.endpoint.split_once(':') {
        _ if a.endpoint.endpoint == "mock" => Some(MockProfile::Echo),
        Some(("mock", profile)) => Some(profile.parse::<MockProfile>().map_err(anyhow::Error::msg)?),
        _ => None,
    };
    let server = match mock {
        Some(profile) => {
            let state = MockState::from_manifest(&manifest, profile)?;
            let s = MockServer::start("127.0.0.1:0", state, a.parallel.max(1))?;
            info!("in-process mock endpoint at {}", s.url());
            Some(s)
        }
        None => None,
    };
    let base = server
        .as_ref()
        .map_or(a.endpoint.endpoint.clone(), |s| s.url().to_string());
    let clients: Vec<Client> = endpoint_configs(&a.endpoint, &base, a.parallel)
        .into_iter()
        .map(Client::new)
        .collect();
    let opts = SuiteOptions {
        methods: a.methods.0.clone(),
        include_blind: a.blind,
        seed: a.seed,
        parallel: a.parallel,
        prompt: PromptOptions {
            num_examples: a.examples,
        },
    };
    let records = run_suite(&manifest, &clients, &opts)?;
    if let Some(s) = server {
        let violations = s.state.stats.blind_violations.load(std::sync::atomic::Ordering::SeqCst);
        s.shutdown();
        if violations > 0 {
            bail!("{violations} blind requests carried a target image");
        }
    }
    let path = a.out.join("records.jsonl");
    write_records(&path, &records)?;
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    println!("{} trials ({} failed) -> {}", records.len(), failed, path.display());
    if a.report {
        report(ReportArgs {
            records: path,
            manifest: Some(a.manifest),
            seed: a.seed,
            by: GroupBy::Method,
            out: a.out,
        })?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let records = read_records(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    if records.is_empty() {
        bail!("{} holds no records", a.records.display());
    }
    let base = match &a.manifest {
        Some(p) => {
            let m = DatasetManifest::load(p)?;
            let truths = m
                .images
                .iter()
                .map(|e| m.load_truth(e))
                .collect::<Result<Vec<_>, _>>()?;
            Some(baselines(&m, &truths))
        }
        None => None,
    };
    let rows = aggregate(&records, a.by, a.seed);
    write_report(&a.out, &rows, a.by, a.seed, base.as_ref())?;
    for r in rows.iter().filter(|r| r.excluded > 0) {
        println!("{}: {} excluded {} trials", r.group, r.metric, r.excluded);
    }
    println!("{} summary rows -> {}", rows.len(), a.out.join("summary.csv").display());
    Ok(())
}

fn mock_serve(a: MockArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let mut state = MockState::from_manifest(&m, a.profile)?.with_fail_first(a.fail_first);
    if let Some(p) = &a.canned {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let canned: HashMap<String, String> = serde_json::from_str(&text)?;
        state = state.with_canned(canned);
    }
    let server = MockServer::start(&a.addr, state, a.threads)?;
    println!("mock endpoint listening on {}", server.url());
    server.join();
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Detect(a) => detect(a),
        Command::Prompts(a) => prompts(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::MockServe(a) => mock_serve(a),
    }
}
