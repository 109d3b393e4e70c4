//! Hermetic chat endpoint for tests and offline runs. It recognises the
//! target image by hash and answers from the dataset's ground truth.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Response, Server};

use crate::client::WireFormat;
use crate::config::{canonical_serialize, ResponseDocument, SimulationConfig};
use crate::dataset::{sample_config, synth_row_layout};
use crate::eval::GroundTruth;
use crate::manifest::{DatasetManifest, ManifestError};
use crate::prompt::BLIND_PROMPT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase")]
pub enum MockProfile {
    /// Answers with the ground truth.
    Echo,
    /// Ground truth with DAP and every plant x coordinate offset.
    Perturb { dap_offset: i64, x_shift_m: f64 },
}

impl MockProfile {
    pub const PERTURB_DEFAULT: MockProfile = MockProfile::Perturb {
        dap_offset: 2,
        x_shift_m: 0.1,
    };
}

impl std::str::FromStr for MockProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "echo" => Ok(MockProfile::Echo),
            "perturb" => Ok(MockProfile::PERTURB_DEFAULT),
            other => Err(format!("unknown mock profile `{other}`; expected echo or perturb")),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Mid-range configuration with a synthetic row of the mean plant count.
pub fn mean_guess_config(m: &DatasetManifest) -> SimulationConfig {
    let (lo, hi) = m.ranges.plant_count;
    let n = ((lo + hi) as f64 / 2.0).round() as usize;
    let dap = if m.stages.is_empty() {
        0
    } else {
        (m.stages.iter().map(|&d| f64::from(d)).sum::<f64>() / m.stages.len() as f64).round() as u32
    };
    let layout = synth_row_layout(n, m.extents, 0);
    let c = sample_config(0, &m.ranges, &layout, dap, [m.raster.width_px, m.raster.height_px]);
    let mut v = serde_json::to_value(&c).expect("configs serialize");
    for (path, range) in m.ranges.continuous() {
        let (section, key) = path.split_once('.').expect("continuous paths have two parts");
        v[section][key] = json!(range.mean());
    }
    v["seed"] = json!(0);
    serde_json::from_value(v).expect("mean values keep the config shape")
}

fn truth_config(m: &DatasetManifest, truth: &GroundTruth) -> SimulationConfig {
    match truth {
        GroundTruth::Full(c) => (**c).clone(),
        GroundTruth::Partial(p) => {
            let mut c = mean_guess_config(m);
            c.metadata.dap = p.dap;
            c.environment.sun_elevation_deg = p.sun.elevation_deg;
            c.environment.sun_azimuth_deg = p.sun.azimuth_deg;
            c.field.plot_width_m = p.plants.extents.width_m;
            c.field.plot_length_m = p.plants.extents.height_m;
            c.field.plots[0].plants = p.plants.points.iter().copied().map(Into::into).collect();
            c
        }
    }
}

fn apply_profile(mut c: SimulationConfig, profile: MockProfile) -> SimulationConfig {
    if let MockProfile::Perturb { dap_offset, x_shift_m } = profile {
        c.metadata.dap = (i64::from(c.metadata.dap) + dap_offset).max(0) as u32;
        for plot in &mut c.field.plots {
            for p in &mut plot.plants {
                p.0 += x_shift_m;
            }
        }
    }
    c
}

/// Prose-wrapped fenced answer, as chat models typically reply.
pub fn wrap_answer(reasoning: &str, c: SimulationConfig) -> String {
    let doc = ResponseDocument {
        reasoning: reasoning.to_string(),
        config: c,
    };
    let json = canonical_serialize(&doc).expect("mock answers are finite");
    format!("Here is the configuration.\n```json\n{json}\n```\n")
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    pub blind_requests: AtomicUsize,
    pub blind_violations: AtomicUsize,
    pub unknown_targets: AtomicUsize,
}

#[derive(Debug)]
pub struct MockState {
    /// Answer text keyed by target-image hash.
    answers: HashMap<String, String>,
    targets: HashSet<String>,
    blind_answer: String,
    /// Raw answers keyed by request-body hash; checked first.
    canned: HashMap<String, String>,
    fail_first: AtomicUsize,
    pub stats: MockStats,
}

impl MockState {
    pub fn from_manifest(m: &DatasetManifest, profile: MockProfile) -> Result<Self, ManifestError> {
        let mut answers = HashMap::new();
        for entry in &m.images {
            let path = m.resolve(&entry.path);
            let bytes = std::fs::read(&path).map_err(|source| ManifestError::Io { path, source })?;
            let truth = m.load_truth(entry)?;
            let config = apply_profile(truth_config(m, &truth), profile);
            answers.insert(
                sha256_hex(&bytes),
                wrap_answer("Reading the plot from the image.", config),
            );
        }
        let targets = answers.keys().cloned().collect();
        Ok(Self {
            answers,
            targets,
            blind_answer: wrap_answer(
                "No image was given; answering with typical values.",
                mean_guess_config(m),
            ),
            canned: HashMap::new(),
            fail_first: AtomicUsize::new(0),
            stats: MockStats::default(),
        })
    }

    pub fn with_canned(mut self, canned: HashMap<String, String>) -> Self {
        self.canned = canned;
        self
    }

    /// The first `n` requests get HTTP 500.
    pub fn with_fail_first(self, n: usize) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    fn take_failure(&self) -> bool {
        self.fail_first
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    /// Status code and answer text for a request body.
    pub fn answer(&self, wire: WireFormat, body: &[u8]) -> (u16, String) {
        self.stats.requests.fetch_add(1, Ordering::SeqCst);
        if self.take_failure() {
            return (500, "injected failure".into());
        }
        if let Some(text) = self.canned.get(&sha256_hex(body)) {
            return (200, text.clone());
        }
        let Ok(req) = serde_json::from_slice::<Value>(body) else {
            return (400, "request body is not JSON".into());
        };
        let Some(messages) = req.get("messages").and_then(Value::as_array) else {
            return (400, "request has no messages".into());
        };
        let parsed: Vec<(String, Vec<Vec<u8>>, String)> = messages.iter().map(|m| message_parts(wire, m)).collect();
        let Some((_, last_images, last_text)) = parsed.iter().rev().find(|(role, _, _)| role == "user") else {
            return (400, "request has no user message".into());
        };

        if last_images.is_empty() {
            self.stats.blind_requests.fetch_add(1, Ordering::SeqCst);
            let leaked = parsed
                .iter()
                .flat_map(|(_, imgs, _)| imgs)
                .any(|b| self.targets.contains(&sha256_hex(b)));
            if leaked {
                self.stats.blind_violations.fetch_add(1, Ordering::SeqCst);
                warn!("blind request carries a target image");
                return (400, "blind request carries a target image".into());
            }
            if last_text.trim() != BLIND_PROMPT {
                debug!("final user turn without an image: {last_text:?}");
            }
            return (200, self.blind_answer.clone());
        }
        let target = sha256_hex(last_images.last().expect("non-empty"));
        match self.answers.get(&target) {
            Some(a) => (200, a.clone()),
            None => {
                self.stats.unknown_targets.fetch_add(1, Ordering::SeqCst);
                (400, format!("unknown target image {target}"))
            }
        }
    }
}

/// Role, decoded images and joined text of one wire message.
fn message_parts(wire: WireFormat, m: &Value) -> (String, Vec<Vec<u8>>, String) {
    let role = m.get("role").and_then(Value::as_str).unwrap_or_default().to_string();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let decode = |s: &str| B64.decode(s).ok();
    match wire {
        WireFormat::OpenAi => match m.get("content") {
            Some(Value::String(s)) => texts.push(s.clone()),
            Some(Value::Array(parts)) => {
                for p in parts {
                    if let Some(t) = p.get("text").and_then(Value::as_str) {
                        texts.push(t.to_string());
                    }
                    let url = p.pointer("/image_url/url").and_then(Value::as_str);
                    if let Some(data) = url.and_then(|u| u.split_once("base64,")).map(|(_, d)| d) {
                        images.extend(decode(data));
                    }
                }
            }
            _ => {}
        },
        WireFormat::Ollama => {
            if let Some(s) = m.get("content").and_then(Value::as_str) {
                texts.push(s.to_string());
            }
            for img in m.get("images").and_then(Value::as_array).into_iter().flatten() {
                images.extend(img.as_str().and_then(decode));
            }
        }
    }
    (role, images, texts.join("\n\n"))
}

fn response_body(wire: WireFormat, model: &str, text: &str, prompt_len: usize) -> String {
    let completion = text.len().div_ceil(4);
    let prompt = prompt_len.div_ceil(4);
    let v = match wire {
        WireFormat::OpenAi => json!({
            "id": "mock-completion",
            "object": "chat.completion",
            "model": model,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt, "completion_tokens": completion, "total_tokens": prompt + completion},
        }),
        WireFormat::Ollama => json!({
            "model": model,
            "message": {"role": "assistant", "content": text},
            "done": true,
            "done_reason": "stop",
            "prompt_eval_count": prompt,
            "eval_count": completion,
        }),
    };
    v.to_string()
}

fn handle(state: &MockState, mut req: tiny_http::Request) {
    let wire = match req.url() {
        u if u.starts_with(WireFormat::OpenAi.path()) => Some(WireFormat::OpenAi),
        u if u.starts_with(WireFormat::Ollama.path()) => Some(WireFormat::Ollama),
        _ => None,
    };
    let mut body = Vec::new();
    let read_ok = req.as_reader().read_to_end(&mut body).is_ok();
    let json_header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let (status, text) = match wire {
        None => (404, format!("no route for {}", req.url())),
        Some(_) if !read_ok => (400, "unreadable body".into()),
        Some(w) => {
            let (status, answer) = state.answer(w, &body);
            if status == 200 {
                let model = serde_json::from_slice::<Value>(&body)
                    .ok()
                    .and_then(|v| v.get("model").and_then(Value::as_str).map(String::from))
                    .unwrap_or_else(|| "mock".into());
                (200, response_body(w, &model, &answer, body.len()))
            } else {
                (status, json!({"error": answer}).to_string())
            }
        }
    };
    let resp = Response::from_string(text)
        .with_status_code(status)
        .with_header(json_header);
    if let Err(e) = req.respond(resp) {
        debug!("client went away: {e}");
    }
}

pub struct MockServer {
    pub state: Arc<MockState>,
    url: String,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on
    /// `threads` worker threads until [`MockServer::shutdown`].
    pub fn start(addr: &str, state: MockState, threads: usize) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
        let url = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => format!("http://{a}"),
            #[allow(unreachable_patterns)]
            other => format!("http://{other}"),
        };
        let state = Arc::new(state);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, state, stop) = (Arc::clone(&server), Arc::clone(&state), Arc::clone(&stop));
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => handle(&state, req),
                            Ok(None) => {}
                            Err(e) => {
                                warn!("mock server: {e}");
                                break;
                            }
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            state,
            url,
            stop,
            workers,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Blocks until the workers exit (never, unless shut down elsewhere).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}
