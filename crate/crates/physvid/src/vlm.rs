//! Pluggable chat-style vision-language endpoint.
//!
//! The annotation pipeline needs exactly one capability: send an ordered list
//! of text pieces and PNG frames, get text back. Three implementations:
//!
//! * [`HttpVlm`] — a real endpoint speaking the widespread chat-completions
//!   JSON shape, frames inlined as base64 data URLs, credential from an
//!   environment variable.
//! * [`MockVlm`] — fully offline and deterministic: it decodes the PNG bytes
//!   it is sent, tracks the ball like the evaluator does, and answers from
//!   the same template tables the request asked about. Identical requests
//!   produce identical responses, byte for byte.
//! * [`ScriptedVlm`] — returns a fixed sequence of canned responses, for
//!   exercising retry and failure paths.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sha256_hex;

/// Task markers the instruction templates embed so any implementation —
/// local or remote — can tell the request types apart without fragile
/// natural-language sniffing.
pub const TASK_CHUNK_ANNOTATION: &str = "[task: chunk-annotation]";
pub const TASK_LOCAL_PROMPTS: &str = "[task: local-prompts]";
pub const TASK_COUNTERFACTUAL: &str = "[task: counterfactual]";

/// One piece of a request, in send order.
#[derive(Debug, Clone, PartialEq)]
pub enum MessagePart {
    Text(String),
    ImagePng(Vec<u8>),
}

/// An ordered mixed text/image request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChatRequest {
    pub parts: Vec<MessagePart>,
}

impl ChatRequest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self, text: impl Into<String>) -> &mut Self {
        self.parts.push(MessagePart::Text(text.into()));
        self
    }

    pub fn push_image(&mut self, png: Vec<u8>) -> &mut Self {
        self.parts.push(MessagePart::ImagePng(png));
        self
    }

    /// Concatenated text content (instruction + any captions).
    pub fn joined_text(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            if let MessagePart::Text(t) = p {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(t);
            }
        }
        out
    }

    pub fn images(&self) -> Vec<&[u8]> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                MessagePart::ImagePng(b) => Some(b.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Content digest: the hash of every part in order, text and image bytes
    /// alike. Two requests digest equal iff their payloads are identical.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        for p in &self.parts {
            match p {
                MessagePart::Text(t) => {
                    buf.extend_from_slice(b"text:");
                    buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    buf.extend_from_slice(t.as_bytes());
                }
                MessagePart::ImagePng(b) => {
                    buf.extend_from_slice(b"image:");
                    buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    buf.extend_from_slice(b);
                }
            }
        }
        sha256_hex(&buf)
    }
}

/// Endpoint settings shared by every client kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Transport-level retries inside one `complete` call.
    pub max_retries: usize,
    /// Upper bound on concurrent in-flight requests across the pipeline.
    pub concurrency: usize,
    /// Environment variable holding the bearer credential. Only the variable
    /// name lives in configuration; the secret never does.
    pub api_key_env: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: "http://127.0.0.1:8090/v1/chat/completions".into(),
            model: "toy-annotator".into(),
            timeout_secs: 30,
            max_retries: 2,
            concurrency: 2,
            api_key_env: "PHYSVID_VLM_API_KEY".into(),
        }
    }
}

/// A chat endpoint: ordered text/image parts in, text out.
pub trait VlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

// ---- HTTP client ----

/// Chat-completions HTTP client. One user message whose content array mixes
/// `text` and `image_url` items (PNG data URLs), in request order.
pub struct HttpVlm {
    config: ClientConfig,
    http: reqwest::blocking::Client,
}

impl HttpVlm {
    pub fn new(config: ClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Transport(format!("building http client: {e}")))?;
        Ok(HttpVlm { config, http })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let content: Vec<serde_json::Value> = request
            .parts
            .iter()
            .map(|p| match p {
                MessagePart::Text(t) => serde_json::json!({"type": "text", "text": t}),
                MessagePart::ImagePng(bytes) => {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                    serde_json::json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{b64}")}
                    })
                }
            })
            .collect();
        serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Transport(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Transport(format!("reading response: {e}")))?;
        if !status.is_success() {
            return Err(Error::Transport(format!(
                "endpoint returned {status}: {}",
                text.chars().take(200).collect::<String>()
            )));
        }
        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("non-JSON response: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Error::Transport("response lacks choices[0].message.content".into())
            })
    }
}

impl VlmClient for HttpVlm {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = self.body(request);
        let mut last = None;
        for attempt in 0..=self.config.max_retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    last = Some(e);
                    if attempt < self.config.max_retries {
                        std::thread::sleep(Duration::from_millis(50 << attempt));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

// ---- deterministic mock ----

/// A tracked ball in one decoded request image.
#[derive(Debug, Clone, Copy)]
struct MockBlob {
    x: f64,
    y: f64,
    rgb: [f64; 3],
}

fn decode_blob(png: &[u8]) -> Result<Option<MockBlob>> {
    let img = image::load_from_memory(png)
        .map_err(|e| Error::Input(format!("mock could not decode an image: {e}")))?
        .to_rgb8();
    let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    let mut rgb = [0.0f64; 3];
    let mut count = 0usize;
    for (x, y, px) in img.enumerate_pixels() {
        let peak = px.0.iter().copied().max().unwrap() as f64 / 255.0;
        if peak > 0.5 {
            sw += peak;
            sx += peak * (x as f64 + 0.5);
            sy += peak * (y as f64 + 0.5);
            for c in 0..3 {
                rgb[c] += px.0[c] as f64 / 255.0;
            }
            count += 1;
        }
    }
    let total = (img.width() * img.height()) as usize;
    if count < 3 || count * 4 > total {
        return Ok(None);
    }
    Ok(Some(MockBlob {
        x: sx / sw,
        y: sy / sw,
        rgb: [rgb[0] / count as f64, rgb[1] / count as f64, rgb[2] / count as f64],
    }))
}

fn nearest_color_word(rgb: [f64; 3]) -> &'static str {
    crate::sim::ColorId::ALL
        .iter()
        .min_by(|a, b| {
            let d = |c: &crate::sim::ColorId| -> f64 {
                c.rgb()
                    .iter()
                    .zip(&rgb)
                    .map(|(r, m)| (*r as f64 - m).powi(2))
                    .sum()
            };
            d(a).partial_cmp(&d(b)).unwrap()
        })
        .map(|c| c.word())
        .unwrap_or("red")
}

/// Deterministic offline stand-in for a remote endpoint. Responses are pure
/// functions of the request bytes: the mock decodes the frames it receives,
/// tracks the ball, and fills the same template tables a cooperative remote
/// model would be prompted to use. An instrumented in-flight counter lets
/// tests observe the pipeline's concurrency.
#[derive(Debug, Default)]
pub struct MockVlm {
    /// Artificial per-request latency, for concurrency tests.
    pub latency: Option<Duration>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockVlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_latency(latency: Duration) -> Self {
        MockVlm {
            latency: Some(latency),
            ..Self::default()
        }
    }

    /// Highest number of simultaneously in-flight requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Motion classification over the (first, middle, last) chunk frames,
    /// mirrored from the same thresholds the evaluator tracks with.
    fn dynamics_text(blobs: &[MockBlob]) -> String {
        if blobs.len() < 2 {
            return "the ball stays at rest".into();
        }
        let (a, m, b) = (
            blobs[0],
            blobs[blobs.len() / 2],
            *blobs.last().expect("non-empty"),
        );
        let dy1 = m.y - a.y;
        let dy2 = b.y - m.y;
        let dx = (b.x - a.x) / (blobs.len() - 1) as f64;
        let dy = (b.y - a.y) / (blobs.len() - 1) as f64;
        const MOVING: f64 = 0.3; // px across the sampled span
        if dy1 > MOVING && dy2 < -MOVING {
            return "the ball bounces off the floor".into();
        }
        if dy1 < -MOVING && dy2 > MOVING {
            return "the ball bounces off the ceiling".into();
        }
        let drift = if dx.abs() > 0.25 {
            if dx > 0.0 {
                " moving right"
            } else {
                " moving left"
            }
        } else {
            ""
        };
        if dy.abs() > 0.25 && dy.abs() >= dx.abs() {
            let trend = if dy2.abs() > dy1.abs() * 1.15 {
                "speeding up"
            } else if dy2.abs() * 1.15 < dy1.abs() {
                "slowing down"
            } else {
                "steadily"
            };
            if dy > 0.0 {
                return format!("the ball falls {trend}{drift}");
            }
            return format!("the ball rises {trend}{drift}");
        }
        if !drift.is_empty() {
            return format!("the ball moves {}", drift.trim_start_matches(" moving "));
        }
        "the ball stays at rest".into()
    }

    fn respond(&self, request: &ChatRequest) -> Result<String> {
        let text = request.joined_text();
        if text.contains(TASK_CHUNK_ANNOTATION) {
            let mut blobs = Vec::new();
            for png in request.images() {
                if let Some(b) = decode_blob(png)? {
                    blobs.push(b);
                }
            }
            if blobs.is_empty() {
                return Ok(
                    "Dynamics: no ball is in the box\nShape: no ball is in the box\nOptics: no ball is in the box"
                        .into(),
                );
            }
            let dynamics = Self::dynamics_text(&blobs);
            let color = nearest_color_word(blobs[0].rgb);
            let shape = format!("a round {color} ball");
            let first = blobs[0].rgb;
            let last = blobs.last().expect("non-empty").rgb;
            let shift: f64 = first
                .iter()
                .zip(&last)
                .map(|(a, b)| (a - b).abs())
                .sum();
            let optics = if shift < 0.25 {
                "color stays constant".to_string()
            } else {
                "the color is not constant".to_string()
            };
            return Ok(format!("Dynamics: {dynamics}\nShape: {shape}\nOptics: {optics}"));
        }
        if text.contains(TASK_LOCAL_PROMPTS) {
            let n = parse_requested_count(&text).unwrap_or(1);
            // Deterministic storyline from the global caption: descend, hit
            // the floor, rise — the canonical arc of this world.
            let falls = n.saturating_sub(1) / 2;
            let mut lines = Vec::with_capacity(n);
            for i in 0..n {
                let prompt = if i < falls {
                    "the ball falls speeding up"
                } else if i == falls && n > 1 {
                    "the ball bounces off the floor"
                } else {
                    "the ball rises slowing down"
                };
                lines.push(format!("{}. {prompt}", i + 1));
            }
            return Ok(lines.join("\n"));
        }
        if text.contains(TASK_COUNTERFACTUAL) {
            let prompt = text
                .lines()
                .skip_while(|l| !l.starts_with("Prompt:"))
                .nth(0)
                .map(|l| l.trim_start_matches("Prompt:").trim())
                .unwrap_or("");
            return Ok(flip_physics(prompt));
        }
        Ok(format!("unrecognized request {}", request.digest()))
    }
}

/// First "exactly N" count in an instruction.
fn parse_requested_count(text: &str) -> Option<usize> {
    let idx = text.find("exactly ")?;
    let digits: String = text[idx + "exactly ".len()..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Physics-negation table: the counterfactual for each template family.
pub fn flip_physics(prompt: &str) -> String {
    let p = prompt.trim();
    if p.is_empty() {
        return "the ball hangs motionless in midair".into();
    }
    if p.contains("bounces off the floor") {
        return "the ball passes through the floor".into();
    }
    if p.contains("bounces off the ceiling") {
        return "the ball passes through the ceiling".into();
    }
    if p.contains("bounces off") && p.contains("wall") {
        return "the ball passes through the wall".into();
    }
    if p.contains("falls") {
        return p.replace("falls", "rises").replace("speeding up", "slowing down");
    }
    if p.contains("rises") {
        return p.replace("rises", "falls").replace("slowing down", "speeding up");
    }
    if p.contains("moves left") {
        return p.replace("moves left", "moves right");
    }
    if p.contains("moves right") {
        return p.replace("moves right", "moves left");
    }
    if p.contains("rest") || p.contains("motionless") {
        return "the ball speeds up and moves sideways".into();
    }
    "the ball hangs motionless in midair".into()
}

impl VlmClient for MockVlm {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let out = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

// ---- scripted client ----

/// Replays a fixed response sequence; one response per call, then errors.
#[derive(Debug, Default)]
pub struct ScriptedVlm {
    responses: Mutex<VecDeque<String>>,
    calls: AtomicUsize,
}

impl ScriptedVlm {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedVlm {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VlmClient for ScriptedVlm {
    fn complete(&self, _request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| Error::Transport("scripted responses exhausted".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{sample_world, simulate, ColorId, ObjectInit, WorldConfig};

    fn falling_frames() -> (Vec<Vec<u8>>, WorldConfig) {
        let world = WorldConfig::standard(
            0.9,
            vec![ObjectInit {
                x: 16.0,
                y: 6.0,
                vx: 0.0,
                vy: 0.6,
                radius: 3.0,
                color: ColorId::Red,
            }],
        );
        let (video, _) = simulate(&world).unwrap();
        let pngs = [0, 4, 8]
            .iter()
            .map(|&f| video.frame_png(f).unwrap())
            .collect();
        (pngs, world)
    }

    fn annotation_request(pngs: &[Vec<u8>]) -> ChatRequest {
        let mut req = ChatRequest::new();
        req.push_text(format!(
            "{TASK_CHUNK_ANNOTATION} Describe the ball in these frames."
        ));
        for png in pngs {
            req.push_image(png.clone());
        }
        req
    }

    #[test]
    fn mock_is_deterministic_per_request_content() {
        let (pngs, _) = falling_frames();
        let req = annotation_request(&pngs);
        let mock = MockVlm::new();
        let a = mock.complete(&req).unwrap();
        let b = mock.complete(&req).unwrap();
        assert_eq!(a, b);

        let mut other = req.clone();
        other.push_text("and an extra remark");
        assert_ne!(req.digest(), other.digest());
        // Same digest ⇔ same payload; the response is a function of it.
        assert_eq!(req.digest(), annotation_request(&pngs).digest());
    }

    #[test]
    fn mock_reads_motion_and_color_from_the_pixels() {
        let (pngs, _) = falling_frames();
        let resp = MockVlm::new().complete(&annotation_request(&pngs)).unwrap();
        assert!(resp.contains("Dynamics:"), "{resp}");
        assert!(resp.contains("falls"), "{resp}");
        assert!(resp.contains("Shape: a round red ball"), "{resp}");
        assert!(resp.contains("Optics: color stays constant"), "{resp}");
    }

    #[test]
    fn mock_detects_a_bounce_from_three_frames() {
        let world = WorldConfig {
            frames: 21,
            ..WorldConfig::standard(
                0.85,
                vec![ObjectInit {
                    x: 16.0,
                    y: 20.0,
                    vx: 0.0,
                    vy: 1.4,
                    radius: 3.0,
                    color: ColorId::Blue,
                }],
            )
        };
        let (video, states) = simulate(&world).unwrap();
        let bounce = (1..states.len())
            .find(|&i| states[i - 1].objects[0].vy > 0.0 && states[i].objects[0].vy < 0.0)
            .unwrap();
        let pngs: Vec<Vec<u8>> = [bounce - 2, bounce, bounce + 2]
            .iter()
            .map(|&f| video.frame_png(f).unwrap())
            .collect();
        let resp = MockVlm::new().complete(&annotation_request(&pngs)).unwrap();
        assert!(resp.contains("bounces off the floor"), "{resp}");
    }

    #[test]
    fn mock_answers_blank_scenes_gracefully() {
        let video = crate::video::VideoTensor::zeros(3, 3, 32, 32).unwrap();
        let pngs: Vec<Vec<u8>> = (0..3).map(|f| video.frame_png(f).unwrap()).collect();
        let resp = MockVlm::new().complete(&annotation_request(&pngs)).unwrap();
        assert!(resp.contains("no ball is in the box"), "{resp}");
    }

    #[test]
    fn mock_produces_the_requested_prompt_count_in_story_order() {
        let mut req = ChatRequest::new();
        req.push_text(format!(
            "{TASK_LOCAL_PROMPTS} Write exactly 7 numbered lines for: a red ball falls and bounces in a box"
        ));
        let resp = MockVlm::new().complete(&req).unwrap();
        let lines: Vec<&str> = resp.lines().collect();
        assert_eq!(lines.len(), 7);
        for (i, line) in lines.iter().enumerate() {
            assert!(line.starts_with(&format!("{}. ", i + 1)), "{line}");
        }
        assert!(lines[0].contains("falls"));
        assert!(lines[3].contains("bounces"));
        assert!(lines[6].contains("rises"));
    }

    #[test]
    fn mock_counterfactuals_contradict_the_prompt() {
        let mut req = ChatRequest::new();
        req.push_text(format!(
            "{TASK_COUNTERFACTUAL} Contradict the physics.\nPrompt: the ball falls speeding up"
        ));
        let resp = MockVlm::new().complete(&req).unwrap();
        assert_eq!(resp, "the ball rises slowing down");

        for (prompt, expect) in [
            ("the ball bounces off the floor", "passes through the floor"),
            ("the ball rises slowing down", "falls speeding up"),
            ("the ball moves right", "moves left"),
            ("the ball stays at rest", "speeds up and moves sideways"),
        ] {
            let flipped = flip_physics(prompt);
            assert!(flipped.contains(expect), "{prompt} -> {flipped}");
            assert_ne!(flipped, prompt);
        }
    }

    #[test]
    fn mock_counts_in_flight_requests() {
        let mock = std::sync::Arc::new(MockVlm::with_latency(Duration::from_millis(30)));
        let mut handles = Vec::new();
        for _ in 0..3 {
            let m = mock.clone();
            handles.push(std::thread::spawn(move || {
                let mut req = ChatRequest::new();
                req.push_text("[task: none] ping");
                m.complete(&req).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(mock.calls(), 3);
        assert!(
            mock.peak_in_flight() >= 2,
            "three parallel calls with latency must overlap, saw peak {}",
            mock.peak_in_flight()
        );
    }

    #[test]
    fn scripted_client_replays_then_runs_dry() {
        let script = ScriptedVlm::new(["first", "second"]);
        let req = ChatRequest::new();
        assert_eq!(script.complete(&req).unwrap(), "first");
        assert_eq!(script.complete(&req).unwrap(), "second");
        assert!(matches!(
            script.complete(&req).unwrap_err(),
            Error::Transport(_)
        ));
        assert_eq!(script.calls(), 3);
    }

    #[test]
    fn mock_tracks_the_sampled_worlds_it_will_annotate() {
        // Across a spread of dataset worlds the mock must keep finding the
        // ball and produce in-vocabulary text.
        let vocab = crate::text::Vocab::standard();
        for seed in 0..8 {
            let world = sample_world(41, seed, 21);
            let (video, _) = simulate(&world).unwrap();
            let pngs: Vec<Vec<u8>> = [0, 10, 20]
                .iter()
                .map(|&f| video.frame_png(f).unwrap())
                .collect();
            let resp = MockVlm::new().complete(&annotation_request(&pngs)).unwrap();
            assert!(resp.contains("Dynamics:"), "seed {seed}: {resp}");
            for line in resp.lines() {
                let body = line.split_once(':').map(|(_, b)| b).unwrap_or(line);
                for word in body.split_whitespace() {
                    let clean: String = word
                        .chars()
                        .filter(|c| c.is_ascii_alphabetic())
                        .collect();
                    if !clean.is_empty() {
                        assert!(
                            vocab.id(&clean).is_some(),
                            "seed {seed}: word {clean:?} out of vocabulary in {resp:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn http_client_speaks_chat_completions_against_a_local_server() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || -> (String, String) {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // Read headers, then the advertised content length.
            let body_start;
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    body_start = pos + 4;
                    break;
                }
            }
            let headers = String::from_utf8_lossy(&buf[..body_start - 4]).to_string();
            let content_length: usize = headers
                .lines()
                .find_map(|l| {
                    l.to_ascii_lowercase()
                        .strip_prefix("content-length:")
                        .map(|v| v.trim().parse().unwrap())
                })
                .unwrap();
            while buf.len() < body_start + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            let body = String::from_utf8_lossy(&buf[body_start..]).to_string();
            let reply = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": "Dynamics: the ball falls steadily"}}]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
            stream.write_all(response.as_bytes()).unwrap();
            (headers, body)
        });

        let config = ClientConfig {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            api_key_env: "PHYSVID_TEST_VLM_KEY".into(),
            max_retries: 0,
            ..ClientConfig::default()
        };
        // The credential comes from the configured env var.
        std::env::set_var("PHYSVID_TEST_VLM_KEY", "sekrit-token");
        let client = HttpVlm::new(config).unwrap();
        let mut req = ChatRequest::new();
        req.push_text("[task: chunk-annotation] describe");
        req.push_image(
            crate::video::VideoTensor::zeros(1, 3, 8, 8)
                .unwrap()
                .frame_png(0)
                .unwrap(),
        );
        let out = client.complete(&req).unwrap();
        assert_eq!(out, "Dynamics: the ball falls steadily");

        let (headers, body) = server.join().unwrap();
        assert!(
            headers
                .to_ascii_lowercase()
                .contains("authorization: bearer sekrit-token"),
            "missing bearer credential in: {headers}"
        );
        let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(sent["model"], "toy-annotator");
        let content = &sent["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert!(content[1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
    }

    #[test]
    fn http_client_errors_are_transport_errors() {
        // Nothing listens on this port; the client must fail with a
        // transport error after its retries.
        let config = ClientConfig {
            endpoint: "http://127.0.0.1:1/v1/chat/completions".into(),
            timeout_secs: 1,
            max_retries: 1,
            ..ClientConfig::default()
        };
        let client = HttpVlm::new(config).unwrap();
        let mut req = ChatRequest::new();
        req.push_text("ping");
        let err = client.complete(&req).unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err:?}");
    }
}
