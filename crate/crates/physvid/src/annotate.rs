//! Dataset generation and per-chunk caption annotation.
//!
//! Two pipelines share one manifest format:
//!
//! * [`generate_dataset`] renders simulator clips to disk and writes a
//!   manifest whose captions come straight from the simulator's template
//!   tables — fully deterministic ground truth.
//! * [`annotate_dataset`] re-captions those clips through a chat-style
//!   vision-language client ([`crate::vlm`]), chunk by chunk, with
//!   validate-and-retry around every response and bounded parallelism
//!   across clips.
//!
//! The manifest is JSON Lines, one clip per line, schema-versioned, and
//! byte-stable: writing, reading, and writing again produces identical
//! bytes. [`load_train_samples`] bridges a manifest to the tensors and
//! prompt bundles the trainer consumes.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sim::{caption_chunks, sample_world, simulate};
use crate::tensor::Scalar;
use crate::text::Vocab;
use crate::training::{video_to_tokens, TrainSample};
use crate::video::VideoTensor;
use crate::vlm::VlmClient;

/// Bumped whenever a reader would misinterpret older manifest lines.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const CHUNK_TEMPLATE: &str = include_str!("../templates/chunk_annotation.txt");
const LOCAL_PROMPTS_TEMPLATE: &str = include_str!("../templates/local_prompts.txt");
const COUNTERFACTUAL_TEMPLATE: &str = include_str!("../templates/counterfactual.txt");

/// Version tag of the instruction templates, recorded in provenance.
/// Derived from the template bytes so edits can never go untracked.
pub fn template_version() -> String {
    let mut h = Sha256::new();
    h.update(CHUNK_TEMPLATE.as_bytes());
    h.update(LOCAL_PROMPTS_TEMPLATE.as_bytes());
    h.update(COUNTERFACTUAL_TEMPLATE.as_bytes());
    hex::encode(&h.finalize()[..6])
}

// ---- chunking ----

/// Split `frames` frames into `chunks` contiguous intervals `[start, end)`.
/// Sizes differ by at most one; when the division is uneven the longer
/// intervals sit at the end, so early chunks stay aligned across clips of
/// slightly different length.
pub fn segment_video(frames: usize, chunks: usize) -> Result<Vec<(usize, usize)>> {
    if chunks == 0 {
        return Err(Error::Input("cannot split a video into zero chunks".into()));
    }
    if frames < chunks {
        return Err(Error::Input(format!(
            "cannot split {frames} frames into {chunks} chunks of at least one frame"
        )));
    }
    let base = frames / chunks;
    let extra = frames % chunks; // the last `extra` chunks get one more frame
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for k in 0..chunks {
        let len = base + usize::from(k >= chunks - extra);
        out.push((start, start + len));
        start += len;
    }
    debug_assert_eq!(start, frames);
    Ok(out)
}

/// First, middle, and last frame indices of an interval — the frames shown
/// to the annotator for that chunk.
pub fn keyframes(interval: (usize, usize)) -> [usize; 3] {
    let (a, b) = interval;
    [a, a + (b - a) / 2, b - 1]
}

// ---- manifest types ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Who produced the captions: `simulator-template`, `mock`, or an
    /// endpoint model name.
    pub annotator: String,
    pub template_version: String,
    /// Seconds since the Unix epoch; pinned to 0 in deterministic runs so
    /// manifests hash stably.
    pub timestamp_unix: u64,
    /// Hash of the run configuration in effect, when one was loaded.
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkAnnotation {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub dynamics: String,
    pub shape: String,
    pub optics: String,
    /// The structured fields flattened into the prompt actually encoded.
    pub caption: String,
    /// A caption contradicting the chunk's physics, used as the guidance
    /// negative. Must differ from `caption` when present.
    pub counterfactual: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub schema_version: u32,
    /// Clip file path, relative to the manifest's directory.
    pub clip: String,
    pub global: String,
    pub chunks: Vec<ChunkAnnotation>,
    pub provenance: Provenance,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::State(format!("manifest record {:?}: {msg}", self.clip)))
        };
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return fail(format!(
                "schema version {} (this build reads {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.clip.trim().is_empty() {
            return Err(Error::State("manifest record with an empty clip path".into()));
        }
        if self.global.trim().is_empty() {
            return fail("empty global caption".into());
        }
        if self.chunks.is_empty() {
            return fail("no chunk annotations".into());
        }
        let mut cursor = self.chunks[0].start;
        for (k, c) in self.chunks.iter().enumerate() {
            if c.index != k {
                return fail(format!("chunk {k} labeled index {}", c.index));
            }
            if c.start != cursor || c.end <= c.start {
                return fail(format!(
                    "chunk {k} interval [{}, {}) breaks the partition at frame {cursor}",
                    c.start, c.end
                ));
            }
            cursor = c.end;
            if c.caption.trim().is_empty() {
                return fail(format!("chunk {k} has an empty caption"));
            }
            if let Some(cf) = &c.counterfactual {
                if cf.trim().is_empty() {
                    return fail(format!("chunk {k} has an empty counterfactual"));
                }
                if cf == &c.caption {
                    return fail(format!(
                        "chunk {k} counterfactual repeats the caption verbatim"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// An ordered list of clip records; on disk, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ClipRecord = serde_json::from_str(line).map_err(|e| {
                Error::State(format!("manifest line {}: {e}", i + 1))
            })?;
            record.validate()?;
            records.push(record);
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Hash of the exact bytes [`save`] writes.
    pub fn sha256(&self) -> Result<String> {
        Ok(crate::tensor::sha256_hex(self.to_jsonl()?.as_bytes()))
    }
}

/// `Dynamics: …; Shape: …; Optics: …` — the structured fields as one prompt
/// string. The tokenizer lowercases and drops punctuation, so the field
/// markers survive as ordinary vocabulary words; anything past the prompt
/// length is truncated at encode time.
pub fn flatten_annotation(dynamics: &str, shape: &str, optics: &str) -> String {
    format!("Dynamics: {dynamics}; Shape: {shape}; Optics: {optics}")
}

// ---- dataset generation ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub clips: usize,
    pub seed: u64,
    pub frames: usize,
    pub chunks: usize,
    /// Allow writing into a non-empty directory.
    pub force: bool,
    /// Runtime-only: hash of the run configuration, recorded in provenance.
    /// Not part of the config file (it would feed back into its own hash).
    #[serde(skip)]
    pub config_hash: Option<String>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            clips: 16,
            seed: 0,
            frames: 21,
            chunks: 7,
            force: false,
            config_hash: None,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ANNOTATED_MANIFEST_FILE: &str = "annotated.jsonl";

fn clip_file(index: usize) -> String {
    format!("clip_{index:04}.pvid")
}

/// Render `clips` simulator clips into `dir` and write `manifest.jsonl`
/// with template captions and counterfactuals from the ground-truth states.
/// Identical options produce byte-identical clips and manifest.
pub fn generate_dataset(dir: &Path, opts: &DatasetOptions) -> Result<Manifest> {
    if opts.clips == 0 {
        return Err(Error::Input("a dataset needs at least one clip".into()));
    }
    segment_video(opts.frames, opts.chunks)?; // fail fast on bad geometry
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !opts.force {
            return Err(Error::Input(format!(
                "output directory {} is not empty; pass force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;

    let version = template_version();
    let mut records = Vec::with_capacity(opts.clips);
    for i in 0..opts.clips {
        let world = sample_world(opts.seed, i as u64, opts.frames);
        let (video, states) = simulate(&world)?;
        let file = clip_file(i);
        video.save_raw(&dir.join(&file))?;

        let intervals = segment_video(opts.frames, opts.chunks)?;
        let caps = caption_chunks(&states, &intervals);
        let color = world.objects[0].color.word();
        let shape = format!("a round {color} ball");
        let optics = "color stays constant".to_string();
        let chunks = intervals
            .iter()
            .enumerate()
            .map(|(k, &(start, end))| {
                let dynamics = caps.locals[k].clone();
                ChunkAnnotation {
                    index: k,
                    start,
                    end,
                    caption: flatten_annotation(&dynamics, &shape, &optics),
                    counterfactual: Some(flatten_annotation(
                        &caps.counterfactuals[k],
                        &shape,
                        &optics,
                    )),
                    dynamics,
                    shape: shape.clone(),
                    optics: optics.clone(),
                }
            })
            .collect();
        records.push(ClipRecord {
            schema_version: MANIFEST_SCHEMA_VERSION,
            clip: file,
            global: caps.global.clone(),
            chunks,
            provenance: Provenance {
                annotator: "simulator-template".into(),
                template_version: version.clone(),
                timestamp_unix: 0,
                config_hash: opts.config_hash.clone(),
            },
        });
    }
    let manifest = Manifest { records };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

// ---- validate-and-retry around the client ----

/// Run `ask` then `parse` up to `1 + retries` times; after an invalid
/// response the next request carries `corrective` appended. Transport
/// errors pass straight through (the client already retried transport-level
/// failures); exhaustion returns an annotation error holding every raw
/// response, so a failed run can be diagnosed offline.
fn retry_loop<R>(
    client: &dyn VlmClient,
    base: &crate::vlm::ChatRequest,
    corrective: &str,
    retries: usize,
    what: &str,
    parse: impl Fn(&str) -> Option<R>,
) -> Result<R> {
    let mut raw = Vec::new();
    for attempt in 0..=retries {
        let request = if attempt == 0 {
            base.clone()
        } else {
            let mut r = base.clone();
            r.push_text(corrective);
            r
        };
        let response = client.complete(&request)?;
        if let Some(value) = parse(&response) {
            return Ok(value);
        }
        raw.push(response);
    }
    Err(Error::annotation(
        format!("{what} failed after {} attempts", retries + 1),
        raw,
    ))
}

/// Parse the three labeled lines of a chunk annotation reply.
fn parse_annotation(response: &str) -> Option<(String, String, String)> {
    let mut dynamics = None;
    let mut shape = None;
    let mut optics = None;
    for line in response.lines() {
        let line = line.trim();
        let lower = line.to_ascii_lowercase();
        for (prefix, slot) in [
            ("dynamics:", &mut dynamics),
            ("shape:", &mut shape),
            ("optics:", &mut optics),
        ] {
            if lower.starts_with(prefix) && slot.is_none() {
                let body = line[prefix.len()..].trim();
                if !body.is_empty() {
                    *slot = Some(body.to_string());
                }
            }
        }
    }
    Some((dynamics?, shape?, optics?))
}

/// Annotate one chunk from its three keyframes: returns
/// `(dynamics, shape, optics)` or an annotation error after retries.
pub fn annotate_chunk(
    client: &dyn VlmClient,
    frames_png: &[Vec<u8>],
    retries: usize,
) -> Result<(String, String, String)> {
    let mut request = crate::vlm::ChatRequest::new();
    request.push_text(CHUNK_TEMPLATE);
    for png in frames_png {
        request.push_image(png.clone());
    }
    retry_loop(
        client,
        &request,
        "Your previous reply was not in the required format. Reply with exactly \
         three lines: Dynamics: ..., Shape: ..., Optics: ...",
        retries,
        "chunk annotation",
        parse_annotation,
    )
}

/// Strip a leading `1.` / `1)` / `1:` list marker.
fn strip_numbering(line: &str) -> &str {
    let trimmed = line.trim();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return trimmed;
    }
    let rest = &trimmed[digits..];
    rest.strip_prefix(['.', ')', ':'])
        .map(str::trim_start)
        .unwrap_or(trimmed)
}

/// Ask for exactly `count` per-chunk motion prompts expanding a global
/// caption. The reply must contain `count` non-empty lines, in order.
pub fn infer_local_prompts(
    client: &dyn VlmClient,
    global: &str,
    count: usize,
    retries: usize,
) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::Input("asked to infer prompts for zero chunks".into()));
    }
    let mut request = crate::vlm::ChatRequest::new();
    request.push_text(
        LOCAL_PROMPTS_TEMPLATE
            .replace("{global}", global)
            .replace("{count}", &count.to_string()),
    );
    retry_loop(
        client,
        &request,
        &format!(
            "Your previous reply did not contain exactly {count} numbered \
             non-empty lines. Reply with exactly {count} numbered lines."
        ),
        retries,
        "local prompt inference",
        |response| {
            let prompts: Vec<String> = response
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| strip_numbering(l).to_string())
                .collect();
            (prompts.len() == count && prompts.iter().all(|p| !p.is_empty()))
                .then_some(prompts)
        },
    )
}

/// Ask for a caption contradicting `prompt`'s physics. The reply must be
/// non-empty and differ from the input.
pub fn gen_counterfactual(
    client: &dyn VlmClient,
    prompt: &str,
    retries: usize,
) -> Result<String> {
    let mut request = crate::vlm::ChatRequest::new();
    request.push_text(COUNTERFACTUAL_TEMPLATE.replace("{prompt}", prompt));
    let original = prompt.trim().to_ascii_lowercase();
    retry_loop(
        client,
        &request,
        "Your previous reply did not contradict the prompt. Reply with a single \
         rewritten prompt that reverses the motion.",
        retries,
        "counterfactual generation",
        |response| {
            let flipped = response.trim();
            (!flipped.is_empty() && flipped.to_ascii_lowercase() != original)
                .then(|| flipped.to_string())
        },
    )
}

// ---- the clip-level pipeline ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateOptions {
    pub chunks: usize,
    /// Re-prompts allowed per call after an invalid response.
    pub retries: usize,
    /// Upper bound on clips annotated in parallel.
    pub concurrency: usize,
    /// Recorded in provenance.
    pub annotator: String,
    /// Pin provenance timestamps to 0 so reruns hash identically.
    pub deterministic_timestamp: bool,
    /// Runtime-only: hash of the run configuration, recorded in provenance.
    /// Not part of the config file (it would feed back into its own hash).
    #[serde(skip)]
    pub config_hash: Option<String>,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            chunks: 7,
            retries: 2,
            concurrency: 2,
            annotator: "mock".into(),
            deterministic_timestamp: true,
            config_hash: None,
        }
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Annotate one clip: segment it, caption every chunk from its keyframes,
/// and generate a counterfactual per chunk. The counterfactual flips only
/// the dynamics field; shape and optics carry over, so the positive and
/// negative prompts differ exactly in the physics.
pub fn annotate_clip(
    client: &dyn VlmClient,
    video: &VideoTensor,
    clip: &str,
    global: &str,
    opts: &AnnotateOptions,
) -> Result<ClipRecord> {
    let intervals = segment_video(video.frames(), opts.chunks)?;
    let mut chunks = Vec::with_capacity(intervals.len());
    for (k, &interval) in intervals.iter().enumerate() {
        let pngs: Vec<Vec<u8>> = keyframes(interval)
            .iter()
            .map(|&f| video.frame_png(f))
            .collect::<Result<_>>()?;
        let (dynamics, shape, optics) = annotate_chunk(client, &pngs, opts.retries)?;
        let flipped = gen_counterfactual(client, &dynamics, opts.retries)?;
        chunks.push(ChunkAnnotation {
            index: k,
            start: interval.0,
            end: interval.1,
            caption: flatten_annotation(&dynamics, &shape, &optics),
            counterfactual: Some(flatten_annotation(&flipped, &shape, &optics)),
            dynamics,
            shape,
            optics,
        });
    }
    let record = ClipRecord {
        schema_version: MANIFEST_SCHEMA_VERSION,
        clip: clip.to_string(),
        global: global.to_string(),
        chunks,
        provenance: Provenance {
            annotator: opts.annotator.clone(),
            template_version: template_version(),
            timestamp_unix: if opts.deterministic_timestamp { 0 } else { now_unix() },
            config_hash: opts.config_hash.clone(),
        },
    };
    record.validate()?;
    Ok(record)
}

/// Re-annotate every clip of a dataset manifest through `client`, keeping
/// each clip's global caption. Clips are processed by at most
/// `opts.concurrency` worker threads; records come back in input order.
/// The first error stops the run.
pub fn annotate_dataset(
    client: &dyn VlmClient,
    dataset: &Manifest,
    base_dir: &Path,
    opts: &AnnotateOptions,
) -> Result<Manifest> {
    let n = dataset.records.len();
    if n == 0 {
        return Err(Error::Input("the dataset manifest lists no clips".into()));
    }
    let workers = opts.concurrency.clamp(1, n);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<ClipRecord>>> = Mutex::new(vec![None; n]);
    let failure: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n || stop.load(Ordering::SeqCst) {
                    break;
                }
                let source = &dataset.records[i];
                let outcome = VideoTensor::load_raw(&base_dir.join(&source.clip))
                    .and_then(|video| {
                        annotate_clip(client, &video, &source.clip, &source.global, opts)
                    });
                match outcome {
                    Ok(record) => {
                        slots.lock().expect("slot lock")[i] = Some(record);
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        let mut f = failure.lock().expect("failure lock");
                        if f.is_none() {
                            *f = Some(e);
                        }
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    let records = slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled when no worker failed"))
        .collect();
    Ok(Manifest { records })
}

// ---- bridge to training and sampling ----

/// Tokenize one record's prompts: chunk captions become the local prompts;
/// counterfactuals, when every chunk has one, become the negative prompts
/// (mixed coverage is refused).
pub fn record_to_bundle(
    record: &ClipRecord,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<ConditioningBundle> {
    if record.chunks.len() != config.chunks() {
        return Err(Error::Input(format!(
            "clip {:?} has {} chunk captions, the model expects {}",
            record.clip,
            record.chunks.len(),
            config.chunks()
        )));
    }
    let locals: Vec<String> = record.chunks.iter().map(|c| c.caption.clone()).collect();
    let with_negatives = record.chunks.iter().filter(|c| c.counterfactual.is_some()).count();
    let negatives: Option<Vec<String>> = if with_negatives == record.chunks.len() {
        Some(
            record
                .chunks
                .iter()
                .map(|c| c.counterfactual.clone().expect("counted above"))
                .collect(),
        )
    } else if with_negatives == 0 {
        None
    } else {
        return Err(Error::Input(format!(
            "clip {:?} has counterfactuals for {with_negatives} of {} chunks; \
             provide all or none",
            record.clip,
            record.chunks.len()
        )));
    };
    ConditioningBundle::from_captions(
        vocab,
        &record.global,
        &locals,
        negatives.as_deref(),
        config.global_len,
        config.local_len,
    )
}

/// Load every clip of a manifest and tokenize it with its prompts.
pub fn load_train_samples<T: Scalar>(
    manifest: &Manifest,
    base_dir: &Path,
    config: &ModelConfig,
) -> Result<Vec<TrainSample<T>>> {
    let vocab = Vocab::standard();
    let mut samples = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let video = VideoTensor::load_raw(&base_dir.join(&record.clip))?;
        if video.frames() != config.frames
            || video.channels() != config.channels
            || video.height() != config.height
            || video.width() != config.width
        {
            return Err(Error::Input(format!(
                "clip {:?} is {}x{}x{}x{}, the model expects {}x{}x{}x{}",
                record.clip,
                video.frames(),
                video.channels(),
                video.height(),
                video.width(),
                config.frames,
                config.channels,
                config.height,
                config.width,
            )));
        }
        let tokens = video_to_tokens::<T>(&video, config.patch_t, config.patch_hw)?;
        let bundle = record_to_bundle(record, &vocab, config)?;
        samples.push(TrainSample { tokens, bundle });
    }
    Ok(samples)
}
