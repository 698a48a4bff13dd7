//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every subcommand reads an optional `--config` JSON file ([`RunConfig`]),
//! applies flag overrides on top, and stamps the resulting configuration
//! hash into the artifacts it writes. Environment variables configure
//! nothing except secrets (the endpoint credential). All error paths exit
//! nonzero with a distinct code per error family.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::annotate::{
    annotate_dataset, generate_dataset, load_train_samples, record_to_bundle, segment_video,
    Manifest, ANNOTATED_MANIFEST_FILE, MANIFEST_FILE,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    attention_locality, ensure_uniform_hashes, track_and_score, EvalReport, EvalRow, VideoScore,
};
use crate::model::Model;
use crate::sampling::{
    decode_tokens, export_sample, sample, GuidanceConfig, ModelVelocity, NegativeMode,
    SamplingManifest,
};
use crate::sim::{caption_chunks, sample_world, simulate};
use crate::tensor::{sha256_file, Tensor};
use crate::text::Vocab;
use crate::training::{train, TrainState};
use crate::video::VideoTensor;
use crate::vlm::{HttpVlm, MockVlm, VlmClient};

#[derive(Debug, Parser)]
#[command(
    name = "physvid",
    version,
    about = "Chunk-captioned toy video diffusion: data, annotation, training, sampling, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render simulator clips and a ground-truth caption manifest.
    GenData(GenDataArgs),
    /// Re-caption a dataset through a vision-language endpoint (or its mock).
    Annotate(AnnotateArgs),
    /// Train the denoiser (full two-stage recipe or the no-local ablation).
    Train(TrainArgs),
    /// Generate videos from a checkpoint with dual-branch guidance.
    Sample(SampleArgs),
    /// Score generated or real clips with the physics predicates.
    Eval(EvalArgs),
    /// Probe per-layer chunk-attention locality of a checkpoint.
    InspectAttention(InspectAttentionArgs),
}

/// Run a parsed command line to completion.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectAttention(a) => cmd_inspect_attention(a),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

// ---- gen-data ----

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for clips and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of clips to render.
    #[arg(long)]
    pub clips: Option<usize>,
    /// Master seed for world sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Caption chunks per clip.
    #[arg(long)]
    pub chunks: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let run = load_run_config(a.config.as_deref())?;
    let mut opts = run.dataset.clone();
    if let Some(v) = a.clips {
        opts.clips = v;
    }
    if let Some(v) = a.seed {
        opts.seed = v;
    }
    if let Some(v) = a.frames {
        opts.frames = v;
    }
    if let Some(v) = a.chunks {
        opts.chunks = v;
    }
    opts.force |= a.force;
    let mut effective = run;
    effective.dataset = opts.clone();
    opts.config_hash = Some(effective.hash()?);
    let manifest = generate_dataset(&a.out, &opts)?;
    println!(
        "wrote {} clips of {} frames ({} chunks each) to {}",
        manifest.records.len(),
        opts.frames,
        opts.chunks,
        a.out.display()
    );
    println!("manifest sha256 {}", manifest.sha256()?);
    Ok(())
}

// ---- annotate ----

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Dataset directory (holds the manifest and the clips).
    #[arg(long)]
    pub data: PathBuf,
    /// Output manifest path (default: `<data>/annotated.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the built-in deterministic annotator instead of an endpoint.
    #[arg(long)]
    pub mock: bool,
    /// Chat endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Endpoint model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Caption chunks per clip.
    #[arg(long)]
    pub chunks: Option<usize>,
    /// Re-prompts allowed after an invalid response.
    #[arg(long)]
    pub retries: Option<usize>,
    /// Maximum clips annotated in parallel.
    #[arg(long)]
    pub concurrency: Option<usize>,
}

fn cmd_annotate(a: &AnnotateArgs) -> Result<()> {
    let run = load_run_config(a.config.as_deref())?;
    let mut client_cfg = run.client.clone();
    if let Some(v) = &a.endpoint {
        client_cfg.endpoint = v.clone();
    }
    if let Some(v) = &a.model {
        client_cfg.model = v.clone();
    }
    let mut opts = run.annotate.clone();
    if let Some(v) = a.chunks {
        opts.chunks = v;
    }
    if let Some(v) = a.retries {
        opts.retries = v;
    }
    if let Some(v) = a.concurrency {
        opts.concurrency = v;
    }
    opts.annotator = if a.mock { "mock".into() } else { client_cfg.model.clone() };
    opts.deterministic_timestamp = a.mock;

    let mut effective = run;
    effective.client = client_cfg.clone();
    effective.annotate = opts.clone();
    opts.config_hash = Some(effective.hash()?);

    let dataset = Manifest::load(&a.data.join(MANIFEST_FILE))?;
    let client: Box<dyn VlmClient> = if a.mock {
        Box::new(MockVlm::new())
    } else {
        Box::new(HttpVlm::new(client_cfg)?)
    };
    let annotated = annotate_dataset(client.as_ref(), &dataset, &a.data, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join(ANNOTATED_MANIFEST_FILE));
    annotated.save(&out)?;
    println!(
        "annotated {} clips x {} chunks -> {}",
        annotated.records.len(),
        opts.chunks,
        out.display()
    );
    println!("manifest sha256 {}", annotated.sha256()?);
    Ok(())
}

// ---- train ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Full model with the chunk-caption pathway, two-stage schedule.
    Physvid,
    /// Ablation without any local pathway parameters (single stage).
    Finetune,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory the manifest's clip paths are relative to.
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest to train from (default: `<data>/annotated.jsonl` when
    /// present, otherwise `<data>/manifest.jsonl`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Physvid)]
    pub mode: TrainMode,
    /// Resume from a state checkpoint; the matching `model_*.ckpt` must sit
    /// next to it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Initialize parameters from an existing model checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (batch draws, timesteps, noise).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_steps: Option<usize>,
    #[arg(long)]
    pub stage2_steps: Option<usize>,
}

fn mode_matches(mode: TrainMode, local_pathway: bool) -> bool {
    match mode {
        TrainMode::Physvid => local_pathway,
        TrainMode::Finetune => !local_pathway,
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Physvid => "physvid",
        TrainMode::Finetune => "finetune",
    }
}

/// Derive `model_*.ckpt` from a `state_*.ckpt` path.
fn sibling_model_path(state: &Path) -> Result<PathBuf> {
    let name = state
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Input(format!("unusable state path {}", state.display())))?;
    if !name.contains("state") {
        return Err(Error::Config(format!(
            "cannot derive a model checkpoint from {name:?}; resume expects a state_*.ckpt file"
        )));
    }
    Ok(state.with_file_name(name.replacen("state", "model", 1)))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let run = load_run_config(a.config.as_deref())?;
    let mut model_cfg = run.model.clone();
    let mut train_cfg = run.training.clone();
    if let Some(v) = a.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = a.stage1_steps {
        train_cfg.stage1_steps = v;
    }
    if let Some(v) = a.stage2_steps {
        train_cfg.stage2_steps = v;
    }
    match a.mode {
        TrainMode::Physvid => {
            if !model_cfg.local_pathway {
                return Err(Error::Config(
                    "mode physvid needs a model with the local pathway enabled".into(),
                ));
            }
        }
        TrainMode::Finetune => {
            model_cfg.local_pathway = false;
            if train_cfg.stage1_steps > 0 {
                println!(
                    "finetune mode has no local pathway; forcing stage1_steps {} -> 0",
                    train_cfg.stage1_steps
                );
                train_cfg.stage1_steps = 0;
            }
        }
    }

    let mut model: Model<f32> = match &a.init {
        Some(init) => {
            let loaded = Model::load(init)?;
            if !mode_matches(a.mode, loaded.config().local_pathway) {
                return Err(Error::Config(format!(
                    "mode {} does not match checkpoint {} (local pathway {})",
                    mode_name(a.mode),
                    init.display(),
                    loaded.config().local_pathway,
                )));
            }
            loaded
        }
        None => Model::new(model_cfg.clone(), train_cfg.seed)?,
    };

    let resume_state = match &a.resume {
        Some(state_path) => {
            let state = TrainState::load(state_path, &train_cfg)?;
            if a.init.is_none() {
                let model_path = sibling_model_path(state_path)?;
                let loaded = Model::load(&model_path)?;
                if !mode_matches(a.mode, loaded.config().local_pathway) {
                    return Err(Error::Config(format!(
                        "mode {} does not match checkpoint {} (local pathway {})",
                        mode_name(a.mode),
                        model_path.display(),
                        loaded.config().local_pathway,
                    )));
                }
                model = loaded;
            }
            Some(state)
        }
        None => None,
    };

    let manifest_path = match &a.manifest {
        Some(p) => p.clone(),
        None => {
            let annotated = a.data.join(ANNOTATED_MANIFEST_FILE);
            if annotated.exists() {
                annotated
            } else {
                a.data.join(MANIFEST_FILE)
            }
        }
    };
    let manifest = Manifest::load(&manifest_path)?;
    let samples = load_train_samples::<f32>(&manifest, &a.data, model.config())?;

    let mut effective = run;
    effective.model = model.config().clone();
    effective.training = train_cfg.clone();
    let config_hash = effective.hash()?;

    let artifacts = train(&mut model, &samples, &train_cfg, &a.out, resume_state)?;
    // Stamp the effective configuration into the final checkpoint and keep a
    // copy of the configuration itself next to it.
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), config_hash.clone());
    model.save_with_meta(&artifacts.final_model, &extra)?;
    effective.save(&a.out.join("run_config.json"))?;

    println!(
        "trained {} steps ({} clips, mode {}) -> {}",
        train_cfg.total_steps(),
        samples.len(),
        mode_name(a.mode),
        artifacts.final_model.display()
    );
    println!("loss log {}", artifacts.loss_csv.display());
    println!("config hash {config_hash}");
    Ok(())
}

// ---- sample ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptSource {
    /// Prompts from a clip record of an annotation manifest.
    Manifest,
    /// Prompts expanded from `--prompt` by the chat endpoint (or its mock).
    Endpoint,
    /// Prompts from a freshly sampled simulator scenario.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NegativeModeArg {
    Counterfactual,
    BlankLocal,
}

impl From<NegativeModeArg> for NegativeMode {
    fn from(v: NegativeModeArg) -> Self {
        match v {
            NegativeModeArg::Counterfactual => NegativeMode::Counterfactual,
            NegativeModeArg::BlankLocal => NegativeMode::BlankLocal,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model checkpoint to sample from.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for the exported samples.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PromptSource::Manifest)]
    pub prompt_source: PromptSource,
    /// Annotation manifest (manifest prompt source).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record index within the manifest.
    #[arg(long, default_value_t = 0)]
    pub clip_index: usize,
    /// Global prompt (endpoint prompt source).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Use the built-in deterministic annotator for prompt expansion.
    #[arg(long)]
    pub mock: bool,
    /// Chat endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Seed of the initial noise (also seeds the synthetic scenario).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Guidance strength g.
    #[arg(long)]
    pub g: Option<f64>,
    /// Euler integration steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub negative_mode: Option<NegativeModeArg>,
    /// Interpret g directly as the blend weight w instead of w = g - 1.
    #[arg(long)]
    pub w_is_scale: bool,
    /// Timestep-grid shift.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Number of samples; seeds count up from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output file stem (default `sample_<seed>`).
    #[arg(long)]
    pub stem: Option<String>,
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let run = load_run_config(a.config.as_deref())?;
    let mut gcfg: GuidanceConfig = run.guidance.clone();
    if let Some(v) = a.seed {
        gcfg.seed = v;
    }
    if let Some(v) = a.g {
        gcfg.guidance = v;
    }
    if let Some(v) = a.steps {
        gcfg.steps = v;
    }
    if let Some(v) = a.negative_mode {
        gcfg.negative_mode = v.into();
    }
    if a.w_is_scale {
        gcfg.w_is_scale = true;
    }
    if let Some(v) = a.shift {
        gcfg.shift = v;
    }
    gcfg.validate()?;
    if a.count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }

    let model: Model<f32> = Model::load(&a.ckpt)?;
    let model_cfg = model.config().clone();
    let vocab = Vocab::standard();
    let bundle = match a.prompt_source {
        PromptSource::Manifest => {
            let path = a.manifest.clone().ok_or_else(|| {
                Error::Input("prompt source `manifest` needs --manifest".into())
            })?;
            let manifest = Manifest::load(&path)?;
            let record = manifest.records.get(a.clip_index).ok_or_else(|| {
                Error::Input(format!(
                    "clip index {} out of range; the manifest lists {} clips",
                    a.clip_index,
                    manifest.records.len()
                ))
            })?;
            record_to_bundle(record, &vocab, &model_cfg)?
        }
        PromptSource::Endpoint => {
            let prompt = a.prompt.clone().ok_or_else(|| {
                Error::Input("prompt source `endpoint` needs --prompt".into())
            })?;
            let mut client_cfg = run.client.clone();
            if let Some(v) = &a.endpoint {
                client_cfg.endpoint = v.clone();
            }
            let client: Box<dyn VlmClient> = if a.mock {
                Box::new(MockVlm::new())
            } else {
                Box::new(HttpVlm::new(client_cfg)?)
            };
            let retries = run.annotate.retries;
            let locals = crate::annotate::infer_local_prompts(
                client.as_ref(),
                &prompt,
                model_cfg.chunks(),
                retries,
            )?;
            let negatives = match gcfg.negative_mode {
                NegativeMode::Counterfactual => {
                    let mut negs = Vec::with_capacity(locals.len());
                    for local in &locals {
                        negs.push(crate::annotate::gen_counterfactual(
                            client.as_ref(),
                            local,
                            retries,
                        )?);
                    }
                    Some(negs)
                }
                NegativeMode::BlankLocal => None,
            };
            crate::conditioning::ConditioningBundle::from_captions(
                &vocab,
                &prompt,
                &locals,
                negatives.as_deref(),
                model_cfg.global_len,
                model_cfg.local_len,
            )?
        }
        PromptSource::Synthetic => {
            let world = sample_world(gcfg.seed, 0, model_cfg.frames);
            let (_, states) = simulate(&world)?;
            let intervals = segment_video(model_cfg.frames, model_cfg.chunks())?;
            let caps = caption_chunks(&states, &intervals);
            crate::conditioning::ConditioningBundle::from_captions(
                &vocab,
                &caps.global,
                &caps.locals,
                Some(&caps.counterfactuals),
                model_cfg.global_len,
                model_cfg.local_len,
            )?
        }
    };
    bundle.validate(model_cfg.chunks(), model_cfg.global_len, model_cfg.local_len)?;

    let mut effective = run;
    effective.model = model_cfg.clone();
    effective.guidance = gcfg.clone();
    let config_hash = effective.hash()?;
    let checkpoint_hash = sha256_file(&a.ckpt)?;

    let field = ModelVelocity::new(&model);
    let base_seed = gcfg.seed;
    for k in 0..a.count {
        let mut cfg_k = gcfg.clone();
        cfg_k.seed = base_seed + k as u64;
        let run_out = sample::<f32, _>(&field, &bundle, &cfg_k, &vocab)?;
        let video = decode_tokens(&run_out.tokens, &model_cfg)?;
        let stem = match (&a.stem, a.count) {
            (Some(s), 1) => s.clone(),
            (Some(s), _) => format!("{s}_{}", cfg_k.seed),
            (None, _) => format!("sample_{}", cfg_k.seed),
        };
        let manifest = SamplingManifest::new(&cfg_k, &bundle)
            .with_hashes(Some(config_hash.clone()), Some(checkpoint_hash.clone()));
        let artifacts = export_sample(&a.out, &stem, &video, &manifest)?;
        println!(
            "sample seed {} -> {} (sha256 {})",
            cfg_k.seed,
            artifacts.raw.display(),
            sha256_file(&artifacts.raw)?
        );
    }
    Ok(())
}

// ---- eval ----

/// A labeled input directory: `LABEL=DIR`.
#[derive(Debug, Clone)]
pub struct LabeledDir {
    pub label: String,
    pub dir: PathBuf,
}

impl std::str::FromStr for LabeledDir {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (label, dir) = s
            .split_once('=')
            .ok_or_else(|| format!("expected LABEL=DIR, got {s:?}"))?;
        if label.is_empty() || dir.is_empty() {
            return Err(format!("expected LABEL=DIR, got {s:?}"));
        }
        Ok(LabeledDir {
            label: label.to_string(),
            dir: PathBuf::from(dir),
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output stem; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sample directory per arm (`LABEL=DIR`), holding exported
    /// `*.pvid` + `*.json` pairs. Repeatable; row order follows flag order.
    #[arg(long)]
    pub samples: Vec<LabeledDir>,
    /// Raw clip directory per arm (`LABEL=DIR`), holding bare `*.pvid`
    /// files (for example the simulator dataset). Repeatable.
    #[arg(long)]
    pub clips: Vec<LabeledDir>,
    /// Run the attention-locality probe on every sample arm.
    #[arg(long)]
    pub locality: bool,
    /// Checkpoint for the locality probe.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Accept inputs whose run-configuration hashes disagree.
    #[arg(long)]
    pub allow_mixed: bool,
}

/// Sorted `*.pvid` files of a directory.
fn pvid_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", dir.display()),
            ))
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pvid"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.samples.is_empty() && a.clips.is_empty() {
        return Err(Error::Input(
            "nothing to evaluate; pass --samples LABEL=DIR or --clips LABEL=DIR".into(),
        ));
    }
    if a.locality && a.ckpt.is_none() {
        return Err(Error::Input("--locality needs --ckpt".into()));
    }
    let run = load_run_config(a.config.as_deref())?;
    let tracker = run.tracker.clone();

    // Collect every missing file up front so one error names them all.
    let mut missing: Vec<String> = Vec::new();
    for arm in &a.samples {
        if !arm.dir.is_dir() {
            missing.push(arm.dir.display().to_string());
        }
    }
    for arm in &a.clips {
        if !arm.dir.is_dir() {
            missing.push(arm.dir.display().to_string());
        }
    }
    if let Some(ckpt) = &a.ckpt {
        if !ckpt.is_file() {
            missing.push(ckpt.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing evaluation inputs: {}", missing.join(", ")),
        )));
    }

    let probe_model: Option<Model<f32>> = match (&a.ckpt, a.locality) {
        (Some(p), true) => Some(Model::load(p)?),
        _ => None,
    };

    let mut rows: Vec<EvalRow> = Vec::new();
    let mut all_seeds: Vec<u64> = Vec::new();
    let mut config_hashes: Vec<Option<String>> = Vec::new();

    for arm in &a.samples {
        let raws = pvid_files(&arm.dir)?;
        let mut absent: Vec<String> = Vec::new();
        for raw in &raws {
            let m = raw.with_extension("json");
            if !m.is_file() {
                absent.push(m.display().to_string());
            }
        }
        if !absent.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("samples in {} lack manifests: {}", arm.dir.display(), absent.join(", ")),
            )));
        }
        if raws.is_empty() {
            return Err(Error::Input(format!(
                "no .pvid samples under {}",
                arm.dir.display()
            )));
        }
        let mut scores: Vec<VideoScore> = Vec::new();
        let mut checkpoint_hashes: Vec<Option<String>> = Vec::new();
        let mut locality_acc: Option<Vec<f64>> = None;
        let mut locality_count = 0usize;
        for raw in &raws {
            let manifest = SamplingManifest::load(&raw.with_extension("json"))?;
            let video = VideoTensor::load_raw(raw)?;
            let chunks = manifest.bundle.chunks();
            let intervals = segment_video(video.frames(), chunks)?;
            scores.push(track_and_score(&video, &tracker, &intervals));
            all_seeds.push(manifest.seed);
            config_hashes.push(manifest.config_hash.clone());
            checkpoint_hashes.push(manifest.checkpoint_hash.clone());

            if let Some(model) = &probe_model {
                let cfg = model.config();
                let tokens = crate::training::video_to_tokens::<f32>(
                    &video,
                    cfg.patch_t,
                    cfg.patch_hw,
                )?;
                let batched = Tensor::new(
                    vec![1, cfg.num_tokens(), cfg.patch_dim()],
                    tokens.data().to_vec(),
                )?;
                let per_layer =
                    attention_locality(model, &batched, &[manifest.bundle.clone()], 0.5)?;
                match &mut locality_acc {
                    Some(acc) => {
                        for (s, v) in acc.iter_mut().zip(&per_layer) {
                            *s += v;
                        }
                    }
                    None => locality_acc = Some(per_layer),
                }
                locality_count += 1;
            }
        }
        ensure_uniform_hashes(&checkpoint_hashes, a.allow_mixed)?;
        let mut row = EvalRow::from_scores(&arm.label, &scores);
        row.checkpoint_hash = checkpoint_hashes.into_iter().next().flatten();
        row.locality = locality_acc.map(|acc| {
            acc.into_iter().map(|s| s / locality_count as f64).collect()
        });
        rows.push(row);
    }

    for arm in &a.clips {
        let raws = pvid_files(&arm.dir)?;
        if raws.is_empty() {
            return Err(Error::Input(format!(
                "no .pvid clips under {}",
                arm.dir.display()
            )));
        }
        let mut scores: Vec<VideoScore> = Vec::new();
        for raw in &raws {
            let video = VideoTensor::load_raw(raw)?;
            let intervals = segment_video(video.frames(), run.dataset.chunks)?;
            scores.push(track_and_score(&video, &tracker, &intervals));
        }
        rows.push(EvalRow::from_scores(&arm.label, &scores));
    }

    ensure_uniform_hashes(&config_hashes, a.allow_mixed)?;
    let report_hash = config_hashes.into_iter().next().flatten();
    all_seeds.sort_unstable();
    all_seeds.dedup();

    let report = EvalReport::new(rows, all_seeds, report_hash);
    let json = a.out.with_extension("json");
    let csv = a.out.with_extension("csv");
    report.save_json(&json)?;
    report.save_csv(&csv)?;
    for row in &report.rows {
        println!(
            "{}: pc {:.4} ({} / {} applicable over {} clips)",
            row.label, row.pc, row.passed, row.applicable, row.clips
        );
    }
    println!("report -> {} and {}", json.display(), csv.display());
    Ok(())
}

// ---- inspect-attention ----

#[derive(Debug, Args)]
pub struct InspectAttentionArgs {
    /// Model checkpoint to probe.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Annotation manifest supplying prompts (and clips, via --data).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset directory the manifest's clip paths are relative to.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Diffusion time of the frozen probe pass.
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Number of clips to average over.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Optional JSON output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_inspect_attention(a: &InspectAttentionArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.t) {
        return Err(Error::Input(format!("probe time {} outside [0, 1]", a.t)));
    }
    let model: Model<f32> = Model::load(&a.ckpt)?;
    let cfg = model.config().clone();
    let manifest = Manifest::load(&a.manifest)?;
    let count = a.count.clamp(1, manifest.records.len().max(1));
    let samples = load_train_samples::<f32>(
        &Manifest { records: manifest.records.into_iter().take(count).collect() },
        &a.data,
        &cfg,
    )?;
    if samples.is_empty() {
        return Err(Error::Input("the manifest lists no clips to probe".into()));
    }

    let mut acc: Option<Vec<f64>> = None;
    for s in &samples {
        let batched = Tensor::new(
            vec![1, cfg.num_tokens(), cfg.patch_dim()],
            s.tokens.data().to_vec(),
        )?;
        let per_layer = attention_locality(&model, &batched, &[s.bundle.clone()], a.t)?;
        match &mut acc {
            Some(v) => {
                for (x, y) in v.iter_mut().zip(&per_layer) {
                    *x += y;
                }
            }
            None => acc = Some(per_layer),
        }
    }
    let per_layer: Vec<f64> = acc
        .expect("at least one sample")
        .into_iter()
        .map(|s| s / samples.len() as f64)
        .collect();
    let uniform = 1.0 / cfg.chunks() as f64;
    println!(
        "chunk-attention locality at t={} over {} clips (uniform = {:.4}):",
        a.t,
        samples.len(),
        uniform
    );
    for (i, v) in per_layer.iter().enumerate() {
        println!("  layer {i}: {v:.4} ({:+.4} vs uniform)", v - uniform);
    }
    if let Some(out) = &a.out {
        let payload = serde_json::json!({
            "t": a.t,
            "clips": samples.len(),
            "uniform": uniform,
            "per_layer": per_layer,
            "checkpoint": a.ckpt.display().to_string(),
        });
        std::fs::write(out, serde_json::to_vec_pretty(&payload)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn subcommands_parse_with_their_documented_flags() {
        let cli = Cli::try_parse_from([
            "physvid", "gen-data", "--out", "d", "--clips", "64", "--seed", "1", "--force",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::GenData(_)));

        let cli = Cli::try_parse_from([
            "physvid", "annotate", "--data", "d", "--mock", "--concurrency", "3",
        ])
        .unwrap();
        match cli.command {
            Command::Annotate(a) => {
                assert!(a.mock);
                assert_eq!(a.concurrency, Some(3));
            }
            _ => panic!("wrong subcommand"),
        }

        let cli = Cli::try_parse_from([
            "physvid", "train", "--data", "d", "--out", "o", "--mode", "finetune",
        ])
        .unwrap();
        match cli.command {
            Command::Train(a) => assert_eq!(a.mode, TrainMode::Finetune),
            _ => panic!("wrong subcommand"),
        }

        let cli = Cli::try_parse_from([
            "physvid", "sample", "--ckpt", "m.ckpt", "--out", "o", "--g", "6", "--steps",
            "50", "--negative-mode", "blank-local",
        ])
        .unwrap();
        match cli.command {
            Command::Sample(a) => {
                assert_eq!(a.g, Some(6.0));
                assert_eq!(a.steps, Some(50));
                assert_eq!(a.negative_mode, Some(NegativeModeArg::BlankLocal));
            }
            _ => panic!("wrong subcommand"),
        }

        let cli = Cli::try_parse_from([
            "physvid", "eval", "--out", "r", "--samples", "full=dir_a", "--samples",
            "baseline=dir_b", "--allow-mixed",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.samples.len(), 2);
                assert_eq!(a.samples[0].label, "full");
                assert_eq!(a.samples[1].dir, PathBuf::from("dir_b"));
                assert!(a.allow_mixed);
            }
            _ => panic!("wrong subcommand"),
        }

        let cli = Cli::try_parse_from([
            "physvid", "inspect-attention", "--ckpt", "m.ckpt", "--manifest", "m.jsonl",
            "--data", "d",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::InspectAttention(_)));
    }

    #[test]
    fn labeled_dirs_reject_malformed_values() {
        assert!("full=dir".parse::<LabeledDir>().is_ok());
        assert!("nodivider".parse::<LabeledDir>().is_err());
        assert!("=dir".parse::<LabeledDir>().is_err());
        assert!("label=".parse::<LabeledDir>().is_err());
    }

    #[test]
    fn mode_checkpoint_compatibility_table() {
        assert!(mode_matches(TrainMode::Physvid, true));
        assert!(!mode_matches(TrainMode::Physvid, false));
        assert!(mode_matches(TrainMode::Finetune, false));
        assert!(!mode_matches(TrainMode::Finetune, true));
    }

    #[test]
    fn state_paths_map_to_model_paths() {
        assert_eq!(
            sibling_model_path(Path::new("/run/state_final.ckpt")).unwrap(),
            PathBuf::from("/run/model_final.ckpt")
        );
        assert_eq!(
            sibling_model_path(Path::new("state_step200.ckpt")).unwrap(),
            PathBuf::from("model_step200.ckpt")
        );
        assert!(sibling_model_path(Path::new("weights.ckpt")).is_err());
    }
}
