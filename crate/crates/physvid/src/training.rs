//! Flow-matching training with a shifted timestep sampler and a two-stage
//! schedule: stage 1 freezes everything except the chunk-local pathway (and
//! its shared text adapter), stage 2 unfreezes the whole model.
//!
//! Every step derives its own RNG stream from `(seed, step)`, so training is
//! bit-identically resumable: the batch indices, conditioning dropout coins,
//! timesteps, and noise drawn at step `k` are the same whether or not the
//! process restarted at step `k - 1`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::model::{patchify, ForwardOut, Model, Trainability};
use crate::stream_rng;
use crate::tensor::{load_checkpoint, save_checkpoint, Scalar, Tape, Tensor, Var};
use crate::text::Vocab;
use crate::video::VideoTensor;

/// Map a uniform draw through the timestep shift: `t = s·u / (1 + (s−1)·u)`.
/// `s = 1` is the identity; larger `s` pushes mass toward `t ≈ 1` (high
/// noise). Monotone on `[0, 1]` with fixed endpoints.
pub fn shift_timestep(u: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) || !u.is_finite() {
        return Err(Error::Input(format!("uniform draw {u} outside [0, 1]")));
    }
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::Config(format!("timestep shift {s} must be >= 1")));
    }
    Ok(s * u / (1.0 + (s - 1.0) * u))
}

/// Inverse of [`shift_timestep`]: the uniform mass below `t`, i.e. the CDF
/// of the shifted distribution.
pub fn unshift_timestep(t: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
    }
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::Config(format!("timestep shift {s} must be >= 1")));
    }
    Ok(t / (s - (s - 1.0) * t))
}

/// One training example: pre-patchified clean tokens plus its conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample<T: Scalar> {
    pub tokens: Tensor<T>,
    pub bundle: ConditioningBundle,
}

/// Patchify a video and map pixel values from `[0, 1]` to `[-1, 1]`, the
/// range the denoiser trains in. [`tokens_to_video`] inverts this.
pub fn video_to_tokens<T: Scalar>(
    video: &VideoTensor,
    patch_t: usize,
    patch_hw: usize,
) -> Result<Tensor<T>> {
    let raw = patchify::<T>(video, patch_t, patch_hw)?;
    let shape = raw.shape().to_vec();
    let data = raw
        .into_data()
        .into_iter()
        .map(|v| T::from_f64(v.as_f64() * 2.0 - 1.0))
        .collect();
    Tensor::new(shape, data)
}

/// Inverse of [`video_to_tokens`] for a single video's token buffer.
pub fn tokens_to_video<T: Scalar>(
    tokens: &[T],
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch_t: usize,
    patch_hw: usize,
) -> Result<VideoTensor> {
    let unscaled: Vec<T> = tokens
        .iter()
        .map(|v| T::from_f64((v.as_f64() + 1.0) / 2.0))
        .collect();
    crate::model::unpatchify(&unscaled, frames, channels, height, width, patch_t, patch_hw)
}

/// Noisy interpolants and velocity targets for one batch.
pub struct FlowTerms<T: Scalar> {
    /// Per-item diffusion times drawn through the shifted sampler.
    pub ts: Vec<f64>,
    /// `x_t = (1−t)·x₀ + t·ε`, same shape as the clean batch.
    pub noisy: Tensor<T>,
    /// Velocity target `ε − x₀`.
    pub target: Tensor<T>,
}

/// Draw `t` and `ε` for every batch item and build the interpolants.
/// Draw order is fixed (all timesteps, then all noise values, batch-major)
/// so a given RNG stream always produces the same terms.
pub fn flow_terms<T: Scalar>(
    clean: &Tensor<T>,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FlowTerms<T>> {
    let shape = clean.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "flow_terms",
            msg: format!("expected [batch, tokens, patch_dim], got {shape:?}"),
        });
    }
    let (b, per) = (shape[0], shape[1] * shape[2]);
    let ts: Vec<f64> = (0..b)
        .map(|_| {
            // open interval: endpoints carry zero density anyway
            let u = rng.random_range(f64::EPSILON..1.0);
            shift_timestep(u, shift)
        })
        .collect::<Result<_>>()?;
    let mut noisy = Vec::with_capacity(b * per);
    let mut target = Vec::with_capacity(b * per);
    for (bi, &t) in ts.iter().enumerate() {
        for i in 0..per {
            let x0 = clean.data()[bi * per + i].as_f64();
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            noisy.push(T::from_f64((1.0 - t) * x0 + t * eps));
            target.push(T::from_f64(eps - x0));
        }
    }
    Ok(FlowTerms {
        ts,
        noisy: Tensor::new(shape.clone(), noisy)?,
        target: Tensor::new(shape, target)?,
    })
}

/// A single flow-matching objective evaluation on the tape.
pub struct FlowStep {
    pub loss: Var,
    pub forward: ForwardOut,
    pub ts: Vec<f64>,
}

/// Mean-squared error between the model's predicted velocity on `x_t` and
/// the target `ε − x₀`, with `t` and `ε` drawn from `rng`.
pub fn fm_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    clean: &Tensor<T>,
    cond: &[ConditioningBundle],
    shift: f64,
    rng: &mut ChaCha8Rng,
    train: Trainability,
) -> Result<FlowStep> {
    let terms = flow_terms(clean, shift, rng)?;
    let forward = model.forward(tape, &terms.noisy, &terms.ts, cond, train)?;
    let target = tape.leaf(&terms.target);
    let loss = tape.mse(forward.velocity, target)?;
    Ok(FlowStep {
        loss,
        forward,
        ts: terms.ts,
    })
}

/// Trainer schedule and optimizer settings. The defaults are the desk-scale
/// reference schedule: 200 local-only steps at 1e-3, then 400 full steps at
/// 2e-4, batches of 2, timestep shift 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub shift: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of replacing the global caption with the blank prompt.
    pub global_blank_prob: f64,
    /// Independent probability of blanking all local captions.
    pub local_blank_prob: f64,
    /// Save model + state every this many steps (0 = final only).
    pub checkpoint_every: usize,
    /// Gradient-accumulation shards per step; must divide the batch size.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 200,
            stage1_lr: 1e-3,
            stage2_steps: 400,
            stage2_lr: 2e-4,
            batch_size: 2,
            shift: 8.0,
            seed: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            global_blank_prob: 0.1,
            local_blank_prob: 0.1,
            checkpoint_every: 0,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 {
            return err("learning rates must be positive".into());
        }
        if self.shift < 1.0 || !self.shift.is_finite() {
            return err(format!("timestep shift {} must be >= 1", self.shift));
        }
        if self.batch_size == 0 {
            return err("batch size must be positive".into());
        }
        if self.shards == 0 || self.batch_size % self.shards != 0 {
            return err(format!(
                "{} shards must divide batch size {}",
                self.shards, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("momentum decays must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return err("adam epsilon must be positive, weight decay non-negative".into());
        }
        for p in [self.global_blank_prob, self.local_blank_prob] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("dropout probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    fn stage_of(&self, step: usize) -> (u8, f64, Trainability) {
        if step <= self.stage1_steps {
            (1, self.stage1_lr, Trainability::LocalOnly)
        } else {
            (2, self.stage2_lr, Trainability::All)
        }
    }
}

/// Optimizer moments, step counters, and the loss history — everything
/// needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps (global, across both stages).
    pub step: usize,
    pub stage: u8,
    pub moments_m: BTreeMap<String, Vec<f64>>,
    pub moments_v: BTreeMap<String, Vec<f64>>,
    /// Per-parameter update counts for bias correction.
    pub counts: BTreeMap<String, u64>,
    pub losses: Vec<f64>,
}

impl TrainState {
    fn fresh() -> Self {
        TrainState {
            step: 0,
            stage: 1,
            moments_m: BTreeMap::new(),
            moments_v: BTreeMap::new(),
            counts: BTreeMap::new(),
            losses: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut tensors: Vec<(String, Tensor<f64>)> = Vec::new();
        for (name, m) in &self.moments_m {
            tensors.push((format!("m.{name}"), Tensor::new(vec![m.len()], m.clone())?));
        }
        for (name, v) in &self.moments_v {
            tensors.push((format!("v.{name}"), Tensor::new(vec![v.len()], v.clone())?));
        }
        let named: Vec<(String, &Tensor<f64>)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "train_state".to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("stage".to_string(), self.stage.to_string());
        meta.insert("counts".to_string(), serde_json::to_string(&self.counts)?);
        meta.insert("losses".to_string(), serde_json::to_string(&self.losses)?);
        meta.insert("config".to_string(), serde_json::to_string(cfg)?);
        save_checkpoint(path, &named, &meta)
    }

    /// Load a state written by [`TrainState::save`], verifying it belongs to
    /// the same training configuration.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let data = load_checkpoint::<f64>(path)?;
        let stored: TrainConfig = serde_json::from_str(
            data.meta
                .get("config")
                .ok_or_else(|| Error::State("train state lacks its config".into()))?,
        )?;
        if &stored != cfg {
            return Err(Error::State(
                "train state was produced under a different training config".into(),
            ));
        }
        let step = data
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::State("train state lacks a step counter".into()))?;
        let stage = data
            .meta
            .get("stage")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::State("train state lacks a stage id".into()))?;
        let counts = serde_json::from_str(
            data.meta
                .get("counts")
                .ok_or_else(|| Error::State("train state lacks update counts".into()))?,
        )?;
        let losses = serde_json::from_str(
            data.meta
                .get("losses")
                .ok_or_else(|| Error::State("train state lacks a loss history".into()))?,
        )?;
        let mut moments_m = BTreeMap::new();
        let mut moments_v = BTreeMap::new();
        for (name, tensor) in &data.tensors {
            if let Some(p) = name.strip_prefix("m.") {
                moments_m.insert(p.to_string(), tensor.data().to_vec());
            } else if let Some(p) = name.strip_prefix("v.") {
                moments_v.insert(p.to_string(), tensor.data().to_vec());
            } else {
                return Err(Error::State(format!("unexpected state tensor {name}")));
            }
        }
        Ok(TrainState {
            step,
            stage,
            moments_m,
            moments_v,
            counts,
            losses,
        })
    }
}

/// Files a training run produces under its output directory.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub final_model: PathBuf,
    pub final_state: PathBuf,
    pub loss_csv: PathBuf,
}

/// Pick batch members and apply conditioning dropout for one step. Draw
/// order: batch indices, then per-item global/local dropout coins.
fn assemble_batch<T: Scalar>(
    dataset: &[TrainSample<T>],
    cfg: &TrainConfig,
    vocab: &Vocab,
    model_cfg: &crate::model::ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Vec<ConditioningBundle>)> {
    let b = cfg.batch_size;
    let (np, pd) = (model_cfg.num_tokens(), model_cfg.patch_dim());
    let indices: Vec<usize> = (0..b).map(|_| rng.random_range(0..dataset.len())).collect();
    let mut tokens = Vec::with_capacity(b * np * pd);
    let mut bundles = Vec::with_capacity(b);
    let blank = ConditioningBundle::blank(
        vocab,
        model_cfg.chunks(),
        model_cfg.global_len,
        model_cfg.local_len,
    );
    for &idx in &indices {
        let sample = &dataset[idx];
        if sample.tokens.shape() != [np, pd] {
            return Err(Error::Contract(format!(
                "dataset sample has token shape {:?}, model wants [{np}, {pd}]",
                sample.tokens.shape()
            )));
        }
        tokens.extend_from_slice(sample.tokens.data());
        let mut bundle = sample.bundle.clone();
        let drop_global = rng.random_range(0.0..1.0) < cfg.global_blank_prob;
        let drop_locals = rng.random_range(0.0..1.0) < cfg.local_blank_prob;
        if drop_global {
            bundle.global_ids = blank.global_ids.clone();
            bundle.global_mask = blank.global_mask.clone();
        }
        if drop_locals {
            bundle.local_ids = blank.local_ids.clone();
            bundle.local_masks = blank.local_masks.clone();
        }
        bundles.push(bundle);
    }
    Ok((Tensor::new(vec![b, np, pd], tokens)?, bundles))
}

struct Adam<'c> {
    cfg: &'c TrainConfig,
}

impl Adam<'_> {
    /// Decoupled-weight-decay adaptive-moment update, computed in f64.
    fn apply<T: Scalar>(
        &self,
        state: &mut TrainState,
        model: &mut Model<T>,
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) {
        let (b1, b2, eps, wd) = (
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
            self.cfg.weight_decay,
        );
        for (name, grad) in grads {
            let count = state.counts.entry(name.clone()).or_insert(0);
            *count += 1;
            let t = *count as i32;
            let m = state
                .moments_m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = state
                .moments_v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let tensor = model
                .params_mut()
                .tensor_mut(name)
                .expect("gradient for unknown parameter");
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let theta = data[i].as_f64();
                let updated = theta - lr * (mhat / (vhat.sqrt() + eps) + wd * theta);
                data[i] = T::from_f64(updated);
            }
        }
    }
}

fn write_abort_snapshot<T: Scalar>(
    model: &Model<T>,
    state: &TrainState,
    cfg: &TrainConfig,
    out_dir: &Path,
    step: usize,
    msg: &str,
) -> Result<()> {
    model.save(&out_dir.join("abort_model.ckpt"))?;
    state.save(&out_dir.join("abort_state.ckpt"), cfg)?;
    let diag = serde_json::json!({
        "step": step,
        "reason": msg,
        "recent_losses": state.losses.iter().rev().take(10).collect::<Vec<_>>(),
    });
    std::fs::write(
        out_dir.join("abort_reason.json"),
        serde_json::to_vec_pretty(&diag)?,
    )?;
    Ok(())
}

/// Run (or resume) the two-stage schedule. Writes `loss.csv`, periodic
/// checkpoints, and `model_final.ckpt` / `state_final.ckpt` to `out_dir`.
///
/// Stage 1 trains only the local pathway; a model built without one must use
/// `stage1_steps = 0` (the plain fine-tuning ablation).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[TrainSample<T>],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if !model.config().local_pathway && cfg.stage1_steps > 0 {
        return Err(Error::Config(
            "model has no local pathway; set stage1_steps to 0 for plain fine-tuning".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocab::standard();
    let model_cfg = model.config().clone();

    let mut state = resume.unwrap_or_else(TrainState::fresh);
    if state.step > cfg.total_steps() {
        return Err(Error::State(format!(
            "resume state is at step {}, beyond the configured {}",
            state.step,
            cfg.total_steps()
        )));
    }

    let csv_path = out_dir.join("loss.csv");
    let mut csv = if state.step == 0 {
        let mut f = BufWriter::new(File::create(&csv_path)?);
        writeln!(f, "step,stage,loss,lr")?;
        f
    } else {
        BufWriter::new(OpenOptions::new().create(true).append(true).open(&csv_path)?)
    };

    let adam = Adam { cfg };
    let shard_b = cfg.batch_size / cfg.shards;

    for step in state.step + 1..=cfg.total_steps() {
        let (stage, lr, train_mode) = cfg.stage_of(step);
        let mut rng = stream_rng(cfg.seed, step as u64);
        let (tokens, bundles) = assemble_batch(dataset, cfg, &vocab, &model_cfg, &mut rng)?;

        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        let mut order: BTreeMap<String, usize> = BTreeMap::new();
        let mut loss_acc = 0.0f64;
        let frac = shard_b as f64 / cfg.batch_size as f64;
        let mut failure: Option<String> = None;
        for shard in 0..cfg.shards {
            let lo = shard * shard_b;
            let shard_tokens = Tensor::new(
                vec![shard_b, model_cfg.num_tokens(), model_cfg.patch_dim()],
                tokens.data()[lo * model_cfg.num_tokens() * model_cfg.patch_dim()
                    ..(lo + shard_b) * model_cfg.num_tokens() * model_cfg.patch_dim()]
                    .to_vec(),
            )?;
            let shard_cond = &bundles[lo..lo + shard_b];
            let mut tape = Tape::<T>::new();
            let step_res = fm_loss(
                model,
                &mut tape,
                &shard_tokens,
                shard_cond,
                cfg.shift,
                &mut rng,
                train_mode,
            )
            .and_then(|flow| {
                let lv = tape.value(flow.loss)[0].as_f64();
                tape.backward(flow.loss)?;
                Ok((flow, lv))
            });
            let (flow, shard_loss) = match step_res {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            loss_acc += frac * shard_loss;
            for (name, var) in &flow.forward.trainable {
                if let Some(g) = tape.grad(*var) {
                    let scaled: Vec<f64> = g.iter().map(|x| frac * x.as_f64()).collect();
                    match order.get(name) {
                        Some(&i) => {
                            for (acc, s) in grads[i].1.iter_mut().zip(&scaled) {
                                *acc += s;
                            }
                        }
                        None => {
                            order.insert(name.clone(), grads.len());
                            grads.push((name.clone(), scaled));
                        }
                    }
                }
            }
        }

        let abort_msg = match failure {
            Some(msg) => Some(msg),
            None if !loss_acc.is_finite() => Some(format!("non-finite loss {loss_acc}")),
            None => None,
        };
        if let Some(msg) = abort_msg {
            csv.flush()?;
            write_abort_snapshot(model, &state, cfg, out_dir, step, &msg)?;
            return Err(Error::NumericalAbort { step, msg });
        }

        adam.apply(&mut state, model, &grads, lr);
        state.step = step;
        state.stage = stage;
        state.losses.push(loss_acc);
        writeln!(csv, "{step},{stage},{loss_acc},{lr}")?;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps()
        {
            model.save(&out_dir.join(format!("model_step{step}.ckpt")))?;
            state.save(&out_dir.join(format!("state_step{step}.ckpt")), cfg)?;
        }
    }
    csv.flush()?;

    let final_model = out_dir.join("model_final.ckpt");
    let final_state = out_dir.join("state_final.ckpt");
    model.save(&final_model)?;
    state.save(&final_state, cfg)?;
    Ok(TrainArtifacts {
        final_model,
        final_state,
        loss_csv: csv_path,
    })
}
