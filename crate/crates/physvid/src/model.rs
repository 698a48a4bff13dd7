//! The video denoiser: a compact diffusion transformer over space-time
//! patches. Each block runs four stages in order:
//!
//! 1. modulated self-attention over video tokens (rotary phases on frame,
//!    row, and column coordinates),
//! 2. cross-attention to the pooled whole-video caption (no rotary),
//! 3. chunk-local cross-attention to concatenated per-chunk captions, where
//!    text keys carry the *same* rotary basis as the video queries with the
//!    chunk's temporal coordinate — locality emerges from phase alignment,
//!    not from masking — gated per channel by a zero-initialized vector,
//! 4. a modulated MLP.
//!
//! Timestep and pooled-caption conditioning drive adaptive layer norm whose
//! modulation projections start at zero, so a freshly built model is the
//! identity over its residual stream. The local pathway's parameters form a
//! separate group so they can be trained alone while the rest stays frozen;
//! with its gates at zero the model is bit-for-bit the plain global model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attend, key_padding_bias, same_chunk_pair_bias, AttendSpec};
use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::rope::{text_chunk_grid, video_grid, ChunkCoordMode, FrequencyBasis};
use crate::stream_rng;
use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointData, Scalar, Tape, Tensor, Var,
};
use crate::text::{Vocab, PAD_ID};
use crate::video::VideoTensor;

/// Hyperparameters of the denoiser. The defaults describe the desk-scale
/// reference model: 21 frames of 32x32 RGB in 8x8 spatial patches, 7 chunks
/// of 3 frames, width 48, 2 heads, 4 blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_t: usize,
    pub patch_hw: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub frames_per_chunk: usize,
    pub global_len: usize,
    pub local_len: usize,
    pub mlp_ratio: usize,
    pub text_blocks: usize,
    pub theta_base: f64,
    pub vocab: usize,
    pub qk_norm: bool,
    pub chunk_coord_mode: ChunkCoordMode,
    /// When false the model is the plain global-caption variant: no local
    /// cross-attention parameters exist at all.
    pub local_pathway: bool,
    /// Ablation: restrict local cross-attention to same-chunk pairs by mask.
    pub hard_chunk_mask: bool,
    /// Diagnostic: skip every rotary rotation (queries and keys pass
    /// unrotated everywhere). Used by locality probes to measure the
    /// content-only baseline.
    pub disable_rope_phases: bool,
    /// Start the final output projection at zero (exact zero velocity at
    /// init). Off by default: a zero output head blocks all gradient signal
    /// to a frozen trunk, which would stall local-only training.
    pub final_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 21,
            channels: 3,
            height: 32,
            width: 32,
            patch_t: 1,
            patch_hw: 8,
            dim: 48,
            heads: 2,
            blocks: 4,
            frames_per_chunk: 3,
            global_len: 16,
            local_len: 16,
            mlp_ratio: 4,
            text_blocks: 1,
            theta_base: 10_000.0,
            vocab: Vocab::standard().size(),
            qk_norm: true,
            chunk_coord_mode: ChunkCoordMode::Raw,
            local_pathway: true,
            hard_chunk_mask: false,
            disable_rope_phases: false,
            final_zero_init: false,
        }
    }
}

impl ModelConfig {
    /// A miniature configuration for gradient checks and smoke tests:
    /// 6 frames of 16x16 RGB, width 12, 2 heads, 2 blocks, 2 chunks.
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 6,
            height: 16,
            width: 16,
            dim: 12,
            blocks: 2,
            global_len: 4,
            local_len: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 || self.text_blocks == 0 {
            return err("dim, heads, blocks and text_blocks must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        let dh = self.dim / self.heads;
        if dh % 6 != 0 {
            return err(format!(
                "head dim {dh} must be divisible by 6 (three coordinate axes, two features per rotation plane)"
            ));
        }
        if self.theta_base <= 1.0 {
            return err(format!("theta_base {} must exceed 1", self.theta_base));
        }
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return err("video dimensions must be positive".into());
        }
        if self.patch_t == 0 || self.patch_hw == 0 {
            return err("patch sizes must be positive".into());
        }
        if self.frames % self.patch_t != 0
            || self.height % self.patch_hw != 0
            || self.width % self.patch_hw != 0
        {
            return err(format!(
                "video {}x{}x{} not divisible by patch {}x{}x{}",
                self.frames, self.height, self.width, self.patch_t, self.patch_hw, self.patch_hw
            ));
        }
        if self.frames_per_chunk == 0 || self.frames % self.frames_per_chunk != 0 {
            return err(format!(
                "{} frames not divisible into chunks of {}",
                self.frames, self.frames_per_chunk
            ));
        }
        if self.frames_per_chunk % self.patch_t != 0 {
            return err(format!(
                "chunk length {} must be a multiple of temporal patch {}",
                self.frames_per_chunk, self.patch_t
            ));
        }
        if self.global_len == 0 || self.local_len == 0 {
            return err("caption token budgets must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.vocab < 3 {
            return err("vocabulary must include the special tokens".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn chunks(&self) -> usize {
        self.frames / self.frames_per_chunk
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_t * self.patch_hw * self.patch_hw
    }

    /// Token grid `(frames, rows, cols)` after patching.
    pub fn token_grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.patch_t,
            self.height / self.patch_hw,
            self.width / self.patch_hw,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (f, r, c) = self.token_grid();
        f * r * c
    }

    /// Chunk index of every video token, frame-major like the token grid.
    pub fn video_token_chunks(&self) -> Vec<usize> {
        let (tf, tr, tc) = self.token_grid();
        let mut out = Vec::with_capacity(tf * tr * tc);
        for ft in 0..tf {
            let chunk = ft * self.patch_t / self.frames_per_chunk;
            out.extend(std::iter::repeat_n(chunk, tr * tc));
        }
        out
    }

    /// Chunk index of every concatenated local text token.
    pub fn text_token_chunks(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.chunks() * self.local_len);
        for c in 0..self.chunks() {
            out.extend(std::iter::repeat_n(c, self.local_len));
        }
        out
    }
}

/// Cut a video into non-overlapping space-time patches, one token per patch.
/// Tokens are ordered frame-major over the `(frame, row, col)` patch grid;
/// within a token, features are laid out `[channel][dt][dy][dx]`.
pub fn patchify<T: Scalar>(
    video: &VideoTensor,
    patch_t: usize,
    patch_hw: usize,
) -> Result<Tensor<T>> {
    let (f, c, h, w) = (video.frames(), video.channels(), video.height(), video.width());
    if patch_t == 0 || patch_hw == 0 || f % patch_t != 0 || h % patch_hw != 0 || w % patch_hw != 0 {
        return Err(Error::Dimension {
            op: "patchify",
            msg: format!("video {f}x{c}x{h}x{w} not divisible by patch {patch_t}x{patch_hw}x{patch_hw}"),
        });
    }
    let (tf, tr, tc) = (f / patch_t, h / patch_hw, w / patch_hw);
    let pd = c * patch_t * patch_hw * patch_hw;
    let mut data = Vec::with_capacity(tf * tr * tc * pd);
    for ft in 0..tf {
        for gy in 0..tr {
            for gx in 0..tc {
                for ch in 0..c {
                    for dt in 0..patch_t {
                        for dy in 0..patch_hw {
                            for dx in 0..patch_hw {
                                let v = video.get(
                                    ft * patch_t + dt,
                                    ch,
                                    gy * patch_hw + dy,
                                    gx * patch_hw + dx,
                                );
                                data.push(T::from_f64(v as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![tf * tr * tc, pd], data)
}

/// Inverse of [`patchify`]: reassemble a `[tokens, patch_dim]` buffer into a
/// video with the given dimensions.
pub fn unpatchify<T: Scalar>(
    tokens: &[T],
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch_t: usize,
    patch_hw: usize,
) -> Result<VideoTensor> {
    if patch_t == 0
        || patch_hw == 0
        || frames % patch_t != 0
        || height % patch_hw != 0
        || width % patch_hw != 0
    {
        return Err(Error::Dimension {
            op: "unpatchify",
            msg: format!(
                "video {frames}x{channels}x{height}x{width} not divisible by patch {patch_t}x{patch_hw}x{patch_hw}"
            ),
        });
    }
    if tokens.len() != frames * channels * height * width {
        return Err(Error::Dimension {
            op: "unpatchify",
            msg: format!(
                "{} token values cannot fill a {frames}x{channels}x{height}x{width} video",
                tokens.len()
            ),
        });
    }
    let (tf, tr, tc) = (frames / patch_t, height / patch_hw, width / patch_hw);
    let pd = channels * patch_t * patch_hw * patch_hw;
    let mut video = VideoTensor::zeros(frames, channels, height, width)?;
    let mut i = 0usize;
    for token in 0..tf * tr * tc {
        let ft = token / (tr * tc);
        let gy = (token / tc) % tr;
        let gx = token % tc;
        let base = token * pd;
        debug_assert_eq!(base, i);
        for ch in 0..channels {
            for dt in 0..patch_t {
                for dy in 0..patch_hw {
                    for dx in 0..patch_hw {
                        video.set(
                            ft * patch_t + dt,
                            ch,
                            gy * patch_hw + dy,
                            gx * patch_hw + dx,
                            tokens[i].as_f64() as f32,
                        );
                        i += 1;
                    }
                }
            }
        }
        let _ = base;
    }
    Ok(video)
}

/// Which parameters may change during an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    All,
    /// Only the chunk-local pathway (its attention projections, norm gain,
    /// gates, and the shared local text adapter).
    LocalOnly,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Local,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Named parameter tensors in a stable order. Every tensor is initialized
/// from its own random stream derived from the seed and the parameter name,
/// so adding or removing whole groups never shifts any other tensor's values.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

fn name_stream(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8+ bytes"))
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, group: ParamGroup, tensor: Tensor<T>) {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            tensor,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Hex digest over the raw bytes of every tensor in `group`, in entry
    /// order. Lets tests assert that frozen groups stay bit-identical.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            hasher.update(e.name.as_bytes());
            hasher.update(e.tensor.le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Replace every tensor from checkpoint data. Names and shapes must match
    /// exactly in both directions.
    pub fn load_from(&mut self, data: &CheckpointData<T>) -> Result<()> {
        for entry in &mut self.entries {
            let loaded = data.get(&entry.name).ok_or_else(|| {
                Error::State(format!("checkpoint is missing parameter {}", entry.name))
            })?;
            if loaded.shape() != entry.tensor.shape() {
                return Err(Error::State(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    loaded.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor = loaded.clone();
        }
        if data.tensors.len() != self.entries.len() {
            return Err(Error::State(format!(
                "checkpoint carries {} tensors, model has {}",
                data.tensors.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }
}

enum Init {
    Randn(f64),
    Zeros,
    Ones,
    /// Identity matrix plus Gaussian noise of the given scale.
    NoisyIdentity(f64),
    /// Gaussian rows with one row forced to zero (the padding embedding).
    EmbedWithZeroRow(f64, usize),
}

fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut rng = stream_rng(seed, name_stream(name));
    let mut gauss = |std: f64| -> Vec<f64> {
        (0..numel)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
            .collect()
    };
    let data = match init {
        Init::Randn(std) => gauss(std),
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::NoisyIdentity(std) => {
            let mut data = gauss(std);
            debug_assert_eq!(shape.len(), 2);
            debug_assert_eq!(shape[0], shape[1]);
            for i in 0..shape[0] {
                data[i * shape[0] + i] += 1.0;
            }
            data
        }
        Init::EmbedWithZeroRow(std, row) => {
            let mut data = gauss(std);
            debug_assert_eq!(shape.len(), 2);
            for v in &mut data[row * shape[1]..(row + 1) * shape[1]] {
                *v = 0.0;
            }
            data
        }
    };
    Tensor::from_f64s(shape, &data).expect("shape matches data length")
}

const WEIGHT_STD: f64 = 0.02;

fn build_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let md = cfg.mlp_ratio * d;
    let pd = cfg.patch_dim();
    let mut store = ParamStore::new();
    let put = |store: &mut ParamStore<T>, name: &str, group, shape: &[usize], init| {
        store.insert(name, group, init_tensor(seed, name, shape, init));
    };

    put(
        &mut store,
        "embed.word",
        ParamGroup::Base,
        &[cfg.vocab, d],
        Init::EmbedWithZeroRow(WEIGHT_STD, PAD_ID),
    );
    for j in 0..cfg.text_blocks {
        let p = format!("text.b{j}");
        put(&mut store, &format!("{p}.norm1.gain"), ParamGroup::Base, &[d], Init::Ones);
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, &format!("{p}.attn.{w}"), ParamGroup::Base, &[d, d], Init::Randn(WEIGHT_STD));
        }
        put(&mut store, &format!("{p}.attn.qgain"), ParamGroup::Base, &[dh], Init::Ones);
        put(&mut store, &format!("{p}.attn.kgain"), ParamGroup::Base, &[dh], Init::Ones);
        put(&mut store, &format!("{p}.norm2.gain"), ParamGroup::Base, &[d], Init::Ones);
        put(&mut store, &format!("{p}.mlp.w1"), ParamGroup::Base, &[d, md], Init::Randn(WEIGHT_STD));
        put(&mut store, &format!("{p}.mlp.b1"), ParamGroup::Base, &[md], Init::Zeros);
        put(&mut store, &format!("{p}.mlp.w2"), ParamGroup::Base, &[md, d], Init::Randn(WEIGHT_STD));
        put(&mut store, &format!("{p}.mlp.b2"), ParamGroup::Base, &[d], Init::Zeros);
    }
    put(&mut store, "text.final_norm.gain", ParamGroup::Base, &[d], Init::Ones);

    put(&mut store, "time.mlp.w1", ParamGroup::Base, &[d, d], Init::Randn(WEIGHT_STD));
    put(&mut store, "time.mlp.b1", ParamGroup::Base, &[d], Init::Zeros);
    put(&mut store, "time.mlp.w2", ParamGroup::Base, &[d, d], Init::Randn(WEIGHT_STD));
    put(&mut store, "time.mlp.b2", ParamGroup::Base, &[d], Init::Zeros);

    put(&mut store, "patch.proj.w", ParamGroup::Base, &[pd, d], Init::Randn(WEIGHT_STD));
    put(&mut store, "patch.proj.b", ParamGroup::Base, &[d], Init::Zeros);

    for i in 0..cfg.blocks {
        let p = format!("block{i}");
        put(&mut store, &format!("{p}.mod.w"), ParamGroup::Base, &[d, 6 * d], Init::Zeros);
        put(&mut store, &format!("{p}.mod.b"), ParamGroup::Base, &[6 * d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, &format!("{p}.self.{w}"), ParamGroup::Base, &[d, d], Init::Randn(WEIGHT_STD));
        }
        put(&mut store, &format!("{p}.self.qgain"), ParamGroup::Base, &[dh], Init::Ones);
        put(&mut store, &format!("{p}.self.kgain"), ParamGroup::Base, &[dh], Init::Ones);
        put(&mut store, &format!("{p}.cross.norm.gain"), ParamGroup::Base, &[d], Init::Ones);
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, &format!("{p}.cross.{w}"), ParamGroup::Base, &[d, d], Init::Randn(WEIGHT_STD));
        }
        put(&mut store, &format!("{p}.cross.qgain"), ParamGroup::Base, &[dh], Init::Ones);
        put(&mut store, &format!("{p}.cross.kgain"), ParamGroup::Base, &[dh], Init::Ones);
        if cfg.local_pathway {
            put(&mut store, &format!("{p}.local.norm.gain"), ParamGroup::Local, &[d], Init::Ones);
            for w in ["wq", "wk", "wv", "wo"] {
                put(&mut store, &format!("{p}.local.{w}"), ParamGroup::Local, &[d, d], Init::Randn(WEIGHT_STD));
            }
            put(&mut store, &format!("{p}.local.qgain"), ParamGroup::Local, &[dh], Init::Ones);
            put(&mut store, &format!("{p}.local.kgain"), ParamGroup::Local, &[dh], Init::Ones);
            put(&mut store, &format!("{p}.local.gate"), ParamGroup::Local, &[d], Init::Zeros);
        }
        put(&mut store, &format!("{p}.mlp.w1"), ParamGroup::Base, &[d, md], Init::Randn(WEIGHT_STD));
        put(&mut store, &format!("{p}.mlp.b1"), ParamGroup::Base, &[md], Init::Zeros);
        put(&mut store, &format!("{p}.mlp.w2"), ParamGroup::Base, &[md, d], Init::Randn(WEIGHT_STD));
        put(&mut store, &format!("{p}.mlp.b2"), ParamGroup::Base, &[d], Init::Zeros);
    }
    if cfg.local_pathway {
        put(&mut store, "local_adapter.w", ParamGroup::Local, &[d, d], Init::NoisyIdentity(WEIGHT_STD));
        put(&mut store, "local_adapter.b", ParamGroup::Local, &[d], Init::Zeros);
    }

    put(&mut store, "final.mod.w", ParamGroup::Base, &[d, 2 * d], Init::Zeros);
    put(&mut store, "final.mod.b", ParamGroup::Base, &[2 * d], Init::Zeros);
    let final_init = if cfg.final_zero_init {
        Init::Zeros
    } else {
        Init::Randn(WEIGHT_STD)
    };
    put(&mut store, "final.proj.w", ParamGroup::Base, &[d, pd], final_init);
    put(&mut store, "final.proj.b", ParamGroup::Base, &[pd], Init::Zeros);
    store
}

/// Result of a denoiser forward pass.
#[derive(Debug)]
pub struct ForwardOut {
    /// Predicted velocity per token, `[batch, tokens, patch_dim]`.
    pub velocity: Var,
    /// Post-softmax chunk-local attention weights, one per block, each
    /// `[batch*heads, video_tokens, chunk_text_tokens]`. Empty when the
    /// local pathway is disabled.
    pub local_weights: Vec<Var>,
    /// Tape variables of the parameters that were registered as trainable
    /// for this pass, keyed by parameter name.
    pub trainable: Vec<(String, Var)>,
}

struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    train: Trainability,
    bound: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    fn new(store: &'a ParamStore<T>, train: Trainability) -> Self {
        Binder {
            store,
            train,
            bound: HashMap::new(),
            trainable: Vec::new(),
        }
    }

    fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .store
            .entry(name)
            .ok_or_else(|| Error::State(format!("model has no parameter named {name}")))?;
        let trainable = match self.train {
            Trainability::All => true,
            Trainability::LocalOnly => entry.group == ParamGroup::Local,
            Trainability::Frozen => false,
        };
        let v = if trainable {
            let t = entry.tensor.clone().requires_grad(true);
            let v = tape.leaf(&t);
            self.trainable.push((name.to_string(), v));
            v
        } else {
            tape.constant(entry.tensor.shape(), entry.tensor.data().to_vec())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    init_seed: u64,
    basis: FrequencyBasis,
    video_cos: Vec<T>,
    video_sin: Vec<T>,
    chunk_cos: Vec<T>,
    chunk_sin: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed);
        let basis = FrequencyBasis::new(config.head_dim(), config.theta_base)?;
        let (tf, tr, tc) = config.token_grid();
        let vgrid = video_grid(tf, tr, tc);
        let (video_cos, video_sin) = basis.phase_tables::<T>(&vgrid);
        let kgrid = text_chunk_grid(
            config.chunks(),
            config.local_len,
            config.chunk_coord_mode,
            config.frames_per_chunk,
        );
        let (chunk_cos, chunk_sin) = basis.phase_tables::<T>(&kgrid);
        Ok(Model {
            config,
            params,
            init_seed: seed,
            basis,
            video_cos,
            video_sin,
            chunk_cos,
            chunk_sin,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Persist all parameters plus the config as checkpoint metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, &BTreeMap::new())
    }

    /// Like [`Model::save`] with extra metadata entries (for example the run
    /// configuration hash). Reserved keys win over `extra`.
    pub fn save_with_meta(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let named: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|e| (e.name.clone(), &e.tensor))
            .collect();
        let mut meta = extra.clone();
        meta.insert("kind".to_string(), "model".to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("init_seed".to_string(), self.init_seed.to_string());
        save_checkpoint(path, &named, &meta)
    }

    /// Rebuild a model from a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let data = load_checkpoint::<T>(path)?;
        let config_json = data
            .meta
            .get("config")
            .ok_or_else(|| Error::State("checkpoint metadata lacks a model config".into()))?;
        let config: ModelConfig = serde_json::from_str(config_json)?;
        let seed: u64 = data
            .meta
            .get("init_seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let mut model = Model::new(config, seed)?;
        model.params.load_from(&data)?;
        Ok(model)
    }

    fn maybe_phases<'a>(&'a self, cos: &'a [T], sin: &'a [T]) -> Option<(&'a [T], &'a [T])> {
        if self.config.disable_rope_phases {
            None
        } else {
            Some((cos, sin))
        }
    }

    fn gains(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        prefix: &str,
    ) -> Result<Option<(Var, Var)>> {
        if !self.config.qk_norm {
            return Ok(None);
        }
        let q = binder.var(tape, &format!("{prefix}.qgain"))?;
        let k = binder.var(tape, &format!("{prefix}.kgain"))?;
        Ok(Some((q, k)))
    }

    fn linear(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
        w: &str,
        b: Option<&str>,
    ) -> Result<Var> {
        let wv = binder.var(tape, w)?;
        let mut out = tape.matmul(x, wv)?;
        if let Some(b) = b {
            let bv = binder.var(tape, b)?;
            out = tape.add_rows(out, bv)?;
        }
        Ok(out)
    }

    /// Run token id sequences through the shared text encoder. `ids` holds
    /// one fixed-length sequence per row; `masks` marks live positions.
    /// Returns `[rows, len, dim]` features after the final norm.
    fn encode_rows(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        ids: &[Vec<usize>],
        masks: &[Vec<bool>],
    ) -> Result<Var> {
        let rows = ids.len();
        let len = ids.first().map(Vec::len).ok_or_else(|| {
            Error::Contract("text encoder needs at least one sequence".into())
        })?;
        if ids.iter().any(|s| s.len() != len) || masks.len() != rows {
            return Err(Error::Contract("ragged text encoder input".into()));
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let table = binder.var(tape, "embed.word")?;
        let emb = tape.gather(table, &flat, Some(PAD_ID))?;
        let mut x = tape.reshape(emb, &[rows, len, self.config.dim])?;

        let grid = text_chunk_grid(1, len, ChunkCoordMode::Raw, 1);
        let (cos, sin) = self.basis.phase_tables::<T>(&grid);
        let key_bias = key_padding_bias(tape, masks, self.config.heads)?;
        for j in 0..self.config.text_blocks {
            let p = format!("text.b{j}");
            let n1 = binder.var(tape, &format!("{p}.norm1.gain"))?;
            let xn = tape.rms_norm(x, n1)?;
            let q = self.linear(tape, binder, xn, &format!("{p}.attn.wq"), None)?;
            let k = self.linear(tape, binder, xn, &format!("{p}.attn.wk"), None)?;
            let v = self.linear(tape, binder, xn, &format!("{p}.attn.wv"), None)?;
            let gains = self.gains(tape, binder, &format!("{p}.attn"))?;
            let spec = AttendSpec {
                heads: self.config.heads,
                q_phases: self.maybe_phases(&cos, &sin),
                k_phases: self.maybe_phases(&cos, &sin),
                key_bias: Some(key_bias),
                pair_bias: None,
            };
            let att = attend(tape, q, k, v, gains, &spec)?;
            let o = self.linear(tape, binder, att.out, &format!("{p}.attn.wo"), None)?;
            x = tape.add(x, o)?;

            let n2 = binder.var(tape, &format!("{p}.norm2.gain"))?;
            let xn = tape.rms_norm(x, n2)?;
            let h = self.linear(tape, binder, xn, &format!("{p}.mlp.w1"), Some(&format!("{p}.mlp.b1")))?;
            let h = tape.silu(h)?;
            let h = self.linear(tape, binder, h, &format!("{p}.mlp.w2"), Some(&format!("{p}.mlp.b2")))?;
            x = tape.add(x, h)?;
        }
        let fg = binder.var(tape, "text.final_norm.gain")?;
        tape.rms_norm(x, fg)
    }

    /// Public text-encoder entry point, mainly for tests and probes.
    pub fn encode_text(
        &self,
        tape: &mut Tape<T>,
        ids: &[Vec<usize>],
        masks: &[Vec<bool>],
        train: Trainability,
    ) -> Result<Var> {
        let mut binder = Binder::new(&self.params, train);
        self.encode_rows(tape, &mut binder, ids, masks)
    }

    /// Sinusoidal timestep features, `[batch, dim]`, built as constants.
    fn time_features(&self, tape: &mut Tape<T>, t: &[f64]) -> Result<Var> {
        let d = self.config.dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(t.len() * d);
        for &tv in t {
            if !tv.is_finite() {
                return Err(Error::Input(format!("non-finite timestep {tv}")));
            }
            let scaled = tv * 1000.0;
            for i in 0..half {
                let freq = self.config.theta_base.powf(-(i as f64) / half as f64);
                data.push(T::from_f64((scaled * freq).sin()));
            }
            for i in 0..half {
                let freq = self.config.theta_base.powf(-(i as f64) / half as f64);
                data.push(T::from_f64((scaled * freq).cos()));
            }
        }
        Ok(tape.constant(&[t.len(), d], data))
    }

    /// Masked mean over live token positions: `feats [b, l, d]` and per-row
    /// masks produce `[b, d]`.
    fn masked_mean(
        &self,
        tape: &mut Tape<T>,
        feats: Var,
        masks: &[Vec<bool>],
    ) -> Result<Var> {
        let shape = tape.shape(feats).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let mut w = Vec::with_capacity(b * l);
        for mask in masks {
            let live = mask.iter().filter(|&&m| m).count();
            if live == 0 {
                return Err(Error::Contract("cannot pool a fully masked caption".into()));
            }
            let inv = T::from_f64(1.0 / live as f64);
            w.extend(mask.iter().map(|&m| if m { inv } else { T::zero() }));
        }
        let weights = tape.constant(&[b, 1, l], w);
        let pooled = tape.matmul(weights, feats)?;
        tape.reshape(pooled, &[b, d])
    }

    /// Predict per-token velocity for a batch of noisy token tensors.
    ///
    /// * `tokens` — `[batch, tokens, patch_dim]` noisy input.
    /// * `t` — one diffusion time per batch item.
    /// * `cond` — one conditioning bundle per batch item (its positive
    ///   halves are used; negative-prompt branches are separate passes).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &Tensor<T>,
        t: &[f64],
        cond: &[ConditioningBundle],
        train: Trainability,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let np = cfg.num_tokens();
        let pd = cfg.patch_dim();
        let b = tokens.shape().first().copied().unwrap_or(0);
        if tokens.shape() != [b, np, pd] || b == 0 {
            return Err(Error::Dimension {
                op: "forward",
                msg: format!(
                    "token tensor {:?} does not match [batch, {np}, {pd}]",
                    tokens.shape()
                ),
            });
        }
        if t.len() != b || cond.len() != b {
            return Err(Error::Contract(format!(
                "batch of {b} videos needs {b} timesteps and bundles, got {} and {}",
                t.len(),
                cond.len()
            )));
        }
        for bundle in cond {
            bundle.validate(cfg.chunks(), cfg.global_len, cfg.local_len)?;
        }

        let mut binder = Binder::new(&self.params, train);
        let d = cfg.dim;

        // Text encodings: global caption rows, then all local chunk rows.
        let global_ids: Vec<Vec<usize>> = cond.iter().map(|c| c.global_ids.clone()).collect();
        let global_masks: Vec<Vec<bool>> = cond.iter().map(|c| c.global_mask.clone()).collect();
        let global_feats = self.encode_rows(tape, &mut binder, &global_ids, &global_masks)?;
        let pooled = self.masked_mean(tape, global_feats, &global_masks)?;

        let local_feats = if cfg.local_pathway {
            let mut rows = Vec::with_capacity(b * cfg.chunks());
            let mut row_masks = Vec::with_capacity(b * cfg.chunks());
            for c in cond {
                for (ids, mask) in c.local_ids.iter().zip(&c.local_masks) {
                    rows.push(ids.clone());
                    row_masks.push(mask.clone());
                }
            }
            let feats = self.encode_rows(tape, &mut binder, &rows, &row_masks)?;
            let adapted = self.linear(tape, &mut binder, feats, "local_adapter.w", Some("local_adapter.b"))?;
            Some(tape.reshape(adapted, &[b, cfg.chunks() * cfg.local_len, d])?)
        } else {
            None
        };
        let local_masks: Vec<Vec<bool>> = cond
            .iter()
            .map(|c| c.local_masks.iter().flatten().copied().collect())
            .collect();

        // Conditioning vector: timestep features through an MLP, plus the
        // pooled caption; one SiLU then zero-initialized per-block linears.
        let tf = self.time_features(tape, t)?;
        let th = self.linear(tape, &mut binder, tf, "time.mlp.w1", Some("time.mlp.b1"))?;
        let th = tape.silu(th)?;
        let temb = self.linear(tape, &mut binder, th, "time.mlp.w2", Some("time.mlp.b2"))?;
        let c_vec = tape.add(temb, pooled)?;
        let c_act = tape.silu(c_vec)?;

        // Patch tokens into the residual stream.
        let tok = tape.leaf(tokens);
        let mut x = self.linear(tape, &mut binder, tok, "patch.proj.w", Some("patch.proj.b"))?;

        let ones_d = tape.constant(&[d], vec![T::one(); d]);
        let one = T::one();
        let global_bias = key_padding_bias(tape, &global_masks, cfg.heads)?;
        let local_bias = if cfg.local_pathway {
            Some(key_padding_bias(tape, &local_masks, cfg.heads)?)
        } else {
            None
        };
        let hard_bias = if cfg.local_pathway && cfg.hard_chunk_mask {
            Some(same_chunk_pair_bias(
                tape,
                &cfg.video_token_chunks(),
                &cfg.text_token_chunks(),
                b,
                cfg.heads,
            )?)
        } else {
            None
        };

        let mut local_weights = Vec::new();
        for i in 0..cfg.blocks {
            let p = format!("block{i}");
            let m = self.linear(tape, &mut binder, c_act, &format!("{p}.mod.w"), Some(&format!("{p}.mod.b")))?;
            let shift1 = tape.slice(m, 1, 0, d)?;
            let scale1 = tape.slice(m, 1, d, d)?;
            let gate1 = tape.slice(m, 1, 2 * d, d)?;
            let shift2 = tape.slice(m, 1, 3 * d, d)?;
            let scale2 = tape.slice(m, 1, 4 * d, d)?;
            let gate2 = tape.slice(m, 1, 5 * d, d)?;

            // 1. modulated self-attention over video tokens
            let xn = tape.layer_norm(x, ones_d)?;
            let s1p = tape.add_scalar(scale1, one)?;
            let xm = tape.mul_axis1(xn, s1p)?;
            let xm = tape.add_axis1(xm, shift1)?;
            let q = self.linear(tape, &mut binder, xm, &format!("{p}.self.wq"), None)?;
            let k = self.linear(tape, &mut binder, xm, &format!("{p}.self.wk"), None)?;
            let v = self.linear(tape, &mut binder, xm, &format!("{p}.self.wv"), None)?;
            let gains = self.gains(tape, &mut binder, &format!("{p}.self"))?;
            let spec = AttendSpec {
                heads: cfg.heads,
                q_phases: self.maybe_phases(&self.video_cos, &self.video_sin),
                k_phases: self.maybe_phases(&self.video_cos, &self.video_sin),
                key_bias: None,
                pair_bias: None,
            };
            let att = attend(tape, q, k, v, gains, &spec)?;
            let o = self.linear(tape, &mut binder, att.out, &format!("{p}.self.wo"), None)?;
            let og = tape.mul_axis1(o, gate1)?;
            x = tape.add(x, og)?;

            // 2. cross-attention to the whole-video caption
            let ng = binder.var(tape, &format!("{p}.cross.norm.gain"))?;
            let xn = tape.rms_norm(x, ng)?;
            let q = self.linear(tape, &mut binder, xn, &format!("{p}.cross.wq"), None)?;
            let k = self.linear(tape, &mut binder, global_feats, &format!("{p}.cross.wk"), None)?;
            let v = self.linear(tape, &mut binder, global_feats, &format!("{p}.cross.wv"), None)?;
            let gains = self.gains(tape, &mut binder, &format!("{p}.cross"))?;
            let spec = AttendSpec {
                heads: cfg.heads,
                q_phases: None,
                k_phases: None,
                key_bias: Some(global_bias),
                pair_bias: None,
            };
            let att = attend(tape, q, k, v, gains, &spec)?;
            let o = self.linear(tape, &mut binder, att.out, &format!("{p}.cross.wo"), None)?;
            x = tape.add(x, o)?;

            // 3. chunk-local cross-attention, per-channel zero-initialized gate
            if let Some(lf) = local_feats {
                let ng = binder.var(tape, &format!("{p}.local.norm.gain"))?;
                let xn = tape.rms_norm(x, ng)?;
                let q = self.linear(tape, &mut binder, xn, &format!("{p}.local.wq"), None)?;
                let k = self.linear(tape, &mut binder, lf, &format!("{p}.local.wk"), None)?;
                let v = self.linear(tape, &mut binder, lf, &format!("{p}.local.wv"), None)?;
                let gains = self.gains(tape, &mut binder, &format!("{p}.local"))?;
                let spec = AttendSpec {
                    heads: cfg.heads,
                    q_phases: self.maybe_phases(&self.video_cos, &self.video_sin),
                    k_phases: self.maybe_phases(&self.chunk_cos, &self.chunk_sin),
                    key_bias: local_bias,
                    pair_bias: hard_bias,
                };
                let att = attend(tape, q, k, v, gains, &spec)?;
                let o = self.linear(tape, &mut binder, att.out, &format!("{p}.local.wo"), None)?;
                let gate = binder.var(tape, &format!("{p}.local.gate"))?;
                let og = tape.mul_rows(o, gate)?;
                x = tape.add(x, og)?;
                local_weights.push(att.weights);
            }

            // 4. modulated MLP
            let xn = tape.layer_norm(x, ones_d)?;
            let s2p = tape.add_scalar(scale2, one)?;
            let xm = tape.mul_axis1(xn, s2p)?;
            let xm = tape.add_axis1(xm, shift2)?;
            let h = self.linear(tape, &mut binder, xm, &format!("{p}.mlp.w1"), Some(&format!("{p}.mlp.b1")))?;
            let h = tape.silu(h)?;
            let h = self.linear(tape, &mut binder, h, &format!("{p}.mlp.w2"), Some(&format!("{p}.mlp.b2")))?;
            let hg = tape.mul_axis1(h, gate2)?;
            x = tape.add(x, hg)?;
        }

        // Final modulated norm and projection back to patch space.
        let xn = tape.layer_norm(x, ones_d)?;
        let fm = self.linear(tape, &mut binder, c_act, "final.mod.w", Some("final.mod.b"))?;
        let fshift = tape.slice(fm, 1, 0, d)?;
        let fscale = tape.slice(fm, 1, d, d)?;
        let fsp = tape.add_scalar(fscale, one)?;
        let xm = tape.mul_axis1(xn, fsp)?;
        let xm = tape.add_axis1(xm, fshift)?;
        let velocity = self.linear(tape, &mut binder, xm, "final.proj.w", Some("final.proj.b"))?;

        Ok(ForwardOut {
            velocity,
            local_weights,
            trainable: binder.trainable,
        })
    }
}
