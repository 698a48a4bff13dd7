//! A desk-scale text-to-video stack built around one idea: caption a video
//! *per time chunk* and let the denoiser attend to those captions through a
//! rotary scheme that encodes which chunk each caption belongs to.
//!
//! Everything needed to exercise the idea ships in this crate:
//!
//! * [`tensor`] — a reverse-mode autodiff tape over plain `Vec` storage,
//!   generic over `f32`/`f64`, plus a byte-stable checkpoint format.
//! * [`rope`] — multi-axis rotary embeddings shared between video tokens
//!   (frame, row, column) and chunked text tokens (chunk, position).
//! * [`sim`] — a deterministic 2D bouncing-ball world that renders small RGB
//!   clips and knows the ground-truth dynamics it drew.
//! * [`annotate`] — per-chunk captioning through a pluggable chat-style
//!   vision-language endpoint, with a deterministic mock for offline runs.
//! * [`model`], [`training`], [`sampling`] — a small diffusion transformer
//!   trained with flow matching and sampled with dual-branch guidance that
//!   can push *away* from counterfactual chunk captions.
//! * [`eval`] — physics predicates scored on tracked centroids plus an
//!   attention-locality probe that measures whether chunk captions actually
//!   steer their own time span.
//!
//! The `examples/` directory is the front door: each example is a runnable
//! walkthrough of one capability. A thin `physvid` binary wraps the same
//! entry points for scripted use.

pub mod annotate;
pub mod attention;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod rope;
pub mod sampling;
pub mod sim;
pub mod tensor;
pub mod text;
pub mod training;
pub mod video;
pub mod vlm;

pub use error::{Error, Result};

/// Deterministic per-stream RNG: a master seed plus a stream index (clip id,
/// training step, guidance seed, ...) yields an independent generator without
/// any serialized RNG state. Used everywhere randomness must be replayable.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    rand_chacha::ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream)))
}
