//! Guided generation: Euler integration of the learned velocity field from
//! unit Gaussian noise at diffusion time 1 down to a clean state at time 0.
//!
//! Each step blends two velocity branches. The positive branch sees the real
//! prompt bundle; the negative branch sees a fixed "nothing moves" global
//! prompt plus either the bundle's counterfactual chunk captions or blank
//! ones. With branch weight `w` the blend is
//!
//! ```text
//! v = (1 + w) · v_pos − w · v_neg
//! ```
//!
//! so `w = 0` falls back to plain conditional sampling and larger `w` pushes
//! generations toward the captions and away from the negatives. The knob
//! exposed to users is a guidance scale `g` mapped as `w = g − 1` (or `w = g`
//! when `w_is_scale` is set, for the convention where the scale multiplies
//! the difference directly).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::model::{Model, Trainability};
use crate::stream_rng;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::text::Vocab;
use crate::training::{shift_timestep, tokens_to_video};
use crate::video::VideoTensor;

/// Global prompt fed to the negative guidance branch: it names the failure
/// mode sampling should steer away from (a frozen, motionless scene) using
/// only in-vocabulary words. Run configs may override or disable it.
pub const NEGATIVE_GLOBAL_PROMPT: &str = "still motionless no moving stays at rest never moves";

/// How the negative branch's chunk captions are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Use the bundle's counterfactual chunk captions. Requires the bundle to
    /// carry them; their absence is a configuration error.
    Counterfactual,
    /// Replace every chunk caption with an all-blank sequence (ablation mode;
    /// needs no counterfactuals).
    BlankLocal,
}

/// Everything that controls one guided sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance scale `g`. Maps to the branch weight as `w = g − 1`, or
    /// `w = g` when [`w_is_scale`](Self::w_is_scale) is set.
    pub guidance: f64,
    /// Number of Euler steps from time 1 down to 0.
    pub steps: usize,
    /// Seed for the initial Gaussian state.
    pub seed: u64,
    /// Negative-branch construction mode.
    pub negative_mode: NegativeMode,
    /// Warp strength of the descending time grid; must match training for
    /// the velocity field to be queried where it was fit.
    pub shift: f64,
    /// Interpret `guidance` directly as the branch weight `w` instead of
    /// mapping it through `w = g − 1`.
    pub w_is_scale: bool,
    /// Global prompt for the negative branch. `None` keeps the bundle's own
    /// global caption on both branches.
    pub negative_global: Option<String>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            guidance: 6.0,
            steps: 50,
            seed: 0,
            negative_mode: NegativeMode::Counterfactual,
            shift: 8.0,
            w_is_scale: false,
            negative_global: Some(NEGATIVE_GLOBAL_PROMPT.to_string()),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config(format!(
                "guidance scale must be finite, got {}",
                self.guidance
            )));
        }
        if self.w_is_scale {
            if self.guidance < 0.0 {
                return Err(Error::Config(format!(
                    "with w_is_scale the guidance value is the branch weight itself \
                     and must be ≥ 0, got {}",
                    self.guidance
                )));
            }
        } else if self.guidance < 1.0 {
            return Err(Error::Config(format!(
                "guidance scale must be ≥ 1 (1 disables guidance), got {}",
                self.guidance
            )));
        }
        if !(self.shift.is_finite() && self.shift >= 1.0) {
            return Err(Error::Config(format!(
                "schedule shift must be a finite value ≥ 1, got {}",
                self.shift
            )));
        }
        Ok(())
    }

    /// The negative-branch weight `w` implied by the config.
    pub fn branch_weight(&self) -> f64 {
        if self.w_is_scale {
            self.guidance
        } else {
            self.guidance - 1.0
        }
    }
}

/// A conditional velocity field `v(x, t, prompts)`. The trained denoiser is
/// the real implementation; tests drive the sampler with analytic stubs.
pub trait VelocityField<T: Scalar> {
    /// `(tokens, features_per_token)` of the state this field operates on.
    fn token_shape(&self) -> (usize, usize);
    /// Velocity for one trajectory. `x` has shape `[tokens, features]`.
    fn velocity(&self, x: &Tensor<T>, t: f64, cond: &ConditioningBundle) -> Result<Tensor<T>>;
}

/// The trained denoiser viewed as a [`VelocityField`] (frozen parameters,
/// batch of one).
pub struct ModelVelocity<'a, T: Scalar> {
    model: &'a Model<T>,
}

impl<'a, T: Scalar> ModelVelocity<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        ModelVelocity { model }
    }
}

impl<T: Scalar> VelocityField<T> for ModelVelocity<'_, T> {
    fn token_shape(&self) -> (usize, usize) {
        let cfg = self.model.config();
        (cfg.num_tokens(), cfg.patch_dim())
    }

    fn velocity(&self, x: &Tensor<T>, t: f64, cond: &ConditioningBundle) -> Result<Tensor<T>> {
        let (np, pd) = self.token_shape();
        let batched = Tensor::new(vec![1, np, pd], x.data().to_vec())?;
        let mut tape = Tape::new();
        let out = self
            .model
            .forward(&mut tape, &batched, &[t], &[cond.clone()], Trainability::Frozen)?;
        Tensor::new(vec![np, pd], tape.value(out.velocity).to_vec())
    }
}

/// Build the conditioning seen by the negative branch: chunk captions from
/// the configured mode, global caption optionally replaced by the fixed
/// negative prompt.
pub fn negative_conditioning(
    bundle: &ConditioningBundle,
    cfg: &GuidanceConfig,
    vocab: &Vocab,
) -> Result<ConditioningBundle> {
    let mut neg = match cfg.negative_mode {
        NegativeMode::Counterfactual => {
            if !bundle.has_negatives() {
                return Err(Error::Config(
                    "counterfactual guidance needs counterfactual chunk captions in the \
                     bundle; annotate with counterfactuals or use the blank_local mode"
                        .into(),
                ));
            }
            bundle.negative_half()?
        }
        NegativeMode::BlankLocal => bundle.blank_local_half(vocab),
    };
    if let Some(prompt) = &cfg.negative_global {
        let (ids, mask) = vocab.encode(prompt, bundle.global_ids.len());
        neg.global_ids = ids;
        neg.global_mask = mask;
    }
    Ok(neg)
}

/// The two-branch blend `(1 + w)·v_pos − w·v_neg` at a given raw weight.
/// Exposed separately so the algebraic symmetries of the blend can be checked
/// without going through config validation.
pub fn blend_branches<T: Scalar>(v_pos: &Tensor<T>, v_neg: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if v_pos.shape() != v_neg.shape() {
        return Err(Error::ShapeMismatch {
            op: "blend_branches",
            lhs: v_pos.shape().to_vec(),
            rhs: v_neg.shape().to_vec(),
        });
    }
    let data = v_pos
        .data()
        .iter()
        .zip(v_neg.data())
        .map(|(p, n)| T::from_f64((1.0 + w) * p.as_f64() - w * n.as_f64()))
        .collect();
    Tensor::new(v_pos.shape().to_vec(), data)
}

/// Guided velocity at one state and time. With `w = 0` the negative branch
/// is never evaluated and the positive branch's output is returned untouched.
pub fn guided_velocity<T: Scalar, F: VelocityField<T>>(
    field: &F,
    x: &Tensor<T>,
    t: f64,
    bundle: &ConditioningBundle,
    cfg: &GuidanceConfig,
    vocab: &Vocab,
) -> Result<Tensor<T>> {
    let w = cfg.branch_weight();
    let positive = bundle.positive_half();
    let v_pos = field.velocity(x, t, &positive)?;
    if w == 0.0 {
        return Ok(v_pos);
    }
    let negative = negative_conditioning(bundle, cfg, vocab)?;
    let v_neg = field.velocity(x, t, &negative)?;
    blend_branches(&v_pos, &v_neg, w)
}

/// Descending diffusion-time grid: `steps + 1` values running from exactly 1
/// down to exactly 0, each interior point warped through the shifted schedule
/// so step sizes match the timestep distribution used in training.
pub fn time_grid(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("time grid needs at least one step".into()));
    }
    (0..=steps)
        .rev()
        .map(|k| shift_timestep(k as f64 / steps as f64, shift))
        .collect()
}

/// Output of one sampling run: the final token state, kept unclipped so
/// downstream metrics see the raw values; clipping to pixel range happens
/// only when exporting to 8-bit formats.
#[derive(Debug, Clone)]
pub struct SampleRun<T: Scalar> {
    /// Final state, shape `[tokens, features]`, in the `[-1, 1]`-centred
    /// token scale the denoiser trained in.
    pub tokens: Tensor<T>,
    /// The time grid that was integrated over (descending, `steps + 1` long).
    pub times: Vec<f64>,
}

/// Run guided Euler sampling: draw the initial state from a seeded unit
/// Gaussian, then for each consecutive grid pair `(t, t_next)` apply
/// `x ← x − (t − t_next) · guided_velocity(x, t)`.
pub fn sample<T: Scalar, F: VelocityField<T>>(
    field: &F,
    bundle: &ConditioningBundle,
    cfg: &GuidanceConfig,
    vocab: &Vocab,
) -> Result<SampleRun<T>> {
    cfg.validate()?;
    let (np, pd) = field.token_shape();
    let mut rng = stream_rng(cfg.seed, 0);
    let mut x = Tensor::<T>::randn(&[np, pd], 1.0, &mut rng);
    let times = time_grid(cfg.steps, cfg.shift)?;
    for (i, pair) in times.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let dt = t - t_next;
        let v = guided_velocity(field, &x, t, bundle, cfg, vocab)?;
        if v.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "sample",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        for (xv, vv) in x.data_mut().iter_mut().zip(v.data()) {
            *xv = T::from_f64(xv.as_f64() - dt * vv.as_f64());
        }
        if x.data().iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NumericalAbort {
                step: i + 1,
                msg: format!("non-finite sample state after the update at t = {t:.6}"),
            });
        }
    }
    Ok(SampleRun { tokens: x, times })
}

/// Decode a finished run back to pixel space using the model geometry the
/// tokens were produced for. Values outside `[0, 1]` are preserved.
pub fn decode_tokens<T: Scalar>(
    tokens: &Tensor<T>,
    config: &crate::model::ModelConfig,
) -> Result<VideoTensor> {
    tokens_to_video(
        tokens.data(),
        config.frames,
        config.channels,
        config.height,
        config.width,
        config.patch_t,
        config.patch_hw,
    )
}

/// Provenance record written next to every exported sample: enough to re-run
/// the exact generation and to detect mixing outputs of different runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingManifest {
    /// Seed of the initial Gaussian state (duplicated from the config for
    /// quick scanning).
    pub seed: u64,
    /// The full guidance configuration of the run.
    pub guidance: GuidanceConfig,
    /// Hash of the run configuration file, when one was in play.
    pub config_hash: Option<String>,
    /// Hash of the checkpoint the velocity field was loaded from.
    pub checkpoint_hash: Option<String>,
    /// The complete prompt bundle, counterfactuals included.
    pub bundle: ConditioningBundle,
}

impl SamplingManifest {
    pub fn new(cfg: &GuidanceConfig, bundle: &ConditioningBundle) -> Self {
        SamplingManifest {
            seed: cfg.seed,
            guidance: cfg.clone(),
            config_hash: None,
            checkpoint_hash: None,
            bundle: bundle.clone(),
        }
    }

    pub fn with_hashes(
        mut self,
        config_hash: Option<String>,
        checkpoint_hash: Option<String>,
    ) -> Self {
        self.config_hash = config_hash;
        self.checkpoint_hash = checkpoint_hash;
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Paths produced by [`export_sample`].
#[derive(Debug, Clone)]
pub struct SampleArtifacts {
    pub raw: PathBuf,
    pub strip: PathBuf,
    pub gif: PathBuf,
    pub manifest: PathBuf,
}

/// Write one decoded sample in every inspection format: the lossless raw
/// container, an 8-bit PNG frame strip, an animated GIF, and the manifest.
/// 8-bit formats clip to pixel range; the raw file keeps values as-is.
pub fn export_sample(
    dir: &Path,
    stem: &str,
    video: &VideoTensor,
    manifest: &SamplingManifest,
) -> Result<SampleArtifacts> {
    std::fs::create_dir_all(dir)?;
    let raw = dir.join(format!("{stem}.pvid"));
    let strip = dir.join(format!("{stem}.png"));
    let gif = dir.join(format!("{stem}.gif"));
    let manifest_path = dir.join(format!("{stem}.json"));
    video.save_raw(&raw)?;
    video.save_png_strip(&strip)?;
    video.save_gif(&gif, 10)?;
    manifest.save(&manifest_path)?;
    Ok(SampleArtifacts {
        raw,
        strip,
        gif,
        manifest: manifest_path,
    })
}

/// Convenience map for digest-keyed grouping of sample outputs (used by the
/// evaluator to refuse mixing incompatible runs).
pub fn manifests_by_checkpoint(
    manifests: &[SamplingManifest],
) -> BTreeMap<Option<String>, usize> {
    let mut counts = BTreeMap::new();
    for m in manifests {
        *counts.entry(m.checkpoint_hash.clone()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    use crate::model::{ModelConfig, ParamGroup};
    use crate::text::Vocab;

    fn vocab() -> Vocab {
        Vocab::standard()
    }

    /// A bundle with distinct positive and counterfactual chunk captions.
    fn sized_bundle(chunks: usize, with_negatives: bool, len: usize) -> ConditioningBundle {
        let v = vocab();
        let locals: Vec<String> = (0..chunks)
            .map(|c| format!("the ball falls speeding up in part {}", c + 1))
            .collect();
        let negatives: Vec<String> = (0..chunks)
            .map(|_| "the ball rises slowing down".to_string())
            .collect();
        ConditioningBundle::from_captions(
            &v,
            "a red ball bounces on the floor",
            &locals,
            with_negatives.then_some(negatives.as_slice()),
            len,
            len,
        )
        .unwrap()
    }

    fn test_bundle(chunks: usize, with_negatives: bool) -> ConditioningBundle {
        sized_bundle(chunks, with_negatives, 16)
    }

    /// Velocity stub that returns a fixed tensor per branch, deciding which
    /// branch it is on by comparing chunk captions with the positive half.
    /// Counts negative-branch evaluations so tests can assert the skip.
    struct BranchStub {
        shape: (usize, usize),
        positive_locals: Vec<Vec<usize>>,
        pos: Vec<f64>,
        neg: Vec<f64>,
        neg_calls: Cell<usize>,
    }

    impl BranchStub {
        fn new(shape: (usize, usize), reference: &ConditioningBundle, pos: f64, neg: f64) -> Self {
            let n = shape.0 * shape.1;
            BranchStub {
                shape,
                positive_locals: reference.local_ids.clone(),
                pos: vec![pos; n],
                neg: vec![neg; n],
                neg_calls: Cell::new(0),
            }
        }
    }

    impl VelocityField<f64> for BranchStub {
        fn token_shape(&self) -> (usize, usize) {
            self.shape
        }

        fn velocity(
            &self,
            _x: &Tensor<f64>,
            _t: f64,
            cond: &ConditioningBundle,
        ) -> Result<Tensor<f64>> {
            let values = if cond.local_ids == self.positive_locals {
                self.pos.clone()
            } else {
                self.neg_calls.set(self.neg_calls.get() + 1);
                self.neg.clone()
            };
            Tensor::new(vec![self.shape.0, self.shape.1], values)
        }
    }

    /// Velocity stub `v(x) = rate · x`, the linear ODE with a known solution.
    struct LinearStub {
        shape: (usize, usize),
        rate: f64,
    }

    impl VelocityField<f64> for LinearStub {
        fn token_shape(&self) -> (usize, usize) {
            self.shape
        }

        fn velocity(
            &self,
            x: &Tensor<f64>,
            _t: f64,
            _cond: &ConditioningBundle,
        ) -> Result<Tensor<f64>> {
            let data = x.data().iter().map(|v| self.rate * v).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }

    /// Constant-velocity stub for hand-checkable single steps.
    struct ConstStub {
        shape: (usize, usize),
        value: Vec<f64>,
    }

    impl VelocityField<f64> for ConstStub {
        fn token_shape(&self) -> (usize, usize) {
            self.shape
        }

        fn velocity(
            &self,
            _x: &Tensor<f64>,
            _t: f64,
            _cond: &ConditioningBundle,
        ) -> Result<Tensor<f64>> {
            Tensor::new(vec![self.shape.0, self.shape.1], self.value.clone())
        }
    }

    /// Stub that goes non-finite from a chosen step onward: it returns a NaN
    /// velocity whenever the query time falls below a trigger.
    struct PoisonStub {
        shape: (usize, usize),
        trigger_below: f64,
    }

    impl VelocityField<f64> for PoisonStub {
        fn token_shape(&self) -> (usize, usize) {
            self.shape
        }

        fn velocity(
            &self,
            _x: &Tensor<f64>,
            t: f64,
            _cond: &ConditioningBundle,
        ) -> Result<Tensor<f64>> {
            let v = if t < self.trigger_below { f64::NAN } else { 0.0 };
            Tensor::new(
                vec![self.shape.0, self.shape.1],
                vec![v; self.shape.0 * self.shape.1],
            )
        }
    }

    fn plain_config(guidance: f64, steps: usize) -> GuidanceConfig {
        GuidanceConfig {
            guidance,
            steps,
            seed: 7,
            negative_mode: NegativeMode::Counterfactual,
            shift: 8.0,
            w_is_scale: false,
            negative_global: Some(NEGATIVE_GLOBAL_PROMPT.to_string()),
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(plain_config(6.0, 50).validate().is_ok());
        let e = plain_config(6.0, 0).validate().unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = plain_config(0.5, 10).validate().unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        // With w_is_scale the knob is the weight itself; 0.5 becomes legal
        // but negative weights stay out.
        let mut c = plain_config(0.5, 10);
        c.w_is_scale = true;
        assert!(c.validate().is_ok());
        c.guidance = -0.1;
        assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
        let mut c = plain_config(2.0, 10);
        c.shift = 0.5;
        assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn branch_weight_follows_the_scale_convention() {
        assert_eq!(plain_config(6.0, 1).branch_weight(), 5.0);
        assert_eq!(plain_config(1.0, 1).branch_weight(), 0.0);
        let mut c = plain_config(6.0, 1);
        c.w_is_scale = true;
        assert_eq!(c.branch_weight(), 6.0);
    }

    #[test]
    fn unit_guidance_returns_the_positive_branch_bit_for_bit() {
        let bundle = test_bundle(2, true);
        let stub = BranchStub::new((3, 4), &bundle, 1.25, -9.0);
        let cfg = plain_config(1.0, 5);
        let x = Tensor::<f64>::from_f64s(&[3, 4], &vec![0.5; 12]).unwrap();
        let guided = guided_velocity(&stub, &x, 0.7, &bundle, &cfg, &vocab()).unwrap();
        let direct = stub
            .velocity(&x, 0.7, &bundle.positive_half())
            .unwrap();
        assert_eq!(guided.data(), direct.data());
        assert_eq!(
            stub.neg_calls.get(),
            0,
            "w = 0 must skip the negative branch entirely"
        );
    }

    #[test]
    fn identical_halves_cancel_for_every_scale() {
        // Counterfactual captions identical to the positive ones, and no
        // negative-global override: both branches see the same conditioning,
        // so the blend must collapse to the positive branch for any g.
        let v = vocab();
        let locals = vec!["the ball falls speeding up".to_string(); 2];
        let bundle = ConditioningBundle::from_captions(
            &v,
            "a red ball drops",
            &locals,
            Some(&locals.clone()),
            16,
            16,
        )
        .unwrap();
        let stub = BranchStub::new((2, 3), &bundle, 0.37, 123.0);
        let x = Tensor::<f64>::from_f64s(&[2, 3], &[0.0; 6]).unwrap();
        for g in [1.0, 2.0, 6.0] {
            let mut cfg = plain_config(g, 5);
            cfg.negative_global = None;
            let guided = guided_velocity(&stub, &x, 0.4, &bundle, &cfg, &v).unwrap();
            for got in guided.data() {
                assert!(
                    (got - 0.37).abs() < 1e-9,
                    "g = {g}: expected cancellation to 0.37, got {got}"
                );
            }
        }
    }

    #[test]
    fn scale_six_blends_to_six_a_minus_five_b() {
        let bundle = test_bundle(2, true);
        let (a, b) = (0.8, -0.3);
        let stub = BranchStub::new((2, 2), &bundle, a, b);
        let cfg = plain_config(6.0, 5);
        let x = Tensor::<f64>::from_f64s(&[2, 2], &[0.0; 4]).unwrap();
        let guided = guided_velocity(&stub, &x, 0.9, &bundle, &cfg, &vocab()).unwrap();
        let expected = 6.0 * a - 5.0 * b;
        for got in guided.data() {
            assert!((got - expected).abs() < 1e-12);
        }
        assert_eq!(stub.neg_calls.get(), 1);

        // The alternative convention treats the knob as the weight itself.
        let mut cfg = plain_config(6.0, 5);
        cfg.w_is_scale = true;
        let guided = guided_velocity(&stub, &x, 0.9, &bundle, &cfg, &vocab()).unwrap();
        let expected = 7.0 * a - 6.0 * b;
        for got in guided.data() {
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn counterfactual_mode_without_negatives_is_a_config_error() {
        let bundle = test_bundle(2, false);
        let stub = BranchStub::new((2, 2), &bundle, 1.0, 0.0);
        let cfg = plain_config(6.0, 5);
        let x = Tensor::<f64>::from_f64s(&[2, 2], &[0.0; 4]).unwrap();
        let err = guided_velocity(&stub, &x, 0.5, &bundle, &cfg, &vocab()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        // Blank-local mode needs no counterfactuals.
        let mut cfg = plain_config(6.0, 5);
        cfg.negative_mode = NegativeMode::BlankLocal;
        assert!(guided_velocity(&stub, &x, 0.5, &bundle, &cfg, &vocab()).is_ok());
    }

    #[test]
    fn negative_branch_swaps_in_the_fixed_global_prompt() {
        let v = vocab();
        let bundle = test_bundle(2, true);
        let cfg = plain_config(6.0, 5);
        let neg = negative_conditioning(&bundle, &cfg, &v).unwrap();
        let (want_ids, want_mask) = v.encode(NEGATIVE_GLOBAL_PROMPT, bundle.global_ids.len());
        assert_eq!(neg.global_ids, want_ids);
        assert_eq!(neg.global_mask, want_mask);
        assert_ne!(neg.global_ids, bundle.global_ids);
        // Counterfactual captions become the negative branch's chunk captions.
        assert_eq!(
            Some(&neg.local_ids),
            bundle.negative_local_ids.as_ref(),
            "counterfactual captions must drive the negative branch"
        );
        // The fixed prompt is fully in-vocabulary: no unknown-word tokens.
        let blank = v.blank_prompt(want_ids.len());
        let live: Vec<usize> = want_ids
            .iter()
            .zip(&want_mask)
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect();
        assert!(!live.is_empty());
        assert!(
            live.iter().all(|id| *id != blank.0[0]),
            "negative prompt must not degrade to padding"
        );
    }

    #[test]
    fn blank_local_mode_blanks_chunk_captions_only() {
        let v = vocab();
        let bundle = test_bundle(3, false);
        let mut cfg = plain_config(6.0, 5);
        cfg.negative_mode = NegativeMode::BlankLocal;
        cfg.negative_global = None;
        let neg = negative_conditioning(&bundle, &cfg, &v).unwrap();
        assert_eq!(neg.global_ids, bundle.global_ids, "global caption kept");
        let (blank_ids, blank_mask) = v.blank_prompt(bundle.local_ids[0].len());
        for c in 0..3 {
            assert_eq!(neg.local_ids[c], blank_ids);
            assert_eq!(neg.local_masks[c], blank_mask);
        }
    }

    #[test]
    fn swapping_branches_mirrors_the_blend_weight() {
        // blend(pos, neg, w) == blend(neg, pos, −g) where w = g − 1: feeding
        // the branches in swapped order while negating the guidance scale
        // lands on the same velocity. (−g − 1 is the swapped raw weight.)
        let pos = Tensor::<f64>::from_f64s(&[2, 3], &[0.3, -1.2, 0.9, 2.0, -0.4, 0.05]).unwrap();
        let neg = Tensor::<f64>::from_f64s(&[2, 3], &[1.1, 0.6, -0.8, -0.2, 0.7, 1.4]).unwrap();
        for g in [1.0, 1.5, 6.0] {
            let w = g - 1.0;
            let forward = blend_branches(&pos, &neg, w).unwrap();
            let mirrored = blend_branches(&neg, &pos, -g).unwrap();
            for (a, b) in forward.data().iter().zip(mirrored.data()) {
                assert!((a - b).abs() < 1e-12, "g = {g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn time_grid_descends_from_one_to_zero() {
        for steps in [1, 5, 50] {
            let grid = time_grid(steps, 8.0).unwrap();
            assert_eq!(grid.len(), steps + 1);
            assert_eq!(grid[0], 1.0);
            assert_eq!(grid[steps], 0.0);
            for pair in grid.windows(2) {
                assert!(pair[0] > pair[1], "grid must strictly descend");
            }
        }
        // The warp concentrates grid points near t = 1: the first step (from
        // t = 1) is smaller than the last (into t = 0).
        let grid = time_grid(10, 8.0).unwrap();
        assert!(grid[0] - grid[1] < grid[9] - grid[10]);
        assert!(matches!(time_grid(0, 8.0), Err(Error::Config(_))));
    }

    #[test]
    fn single_step_sampling_is_one_euler_update() {
        let bundle = test_bundle(2, true);
        let value: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let stub = ConstStub {
            shape: (2, 3),
            value: value.clone(),
        };
        let cfg = plain_config(1.0, 1);
        let run = sample(&stub, &bundle, &cfg, &vocab()).unwrap();
        assert_eq!(run.times, vec![1.0, 0.0]);
        // Reconstruct the seeded initial state independently and apply the
        // hand formula x₀ = x₁ − 1·v.
        let mut rng = stream_rng(cfg.seed, 0);
        let x1 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        for ((got, x), v) in run.tokens.data().iter().zip(x1.data()).zip(&value) {
            assert_eq!(*got, x - v, "single Euler step must match hand algebra");
        }
    }

    #[test]
    fn same_seed_and_bundle_reproduce_identical_bytes() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::new(cfg.clone(), 11).unwrap();
        let field = ModelVelocity::new(&model);
        let bundle = sized_bundle(cfg.chunks(), true, cfg.global_len);
        let gcfg = plain_config(2.0, 3);
        let a = sample(&field, &bundle, &gcfg, &vocab()).unwrap();
        let b = sample(&field, &bundle, &gcfg, &vocab()).unwrap();
        assert_eq!(a.tokens.le_bytes(), b.tokens.le_bytes());

        let mut other_seed = gcfg.clone();
        other_seed.seed = 8;
        let c = sample(&field, &bundle, &other_seed, &vocab()).unwrap();
        assert_ne!(a.tokens.le_bytes(), c.tokens.le_bytes());
    }

    #[test]
    fn linear_field_matches_the_closed_form_discretization() {
        // For v(x) = x each Euler step multiplies the state by (1 − Δt), so
        // the final state is the initial one scaled by Π(1 − Δt_k). Verify
        // the integrator against that product computed directly from the
        // schedule, for both a plain and a warped grid.
        for shift in [1.0, 8.0] {
            let stub = LinearStub {
                shape: (2, 2),
                rate: 1.0,
            };
            let bundle = test_bundle(1, false);
            let mut cfg = plain_config(1.0, 25);
            cfg.shift = shift;
            let run = sample(&stub, &bundle, &cfg, &vocab()).unwrap();

            let grid = time_grid(cfg.steps, shift).unwrap();
            let factor: f64 = grid.windows(2).map(|p| 1.0 - (p[0] - p[1])).product();
            let mut rng = stream_rng(cfg.seed, 0);
            let x1 = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
            for (got, x) in run.tokens.data().iter().zip(x1.data()) {
                assert!(
                    (got - factor * x).abs() < 1e-6,
                    "shift {shift}: {got} vs {}",
                    factor * x
                );
            }
        }
    }

    #[test]
    fn more_steps_track_the_exact_flow_better() {
        // Exact solution of dx/dt = x integrated from t = 1 down to 0 is
        // x(0) = e^{−1}·x(1). Euler error must shrink monotonically in T.
        let bundle = test_bundle(1, false);
        let mut errors = Vec::new();
        for steps in [5, 10, 25, 50] {
            let stub = LinearStub {
                shape: (3, 3),
                rate: 1.0,
            };
            let cfg = plain_config(1.0, steps);
            let run = sample(&stub, &bundle, &cfg, &vocab()).unwrap();
            let mut rng = stream_rng(cfg.seed, 0);
            let x1 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
            let err = run
                .tokens
                .data()
                .iter()
                .zip(x1.data())
                .map(|(got, x)| (got - (-1.0f64).exp() * x).abs())
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        for pair in errors.windows(2) {
            assert!(
                pair[1] < pair[0],
                "error must decrease with more steps: {errors:?}"
            );
        }
    }

    #[test]
    fn unit_scale_trajectory_bit_equals_the_unguided_one() {
        // g = 1 (w = 0) must follow exactly the trajectory of a sampler that
        // only ever sees the positive branch — including never building the
        // negative conditioning (the bundle here has no counterfactuals, so
        // constructing it would error out).
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let field = ModelVelocity::new(&model);
        let bundle = sized_bundle(cfg.chunks(), false, cfg.global_len);
        let gcfg = plain_config(1.0, 4);
        let guided = sample(&field, &bundle, &gcfg, &vocab()).unwrap();

        // Reference: hand-rolled Euler on the positive branch only.
        let (np, pd) = field.token_shape();
        let mut rng = stream_rng(gcfg.seed, 0);
        let mut x = Tensor::<f32>::randn(&[np, pd], 1.0, &mut rng);
        let grid = time_grid(gcfg.steps, gcfg.shift).unwrap();
        let positive = bundle.positive_half();
        for pair in grid.windows(2) {
            let dt = pair[0] - pair[1];
            let v = field.velocity(&x, pair[0], &positive).unwrap();
            for (xv, vv) in x.data_mut().iter_mut().zip(v.data()) {
                *xv = (xv.as_f64() - dt * vv.as_f64()) as f32;
            }
        }
        assert_eq!(guided.tokens.le_bytes(), x.le_bytes());
    }

    #[test]
    fn nan_state_aborts_with_the_step_index() {
        // The grid for 4 steps at shift 8 is [1, 0.96, 0.889, 0.727, 0].
        // Poisoning every query below t = 0.9 makes step 3 (t ≈ 0.889) the
        // first non-finite update.
        let stub = PoisonStub {
            shape: (2, 2),
            trigger_below: 0.9,
        };
        let bundle = test_bundle(1, false);
        let cfg = plain_config(1.0, 4);
        let err = sample(&stub, &bundle, &cfg, &vocab()).unwrap_err();
        match err {
            Error::NumericalAbort { step, .. } => assert_eq!(step, 3),
            other => panic!("expected a numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn decoded_samples_roundtrip_through_token_scale() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::new(cfg.clone(), 5).unwrap();
        let field = ModelVelocity::new(&model);
        let bundle = sized_bundle(cfg.chunks(), false, cfg.global_len);
        let gcfg = plain_config(1.0, 2);
        let run = sample(&field, &bundle, &gcfg, &vocab()).unwrap();
        let video = decode_tokens(&run.tokens, &cfg).unwrap();
        assert_eq!(video.frames(), cfg.frames);
        assert_eq!(video.height(), cfg.height);
        assert_eq!(video.width(), cfg.width);
        // Decoding maps token scale [−1, 1] to pixel scale [0, 1]; re-encode
        // and compare to close the loop.
        let back = crate::training::video_to_tokens::<f32>(&video, cfg.patch_t, cfg.patch_hw)
            .unwrap();
        for (a, b) in back.data().iter().zip(run.tokens.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_roundtrips_and_records_the_run() {
        let bundle = test_bundle(2, true);
        let cfg = plain_config(6.0, 50);
        let manifest = SamplingManifest::new(&cfg, &bundle)
            .with_hashes(Some("cfg-hash".into()), Some("ckpt-hash".into()));
        assert_eq!(manifest.seed, cfg.seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.json");
        manifest.save(&path).unwrap();
        let loaded = SamplingManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.bundle.negative_local_ids, bundle.negative_local_ids);

        let counts = manifests_by_checkpoint(&[manifest.clone(), manifest.clone(), loaded]);
        assert_eq!(counts.get(&Some("ckpt-hash".to_string())), Some(&3));
    }

    #[test]
    fn export_writes_every_artifact() {
        let video = VideoTensor::zeros(2, 3, 8, 8).unwrap();
        let bundle = test_bundle(1, false);
        let cfg = plain_config(1.0, 1);
        let manifest = SamplingManifest::new(&cfg, &bundle);
        let dir = tempfile::tempdir().unwrap();
        let arts = export_sample(dir.path(), "clip", &video, &manifest).unwrap();
        for p in [&arts.raw, &arts.strip, &arts.gif, &arts.manifest] {
            assert!(p.exists(), "missing artifact {}", p.display());
        }
        let reloaded = VideoTensor::load_raw(&arts.raw).unwrap();
        assert_eq!(reloaded.data(), video.data());
    }

    #[test]
    fn model_field_reports_its_token_geometry() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let field = ModelVelocity::new(&model);
        assert_eq!(field.token_shape(), (cfg.num_tokens(), cfg.patch_dim()));
        // Local-pathway parameters exist; the frozen forward must still not
        // touch gradients — a smoke check that sampling works on a model
        // whose local group digest is intact afterwards.
        let digest_before = model.params().group_digest(ParamGroup::Local);
        let bundle = sized_bundle(cfg.chunks(), false, cfg.global_len);
        let x = Tensor::<f32>::zeros(&[cfg.num_tokens(), cfg.patch_dim()]);
        field.velocity(&x, 0.5, &bundle).unwrap();
        assert_eq!(model.params().group_digest(ParamGroup::Local), digest_before);
    }
}
