//! Physical-plausibility scoring for small ball videos, plus the
//! chunk-attention locality probe.
//!
//! Scoring never looks at the generator: a color-threshold tracker extracts a
//! per-frame centroid, and a fixed set of physics predicates is checked on
//! that trajectory alone. Videos the tracker cannot follow score every
//! predicate *not applicable* — degraded inputs are reported, never crashed
//! on. The aggregate metric ("PC", physical commonsense) is the fraction of
//! (predicate, video) pairs that pass among those that apply.
//!
//! The locality probe runs the denoiser in a frozen forward pass and measures
//! how much of each video token's chunk-text attention lands on the caption
//! of its *own* time chunk; uniform attention scores exactly `1/chunks`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::same_chunk_mass;
use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::model::{Model, Trainability};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::video::VideoTensor;

// ---- tracking ----

/// Tracker and predicate tolerances. Every slack is stated here so predicate
/// outcomes are exactly reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// y of the floor line in pixels (y grows downward).
    pub floor: f64,
    /// A pixel belongs to the ball when its brightest channel exceeds this
    /// (background is 0.08, floor shade 0.25, disc colors ≥ 0.9).
    pub threshold: f32,
    /// Minimum accepted pixels for a frame to count as tracked.
    pub min_blob: usize,
    /// Maximum accepted fraction of the canvas; more means the frame is
    /// noise, not a disc.
    pub max_blob_frac: f64,
    /// Minimum per-frame displacement (px) that counts as motion.
    pub motion: f64,
    /// Descent may slow by at most this much (px/frame) between consecutive
    /// airborne steps before the gravity predicate fails.
    pub descent_slack: f64,
    /// The disc bottom may dip at most this far (px) below the floor line.
    pub floor_slack: f64,
    /// Center heights closer to the floor than this are "at the floor";
    /// higher ones are airborne. Covers the largest disc radius plus noise.
    pub airborne_clearance: f64,
    /// Horizontal turnarounds closer to a wall than this are wall bounces.
    pub wall_clearance: f64,
    /// Displacements at or below this (px/frame) count as rest.
    pub rest_eps: f64,
    /// Upward speed (px/frame) that counts as a launch when it appears after
    /// the ball has been resting at the floor.
    pub launch_speed: f64,
    /// A floor bounce may leave at most `incoming·(1+ratio) + extra` speed.
    pub bounce_ratio_slack: f64,
    pub bounce_extra_slack: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            floor: crate::sim::DEFAULT_FLOOR,
            threshold: 0.5,
            min_blob: 3,
            max_blob_frac: 0.25,
            motion: 0.15,
            descent_slack: 0.5,
            floor_slack: 1.0,
            airborne_clearance: 4.5,
            wall_clearance: 4.5,
            rest_eps: 0.05,
            launch_speed: 0.5,
            bounce_ratio_slack: 0.15,
            bounce_extra_slack: 0.3,
        }
    }
}

/// One tracked disc in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBlob {
    /// Intensity-weighted centroid, pixel coordinates.
    pub x: f64,
    pub y: f64,
    /// Radius estimate from the blob area.
    pub radius: f64,
    /// Accepted pixel count.
    pub area: usize,
}

/// Per-frame tracking result for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub frames: Vec<Option<TrackedBlob>>,
    pub width: usize,
    pub height: usize,
}

impl Track {
    pub fn tracked_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }
}

/// Find the brightest blob per frame by channel-max thresholding. Pixel
/// values are clamped to `[0, 1]` first so raw (unclipped) generations are
/// tracked the same way their exported form would be.
pub fn track_centroids(video: &VideoTensor, cfg: &TrackConfig) -> Track {
    let (h, w) = (video.height(), video.width());
    let max_area = (cfg.max_blob_frac * (h * w) as f64) as usize;
    let mut frames = Vec::with_capacity(video.frames());
    for f in 0..video.frames() {
        let mut sum_w = 0.0f64;
        let mut sum_x = 0.0f64;
        let mut sum_y = 0.0f64;
        let mut area = 0usize;
        for y in 0..h {
            for x in 0..w {
                let mut peak = 0.0f32;
                for c in 0..video.channels() {
                    peak = peak.max(video.get(f, c, y, x).clamp(0.0, 1.0));
                }
                if peak > cfg.threshold {
                    let weight = peak as f64;
                    sum_w += weight;
                    sum_x += weight * (x as f64 + 0.5);
                    sum_y += weight * (y as f64 + 0.5);
                    area += 1;
                }
            }
        }
        let blob = if area >= cfg.min_blob && area <= max_area {
            Some(TrackedBlob {
                x: sum_x / sum_w,
                y: sum_y / sum_w,
                radius: (area as f64 / std::f64::consts::PI).sqrt(),
                area,
            })
        } else {
            None
        };
        frames.push(blob);
    }
    Track {
        frames,
        width: w,
        height: h,
    }
}

// ---- predicates ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateId {
    DescendsAccelerating,
    BouncesAtFloor,
    NoFloorPenetration,
    MomentumDirectionConsistent,
}

impl PredicateId {
    pub const ALL: [PredicateId; 4] = [
        PredicateId::DescendsAccelerating,
        PredicateId::BouncesAtFloor,
        PredicateId::NoFloorPenetration,
        PredicateId::MomentumDirectionConsistent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredicateId::DescendsAccelerating => "descends_accelerating",
            PredicateId::BouncesAtFloor => "bounces_at_floor",
            PredicateId::NoFloorPenetration => "no_floor_penetration",
            PredicateId::MomentumDirectionConsistent => "momentum_direction_consistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateResult {
    pub id: PredicateId,
    /// Outcome over the whole clip.
    pub outcome: Outcome,
    /// Outcome restricted to each time chunk, when intervals were supplied.
    pub per_chunk: Vec<Outcome>,
    /// Human-readable reason for a failure, empty otherwise.
    pub detail: String,
}

/// Consecutive-frame displacement steps over the whole track, skipping any
/// pair interrupted by an untracked frame. Predicates build these globally
/// and then filter *events* to the frame range under evaluation, so chunk
/// boundaries never truncate the context around an event.
fn steps(track: &Track) -> Vec<(usize, f64, f64, f64, f64)> {
    // (index, x0, y0, dx, dy)
    let mut out = Vec::new();
    for i in 0..track.frames.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (&track.frames[i], &track.frames[i + 1]) {
            out.push((i, a.x, a.y, b.x - a.x, b.y - a.y));
        }
    }
    out
}

/// Does the step starting at frame `i` fall inside `[start, end)`?
fn in_range(i: usize, range: (usize, usize)) -> bool {
    i >= range.0 && i + 1 < range.1
}

fn airborne(y: f64, cfg: &TrackConfig) -> bool {
    y < cfg.floor - cfg.airborne_clearance
}

/// Gravity consistency. Two clauses:
///
/// 1. Airborne descent never slows by more than the slack between
///    consecutive steps (free fall must keep accelerating).
/// 2. A ball that has been resting at the floor never spontaneously launches
///    upward: once two consecutive at-rest steps are seen near the floor,
///    any later upward step at launch speed is a violation. This is what
///    breaks on time-reversed footage of a fall that lands and settles —
///    pure ballistic arcs are time-symmetric and stay valid either way.
fn descends_accelerating(track: &Track, cfg: &TrackConfig, range: (usize, usize)) -> (Outcome, String) {
    let st = steps(track);
    let mut vertical_motion = false;
    let mut rested_at_floor_until: Option<usize> = None;
    let mut detail = String::new();
    let mut violated = false;
    for w in st.windows(2) {
        let (i, _, y0, _, d1) = w[0];
        let (j, _, y1, _, d2) = w[1];
        if j != i + 1 || !in_range(j, range) {
            continue;
        }
        let y2 = y1 + d2;
        let all_airborne = airborne(y0, cfg) && airborne(y1, cfg) && airborne(y2, cfg);
        if all_airborne && (d1.abs() > cfg.motion || d2.abs() > cfg.motion) {
            vertical_motion = true;
        }
        if all_airborne && d1 > cfg.motion && d2 < d1 - cfg.descent_slack && !violated {
            violated = true;
            detail = format!("descent slowed from {d1:.2} to {d2:.2} px/frame at frame {i}");
        }
    }
    for (i, _, y0, dx, dy) in &st {
        if !airborne(*y0, cfg) && dy.abs() <= cfg.rest_eps && dx.abs() <= cfg.rest_eps {
            // second consecutive rest step near the floor establishes rest
            if st
                .iter()
                .any(|(j, _, yj, dxj, dyj)| {
                    *j + 1 == *i
                        && !airborne(*yj, cfg)
                        && dyj.abs() <= cfg.rest_eps
                        && dxj.abs() <= cfg.rest_eps
                })
            {
                let end = rested_at_floor_until.get_or_insert(*i + 1);
                *end = (*end).min(*i + 1);
            }
        }
    }
    if let Some(rest_end) = rested_at_floor_until {
        for (i, _, _, _, dy) in &st {
            if *i >= rest_end
                && in_range(*i, range)
                && *dy <= -cfg.launch_speed
                && !violated
            {
                violated = true;
                detail = format!(
                    "ball at rest on the floor launched upward at {:.2} px/frame at frame {i}",
                    -dy
                );
                vertical_motion = true;
            }
        }
    }
    if violated {
        (Outcome::Fail, detail)
    } else if vertical_motion {
        (Outcome::Pass, String::new())
    } else {
        (Outcome::NotApplicable, String::new())
    }
}

/// Vertical turnarounds (descent flipping to ascent) must happen at the
/// floor, and must not gain speed beyond the stated slack.
fn bounces_at_floor(track: &Track, cfg: &TrackConfig, range: (usize, usize)) -> (Outcome, String) {
    let st = steps(track);
    let mut events = 0usize;
    for wi in 1..st.len() {
        let (i, _, _, _, d1) = st[wi - 1];
        let (j, _, y1, _, d2) = st[wi];
        if j != i + 1 || !in_range(j, range) {
            continue;
        }
        if d1 > cfg.motion && d2 < -cfg.motion {
            events += 1;
            if airborne(y1, cfg) {
                return (
                    Outcome::Fail,
                    format!("ball reversed in mid-air at height {y1:.1} px (frame {j})"),
                );
            }
            // The last pre-contact step is truncated when the ball meets the
            // floor partway through a frame, so take the fastest descent over
            // the recent approach as the incoming speed.
            let incoming = st[wi.saturating_sub(4)..wi]
                .iter()
                .map(|s| s.4)
                .fold(d1, f64::max);
            let limit = incoming * (1.0 + cfg.bounce_ratio_slack) + cfg.bounce_extra_slack;
            if -d2 > limit {
                return (
                    Outcome::Fail,
                    format!(
                        "bounce gained speed: in {incoming:.2}, out {:.2} px/frame (frame {j})",
                        -d2
                    ),
                );
            }
        }
    }
    if events > 0 {
        (Outcome::Pass, String::new())
    } else {
        (Outcome::NotApplicable, String::new())
    }
}

/// The disc bottom never sinks below the floor line beyond the slack.
fn no_floor_penetration(track: &Track, cfg: &TrackConfig, range: (usize, usize)) -> (Outcome, String) {
    let mut seen = false;
    for (f, blob) in track.frames[range.0..range.1].iter().enumerate() {
        if let Some(b) = blob {
            seen = true;
            let bottom = b.y + b.radius;
            if bottom > cfg.floor + cfg.floor_slack {
                return (
                    Outcome::Fail,
                    format!(
                        "disc bottom {bottom:.1} px crossed the floor line {:.1} (frame {})",
                        cfg.floor,
                        range.0 + f
                    ),
                );
            }
        }
    }
    if seen {
        (Outcome::Pass, String::new())
    } else {
        (Outcome::NotApplicable, String::new())
    }
}

/// Horizontal momentum only reverses at the walls.
fn momentum_direction_consistent(
    track: &Track,
    cfg: &TrackConfig,
    range: (usize, usize),
) -> (Outcome, String) {
    let st = steps(track);
    let mut moving = false;
    for w in st.windows(2) {
        let (i, x0, _, d1, _) = w[0];
        let (j, _, _, d2, _) = w[1];
        if j != i + 1 || !in_range(j, range) {
            continue;
        }
        if d1.abs() > cfg.motion || d2.abs() > cfg.motion {
            moving = true;
        }
        if d1.abs() > cfg.motion && d2.abs() > cfg.motion && d1.signum() != d2.signum() {
            let x_flip = x0 + d1;
            let near_wall =
                x_flip <= cfg.wall_clearance || x_flip >= track.width as f64 - cfg.wall_clearance;
            if !near_wall {
                return (
                    Outcome::Fail,
                    format!("horizontal momentum flipped mid-canvas at x = {x_flip:.1} (frame {j})"),
                );
            }
        }
    }
    if moving {
        (Outcome::Pass, String::new())
    } else {
        (Outcome::NotApplicable, String::new())
    }
}

fn run_predicate(
    id: PredicateId,
    track: &Track,
    cfg: &TrackConfig,
    range: (usize, usize),
) -> (Outcome, String) {
    match id {
        PredicateId::DescendsAccelerating => descends_accelerating(track, cfg, range),
        PredicateId::BouncesAtFloor => bounces_at_floor(track, cfg, range),
        PredicateId::NoFloorPenetration => no_floor_penetration(track, cfg, range),
        PredicateId::MomentumDirectionConsistent => momentum_direction_consistent(track, cfg, range),
    }
}

/// Score of one video: every predicate over the whole clip, plus per-chunk
/// outcomes when intervals are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub results: Vec<PredicateResult>,
    pub tracked_frames: usize,
    /// Predicates (whole-clip) that were applicable.
    pub applicable: usize,
    /// Applicable predicates that passed.
    pub passed: usize,
}

/// Track a video and evaluate every predicate. Never errors: untrackable
/// footage yields not-applicable outcomes.
pub fn track_and_score(
    video: &VideoTensor,
    cfg: &TrackConfig,
    intervals: &[(usize, usize)],
) -> VideoScore {
    let track = track_centroids(video, cfg);
    let full = (0, track.frames.len());
    let mut results = Vec::with_capacity(PredicateId::ALL.len());
    let mut applicable = 0;
    let mut passed = 0;
    for id in PredicateId::ALL {
        let (outcome, detail) = run_predicate(id, &track, cfg, full);
        match outcome {
            Outcome::Pass => {
                applicable += 1;
                passed += 1;
            }
            Outcome::Fail => applicable += 1,
            Outcome::NotApplicable => {}
        }
        let per_chunk = intervals
            .iter()
            .map(|&(a, b)| {
                let n = track.frames.len();
                run_predicate(id, &track, cfg, (a.min(n), b.min(n))).0
            })
            .collect();
        results.push(PredicateResult {
            id,
            outcome,
            per_chunk,
            detail,
        });
    }
    VideoScore {
        results,
        tracked_frames: track.tracked_frames(),
        applicable,
        passed,
    }
}

/// Aggregate physical-commonsense surrogate over many clips: the fraction of
/// applicable (predicate, video) pairs that passed. No applicable pairs at
/// all scores 0.
pub fn aggregate_pc(scores: &[VideoScore]) -> (usize, usize, f64) {
    let passed: usize = scores.iter().map(|s| s.passed).sum();
    let applicable: usize = scores.iter().map(|s| s.applicable).sum();
    let pc = if applicable == 0 {
        0.0
    } else {
        passed as f64 / applicable as f64
    };
    (passed, applicable, pc)
}

// ---- attention locality ----

/// Mean attention mass each video token places on its own chunk's caption,
/// per chunk-attention layer, probed with a frozen forward pass at diffusion
/// time `t`. Uniform attention scores exactly `1/chunks`.
///
/// Errors with a config error when the model has no chunk-attention pathway.
pub fn attention_locality<T: Scalar>(
    model: &Model<T>,
    tokens: &Tensor<T>,
    bundles: &[ConditioningBundle],
    t: f64,
) -> Result<Vec<f64>> {
    if !model.config().local_pathway {
        return Err(Error::Config(
            "the loaded model has no chunk-attention pathway to probe".into(),
        ));
    }
    let mut tape = Tape::new();
    let ts = vec![t; bundles.len()];
    let out = model.forward(&mut tape, tokens, &ts, bundles, Trainability::Frozen)?;
    let q_chunks = model.config().video_token_chunks();
    let k_chunks = model.config().text_token_chunks();
    out.local_weights
        .iter()
        .map(|w| same_chunk_mass(tape.value(*w), &q_chunks, &k_chunks))
        .collect()
}

// ---- report ----

/// One row of the comparison table (one model/guidance arm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub label: String,
    pub clips: usize,
    pub applicable: usize,
    pub passed: usize,
    pub pc: f64,
    /// Per-layer locality scores, when the probe ran for this arm.
    pub locality: Option<Vec<f64>>,
    pub checkpoint_hash: Option<String>,
}

impl EvalRow {
    pub fn from_scores(label: &str, scores: &[VideoScore]) -> Self {
        let (passed, applicable, pc) = aggregate_pc(scores);
        EvalRow {
            label: label.to_string(),
            clips: scores.len(),
            applicable,
            passed,
            pc,
            locality: None,
            checkpoint_hash: None,
        }
    }
}

/// Full evaluation report, serialized as JSON next to a CSV summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<EvalRow>,
    /// Sampling seeds the arms were averaged over.
    pub seeds: Vec<u64>,
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, seeds: Vec<u64>, config_hash: Option<String>) -> Self {
        EvalReport {
            schema_version: 1,
            rows,
            seeds,
            config_hash,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Summary table: one line per arm, locality reported as the mean over
    /// layers when present.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("label,clips,applicable,passed,pc,locality\n");
        for r in &self.rows {
            let locality = r
                .locality
                .as_ref()
                .map(|l| format!("{:.6}", l.iter().sum::<f64>() / l.len().max(1) as f64))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.label, r.clips, r.applicable, r.passed, r.pc, locality
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Refuse to evaluate artifacts produced under different run configurations
/// in one report, unless explicitly allowed.
pub fn ensure_uniform_hashes(hashes: &[Option<String>], allow_mixed: bool) -> Result<()> {
    if allow_mixed {
        return Ok(());
    }
    let distinct: BTreeSet<_> = hashes.iter().collect();
    if distinct.len() > 1 {
        let shown: Vec<String> = distinct
            .iter()
            .map(|h| h.as_deref().unwrap_or("<none>").to_string())
            .collect();
        return Err(Error::Config(format!(
            "inputs mix {} different run-config hashes ({}); rerun per config or allow mixing explicitly",
            shown.len(),
            shown.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::{sample_world, simulate, ObjectInit, WorldConfig};
    use crate::text::Vocab;
    use rand::Rng;

    fn seven_chunks() -> Vec<(usize, usize)> {
        (0..7).map(|c| (c * 3, c * 3 + 3)).collect()
    }

    #[test]
    fn tracker_matches_simulator_positions() {
        for seed in 0..10 {
            let cfg = sample_world(31, seed, 21);
            let (video, states) = simulate(&cfg).unwrap();
            let track = track_centroids(&video, &TrackConfig::default());
            assert_eq!(track.tracked_frames(), 21, "seed {seed}: lost the ball");
            for (f, blob) in track.frames.iter().enumerate() {
                let b = blob.unwrap();
                let o = &states[f].objects[0];
                assert!(
                    (b.x - o.x).abs() <= 0.6 && (b.y - o.y).abs() <= 0.6,
                    "seed {seed} frame {f}: tracked ({:.2}, {:.2}) vs true ({:.2}, {:.2})",
                    b.x,
                    b.y,
                    o.x,
                    o.y
                );
                assert!(
                    (b.radius - o.radius).abs() <= 0.9,
                    "seed {seed} frame {f}: radius {:.2} vs {:.2}",
                    b.radius,
                    o.radius
                );
            }
        }
    }

    #[test]
    fn blank_and_noise_frames_are_untrackable_not_errors() {
        let blank = VideoTensor::zeros(4, 3, 32, 32).unwrap();
        let track = track_centroids(&blank, &TrackConfig::default());
        assert_eq!(track.tracked_frames(), 0);

        let mut noise = VideoTensor::zeros(4, 3, 32, 32).unwrap();
        let mut rng = crate::stream_rng(1, 1);
        for v in noise.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let track = track_centroids(&noise, &TrackConfig::default());
        assert_eq!(
            track.tracked_frames(),
            0,
            "white noise exceeds the blob-size cap and must not track"
        );

        let score = track_and_score(&noise, &TrackConfig::default(), &seven_chunks());
        assert_eq!(score.applicable, 0);
        assert!(score
            .results
            .iter()
            .all(|r| r.outcome == Outcome::NotApplicable));
        let (_, _, pc) = aggregate_pc(&[score]);
        assert_eq!(pc, 0.0, "no applicable pairs scores zero");
    }

    #[test]
    fn one_hundred_simulator_seeds_pass_every_applicable_predicate() {
        let cfg = TrackConfig::default();
        let intervals = seven_chunks();
        let mut applicable_total = 0;
        for seed in 0..100 {
            let world = sample_world(5, seed, 21);
            let (video, _) = simulate(&world).unwrap();
            let score = track_and_score(&video, &cfg, &intervals);
            for r in &score.results {
                assert_ne!(
                    r.outcome,
                    Outcome::Fail,
                    "seed {seed}: {} failed: {}",
                    r.id.name(),
                    r.detail
                );
            }
            applicable_total += score.applicable;
        }
        assert!(
            applicable_total >= 150,
            "predicates barely ever applied ({applicable_total}); fixtures too static"
        );
    }

    /// A fall that lands and settles, long enough that the last frames are
    /// at rest on the floor.
    fn settling_fall() -> (VideoTensor, WorldConfig) {
        // Strong gravity so the bounce arcs die out well inside the clip.
        let world = WorldConfig {
            frames: 48,
            gravity: 0.25,
            ..WorldConfig::standard(
                0.4,
                vec![ObjectInit {
                    x: 16.0,
                    y: 6.0,
                    vx: 0.0,
                    vy: 0.5,
                    radius: 3.0,
                    color: crate::sim::ColorId::Red,
                }],
            )
        };
        let (video, states) = simulate(&world).unwrap();
        // Settled contact oscillates at |vy| = e·g/(1+e) ≈ 0.07; the rendered
        // position is pinned to the floor, which is what the tracker sees.
        let last = states.last().unwrap().objects[0];
        assert!(last.vy.abs() < 0.15 && last.y > world.floor - 4.0, "fixture must settle");
        (video, world)
    }

    fn reverse_video(video: &VideoTensor) -> VideoTensor {
        let mut data = Vec::with_capacity(video.data().len());
        for f in (0..video.frames()).rev() {
            data.extend_from_slice(video.frame(f));
        }
        VideoTensor::from_data(
            video.frames(),
            video.channels(),
            video.height(),
            video.width(),
            data,
        )
        .unwrap()
    }

    #[test]
    fn reversed_settling_fall_fails_the_gravity_predicate() {
        let (video, _) = settling_fall();
        let cfg = TrackConfig::default();

        let forward = track_and_score(&video, &cfg, &[]);
        let fwd = forward
            .results
            .iter()
            .find(|r| r.id == PredicateId::DescendsAccelerating)
            .unwrap();
        assert_eq!(fwd.outcome, Outcome::Pass, "{}", fwd.detail);

        let reversed = track_and_score(&reverse_video(&video), &cfg, &[]);
        let rev = reversed
            .results
            .iter()
            .find(|r| r.id == PredicateId::DescendsAccelerating)
            .unwrap();
        assert_eq!(
            rev.outcome,
            Outcome::Fail,
            "rest-then-launch footage must fail the gravity check"
        );
        assert!(rev.detail.contains("launched"), "{}", rev.detail);
    }

    /// Hand-drawn red disc clip on the standard canvas; positions are disc
    /// centers per frame.
    fn drawn_clip(positions: &[(f64, f64)], radius: f64) -> VideoTensor {
        let (h, w) = (32usize, 32usize);
        let floor = crate::sim::DEFAULT_FLOOR;
        let mut video = VideoTensor::zeros(positions.len(), 3, h, w).unwrap();
        for (f, &(cx, cy)) in positions.iter().enumerate() {
            for y in 0..h {
                let py = y as f64 + 0.5;
                let bg = if py >= floor {
                    crate::sim::FLOOR_SHADE
                } else {
                    crate::sim::BACKGROUND
                };
                for x in 0..w {
                    let px = x as f64 + 0.5;
                    let dist = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt();
                    let alpha = (radius + 0.5 - dist).clamp(0.0, 1.0) as f32;
                    let rgb = [
                        bg * (1.0 - alpha) + 1.0 * alpha,
                        bg * (1.0 - alpha) + 0.2 * alpha,
                        bg * (1.0 - alpha) + 0.2 * alpha,
                    ];
                    for c in 0..3 {
                        video.set(f, c, y, x, rgb[c]);
                    }
                }
            }
        }
        video
    }

    #[test]
    fn pixel_fixture_below_the_floor_fails_penetration() {
        // Disc center one pixel below the floor line: bottom ≈ 34 > 31.
        let positions: Vec<(f64, f64)> = (0..5).map(|_| (16.0, 31.0)).collect();
        let video = drawn_clip(&positions, 3.0);
        let score = track_and_score(&video, &TrackConfig::default(), &[]);
        let pen = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::NoFloorPenetration)
            .unwrap();
        assert_eq!(pen.outcome, Outcome::Fail, "{}", pen.detail);
        assert!(pen.detail.contains("floor line"), "{}", pen.detail);

        // The same disc resting exactly on the floor passes.
        let resting: Vec<(f64, f64)> = (0..5).map(|_| (16.0, 27.0)).collect();
        let video = drawn_clip(&resting, 3.0);
        let score = track_and_score(&video, &TrackConfig::default(), &[]);
        let pen = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::NoFloorPenetration)
            .unwrap();
        assert_eq!(pen.outcome, Outcome::Pass, "{}", pen.detail);
    }

    #[test]
    fn mid_air_reversal_fails_the_bounce_predicate() {
        let ys = [8.0, 10.0, 12.0, 14.0, 16.0, 14.0, 12.0, 10.0];
        let positions: Vec<(f64, f64)> = ys.iter().map(|&y| (16.0, y)).collect();
        let video = drawn_clip(&positions, 3.0);
        let score = track_and_score(&video, &TrackConfig::default(), &[]);
        let bounce = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::BouncesAtFloor)
            .unwrap();
        assert_eq!(bounce.outcome, Outcome::Fail);
        assert!(bounce.detail.contains("mid-air"), "{}", bounce.detail);
    }

    #[test]
    fn super_elastic_floor_bounce_fails_the_bounce_predicate() {
        // Descends at 1 px/frame, leaves at 3: impossible energy gain.
        let ys = [22.0, 23.0, 24.0, 25.0, 26.0, 23.0, 20.0, 17.0];
        let positions: Vec<(f64, f64)> = ys.iter().map(|&y| (16.0, y)).collect();
        let video = drawn_clip(&positions, 3.0);
        let score = track_and_score(&video, &TrackConfig::default(), &[]);
        let bounce = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::BouncesAtFloor)
            .unwrap();
        assert_eq!(bounce.outcome, Outcome::Fail);
        assert!(bounce.detail.contains("gained speed"), "{}", bounce.detail);
    }

    #[test]
    fn momentum_flips_pass_at_walls_and_fail_mid_canvas() {
        let cfg = TrackConfig::default();
        // Turnaround at x = 29 ≈ the right wall contact point for radius 3.
        let wall_xs = [20.0, 23.0, 26.0, 29.0, 26.0, 23.0, 20.0];
        let positions: Vec<(f64, f64)> = wall_xs.iter().map(|&x| (x, 12.0)).collect();
        let score = track_and_score(&drawn_clip(&positions, 3.0), &cfg, &[]);
        let m = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::MomentumDirectionConsistent)
            .unwrap();
        assert_eq!(m.outcome, Outcome::Pass, "{}", m.detail);

        // Same zigzag but turning around far from any wall.
        let mid_xs = [8.0, 11.0, 14.0, 17.0, 14.0, 11.0, 8.0];
        let positions: Vec<(f64, f64)> = mid_xs.iter().map(|&x| (x, 12.0)).collect();
        let score = track_and_score(&drawn_clip(&positions, 3.0), &cfg, &[]);
        let m = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::MomentumDirectionConsistent)
            .unwrap();
        assert_eq!(m.outcome, Outcome::Fail);
        assert!(m.detail.contains("mid-canvas"), "{}", m.detail);
    }

    #[test]
    fn per_chunk_outcomes_localize_the_event() {
        // Bounce around frame 12-13: chunks 0..3 (frames 0-8) see only the
        // fall; the bounce chunk reports the bounce.
        let world = WorldConfig {
            frames: 21,
            ..WorldConfig::standard(
                0.8,
                vec![ObjectInit {
                    x: 16.0,
                    y: 14.0,
                    vx: 0.0,
                    vy: 0.8,
                    radius: 3.0,
                    color: crate::sim::ColorId::Green,
                }],
            )
        };
        let (video, states) = simulate(&world).unwrap();
        let bounce_frame = (1..states.len())
            .find(|&i| states[i - 1].objects[0].vy > 0.0 && states[i].objects[0].vy < 0.0)
            .expect("fixture bounces");
        let score = track_and_score(&video, &TrackConfig::default(), &seven_chunks());
        let b = score
            .results
            .iter()
            .find(|r| r.id == PredicateId::BouncesAtFloor)
            .unwrap();
        assert_eq!(b.outcome, Outcome::Pass);
        let bounce_chunk = bounce_frame / 3;
        for (c, out) in b.per_chunk.iter().enumerate() {
            if c + 1 < bounce_chunk {
                assert_eq!(
                    *out,
                    Outcome::NotApplicable,
                    "chunk {c} precedes the bounce at frame {bounce_frame}"
                );
            }
        }
        assert!(
            b.per_chunk
                .iter()
                .any(|o| *o == Outcome::Pass),
            "some chunk must contain the bounce: {:?}",
            b.per_chunk
        );
    }

    #[test]
    fn aggregate_counts_predicate_video_pairs() {
        let mk = |applicable, passed| VideoScore {
            results: Vec::new(),
            tracked_frames: 0,
            applicable,
            passed,
        };
        let (p, a, pc) = aggregate_pc(&[mk(3, 2), mk(2, 2), mk(0, 0)]);
        assert_eq!((p, a), (4, 5));
        assert!((pc - 0.8).abs() < 1e-12);
        assert_eq!(aggregate_pc(&[]).2, 0.0);
    }

    // ---- locality probe ----

    fn probe_bundles(chunks: usize, len: usize, caption: &str) -> Vec<ConditioningBundle> {
        let v = Vocab::standard();
        let locals = vec![caption.to_string(); chunks];
        vec![ConditioningBundle::from_captions(
            &v,
            "a red ball in a box",
            &locals,
            None,
            len,
            len,
        )
        .unwrap()]
    }

    fn probe_tokens<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Tensor<T> {
        let mut rng = crate::stream_rng(seed, 99);
        Tensor::randn(&[1, cfg.num_tokens(), cfg.patch_dim()], 1.0, &mut rng)
    }

    #[test]
    fn disabled_phases_and_identical_texts_probe_uniform() {
        let cfg = ModelConfig {
            disable_rope_phases: true,
            ..ModelConfig::tiny()
        };
        let model = Model::<f32>::new(cfg.clone(), 2).unwrap();
        let tokens = probe_tokens::<f32>(&cfg, 4);
        let bundles = probe_bundles(cfg.chunks(), cfg.local_len, "the ball falls steadily");
        let scores = attention_locality(&model, &tokens, &bundles, 0.5).unwrap();
        assert_eq!(scores.len(), cfg.blocks);
        let uniform = 1.0 / cfg.chunks() as f64;
        for (layer, s) in scores.iter().enumerate() {
            assert!(
                (s - uniform).abs() <= 1e-6,
                "layer {layer}: {s} vs uniform {uniform}"
            );
        }
    }

    #[test]
    fn hard_chunk_mask_probes_to_one() {
        let cfg = ModelConfig {
            hard_chunk_mask: true,
            ..ModelConfig::tiny()
        };
        let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let tokens = probe_tokens::<f32>(&cfg, 5);
        let bundles = probe_bundles(cfg.chunks(), cfg.local_len, "the ball falls steadily");
        let scores = attention_locality(&model, &tokens, &bundles, 0.5).unwrap();
        for s in scores {
            assert!((s - 1.0).abs() <= 1e-6, "masked locality {s} should be 1");
        }
    }

    #[test]
    fn untrained_desk_model_probes_near_uniform() {
        // Full desk geometry, identical chunk captions, live phase tables: an
        // untrained model's locality must sit near uniform, within
        // 2/(chunks·√tokens) — the probe's own no-signal noise floor.
        let cfg = ModelConfig::default();
        let model = Model::<f32>::new(cfg.clone(), 7).unwrap();
        let tokens = probe_tokens::<f32>(&cfg, 6);
        let bundles = probe_bundles(cfg.chunks(), cfg.local_len, "the ball falls steadily");
        let scores = attention_locality(&model, &tokens, &bundles, 0.5).unwrap();
        let uniform = 1.0 / cfg.chunks() as f64;
        let tol = 2.0 / (cfg.chunks() as f64 * (cfg.num_tokens() as f64).sqrt());
        for (layer, s) in scores.iter().enumerate() {
            assert!(
                (s - uniform).abs() <= tol,
                "layer {layer}: untrained locality {s} strayed past {tol} from {uniform}"
            );
        }
    }

    #[test]
    fn probe_without_the_local_pathway_is_a_config_error() {
        let cfg = ModelConfig {
            local_pathway: false,
            ..ModelConfig::tiny()
        };
        let model = Model::<f32>::new(cfg.clone(), 2).unwrap();
        let tokens = probe_tokens::<f32>(&cfg, 4);
        let bundles = probe_bundles(cfg.chunks(), cfg.local_len, "the ball falls steadily");
        let err = attention_locality(&model, &tokens, &bundles, 0.5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    // ---- report plumbing ----

    #[test]
    fn report_roundtrips_json_and_writes_the_table() {
        let rows: Vec<EvalRow> = ["baseline", "finetune", "no_counterfactual", "full"]
            .iter()
            .enumerate()
            .map(|(i, label)| EvalRow {
                label: label.to_string(),
                clips: 20,
                applicable: 50 + i,
                passed: 30 + 2 * i,
                pc: (30 + 2 * i) as f64 / (50 + i) as f64,
                locality: (i == 3).then(|| vec![0.31, 0.29, 0.35, 0.4]),
                checkpoint_hash: Some(format!("hash-{i}")),
            })
            .collect();
        let report = EvalReport::new(rows, vec![1, 2, 3, 4, 5], Some("cfg".into()));
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("report.json");
        let csv = dir.path().join("report.csv");
        report.save_json(&json).unwrap();
        report.save_csv(&csv).unwrap();
        assert_eq!(EvalReport::load_json(&json).unwrap(), report);
        let table = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "label,clips,applicable,passed,pc,locality");
        assert!(lines[1].starts_with("baseline,20,50,30,0.600000,"));
        assert!(lines[4].starts_with("full,"));
        assert!(lines[4].ends_with("0.337500"), "{}", lines[4]);
    }

    #[test]
    fn mixed_hashes_are_refused_unless_allowed() {
        let same = vec![Some("a".to_string()), Some("a".to_string())];
        assert!(ensure_uniform_hashes(&same, false).is_ok());
        let mixed = vec![Some("a".to_string()), Some("b".to_string()), None];
        let err = ensure_uniform_hashes(&mixed, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("<none>"));
        assert!(ensure_uniform_hashes(&mixed, true).is_ok());
    }
}
