//! Multi-axis rotary position embeddings shared by video and text tokens.
//!
//! Each attention head's feature vector is split into three equal bands, one
//! per position axis. Video tokens use (frame, row, column); text tokens use
//! (chunk time, position in chunk, 0). Within a band, adjacent feature pairs
//! form rotation planes; plane `i` of an axis band rotates by
//! `coord * theta_base^(-2i / band_dim)`. Because both modalities draw their
//! temporal coordinate from the same clock, a text token "near" a frame in
//! time gets a genuinely similar phase, which is what lets attention prefer
//! captions for the chunk it is currently denoising.
//!
//! Rotations are orthonormal, so they preserve vector norms, reduce to the
//! identity at the origin, and make query–key dot products depend only on
//! coordinate *differences* (shift invariance along every axis).

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// How a text chunk's temporal coordinate is derived from its chunk index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkCoordMode {
    /// Use the chunk index itself: chunk `c` sits at time `c`.
    Raw,
    /// Place chunk `c` at its middle frame: `c * frames_per_chunk +
    /// frames_per_chunk / 2`. This keeps text and video on one time scale,
    /// so "same chunk" distances stay smaller than "adjacent chunk" ones.
    Center,
}

/// Per-axis rotation frequencies for a given head width.
#[derive(Debug, Clone)]
pub struct FrequencyBasis {
    head_dim: usize,
    /// One frequency per rotation plane of a single axis band.
    axis_freqs: Vec<f64>,
}

impl FrequencyBasis {
    /// `head_dim` must be divisible by 6: three axis bands, each an even
    /// number of features wide.
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 6 != 0 {
            return Err(Error::Config(format!(
                "rotary head width must be a positive multiple of 6, got {head_dim}"
            )));
        }
        if !(theta_base > 1.0) {
            return Err(Error::Config(format!(
                "rotary base must exceed 1, got {theta_base}"
            )));
        }
        let band_dim = head_dim / 3;
        let planes = band_dim / 2;
        let axis_freqs = (0..planes)
            .map(|i| theta_base.powf(-2.0 * i as f64 / band_dim as f64))
            .collect();
        Ok(FrequencyBasis {
            head_dim,
            axis_freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotation planes per head (= head_dim / 2).
    pub fn planes(&self) -> usize {
        self.head_dim / 2
    }

    pub fn axis_freqs(&self) -> &[f64] {
        &self.axis_freqs
    }

    /// Per-token rotation phases for a grid, laid out `[token][plane]` with
    /// the three axis bands concatenated. Returns `(cos, sin)` tables sized
    /// `tokens * head_dim / 2`, ready for the tape's rotation op.
    pub fn phase_tables<T: Scalar>(&self, grid: &PositionGrid) -> (Vec<T>, Vec<T>) {
        let planes_per_axis = self.axis_freqs.len();
        let total = grid.coords.len() * self.planes();
        let mut cos = Vec::with_capacity(total);
        let mut sin = Vec::with_capacity(total);
        for coord in &grid.coords {
            for axis in 0..3 {
                for &freq in &self.axis_freqs {
                    let angle = coord[axis] * freq;
                    cos.push(T::from_f64(angle.cos()));
                    sin.push(T::from_f64(angle.sin()));
                }
            }
            debug_assert_eq!(planes_per_axis * 3, self.planes());
        }
        (cos, sin)
    }
}

/// Token positions along (time, vertical, horizontal) axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub coords: Vec<[f64; 3]>,
}

impl PositionGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Positions for a video token grid, frame-major then row then column:
/// token `(f, y, x)` has flat index `(f * rows + y) * cols + x` and
/// coordinates `(f, y, x)`.
pub fn video_grid(frames: usize, rows: usize, cols: usize) -> PositionGrid {
    let mut coords = Vec::with_capacity(frames * rows * cols);
    for f in 0..frames {
        for y in 0..rows {
            for x in 0..cols {
                coords.push([f as f64, y as f64, x as f64]);
            }
        }
    }
    PositionGrid { coords }
}

/// Positions for concatenated per-chunk text tokens: chunk-major, each chunk
/// contributing `tokens_per_chunk` tokens at coordinates
/// `(chunk_time, position_in_chunk, 0)`.
pub fn text_chunk_grid(
    chunks: usize,
    tokens_per_chunk: usize,
    mode: ChunkCoordMode,
    frames_per_chunk: usize,
) -> PositionGrid {
    let mut coords = Vec::with_capacity(chunks * tokens_per_chunk);
    for c in 0..chunks {
        let t = chunk_time(c, mode, frames_per_chunk);
        for j in 0..tokens_per_chunk {
            coords.push([t, j as f64, 0.0]);
        }
    }
    PositionGrid { coords }
}

/// Temporal coordinate assigned to chunk `c` under `mode`.
pub fn chunk_time(c: usize, mode: ChunkCoordMode, frames_per_chunk: usize) -> f64 {
    match mode {
        ChunkCoordMode::Raw => c as f64,
        ChunkCoordMode::Center => (c * frames_per_chunk + frames_per_chunk / 2) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frequencies_for_width_twelve() {
        let basis = FrequencyBasis::new(12, 10_000.0).unwrap();
        // band_dim = 4 -> two planes per axis at 10000^0 and 10000^(-1/2)
        let f = basis.axis_freqs();
        assert_eq!(f.len(), 2);
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert!((f[1] - 0.01).abs() < 1e-12);
        assert_eq!(basis.planes(), 6);
    }

    #[test]
    fn rejects_widths_not_divisible_by_six() {
        for bad in [0, 4, 8, 16, 20] {
            assert!(FrequencyBasis::new(bad, 10_000.0).is_err(), "width {bad}");
        }
        assert!(FrequencyBasis::new(6, 10_000.0).is_ok());
        assert!(FrequencyBasis::new(48, 10_000.0).is_ok());
    }

    #[test]
    fn video_grid_order_and_size() {
        let g = video_grid(21, 4, 4);
        assert_eq!(g.len(), 336);
        assert_eq!(g.coords[0], [0.0, 0.0, 0.0]);
        // token (f=2, y=1, x=3) -> flat (2*4+1)*4+3 = 39
        assert_eq!(g.coords[39], [2.0, 1.0, 3.0]);
        assert_eq!(g.coords[335], [20.0, 3.0, 3.0]);
    }

    #[test]
    fn text_grid_raw_and_center_coordinates() {
        let g = text_chunk_grid(7, 16, ChunkCoordMode::Raw, 3);
        assert_eq!(g.len(), 112);
        // chunk 3, token 5 -> flat 3*16+5
        assert_eq!(g.coords[3 * 16 + 5], [3.0, 5.0, 0.0]);

        let g = text_chunk_grid(7, 4, ChunkCoordMode::Center, 3);
        let times: Vec<f64> = (0..7).map(|c| g.coords[c * 4][0]).collect();
        assert_eq!(times, vec![1.0, 4.0, 7.0, 10.0, 13.0, 16.0, 19.0]);
    }

    #[test]
    fn center_mode_keeps_same_chunk_closer_than_neighbors() {
        // video frame f=5 lives in chunk 1 (frames 3..6); its distance to its
        // own chunk's time must beat the distance to adjacent chunks.
        let own = (5.0 - chunk_time(1, ChunkCoordMode::Center, 3)).abs();
        let prev = (5.0 - chunk_time(0, ChunkCoordMode::Center, 3)).abs();
        let next = (5.0 - chunk_time(2, ChunkCoordMode::Center, 3)).abs();
        assert!(own < prev && own < next, "{own} vs {prev}/{next}");
    }

    fn rotate_one(basis: &FrequencyBasis, coord: [f64; 3], x: &[f64]) -> Vec<f64> {
        let grid = PositionGrid { coords: vec![coord] };
        let (cos, sin) = basis.phase_tables::<f64>(&grid);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(&[1, 1, 1, basis.head_dim()], x.to_vec());
        let r = tape.rope(v, &cos, &sin).unwrap();
        tape.value(r).to_vec()
    }

    #[test]
    fn rotation_preserves_norm() {
        let basis = FrequencyBasis::new(12, 10_000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..12)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let coord = [
                rng.random_range(0.0..30.0),
                rng.random_range(0.0..8.0),
                rng.random_range(0.0..8.0),
            ];
            let y = rotate_one(&basis, coord, &x);
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_at_origin_is_bit_exact() {
        let basis = FrequencyBasis::new(18, 10_000.0).unwrap();
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin() * 3.1).collect();
        let y = rotate_one(&basis, [0.0, 0.0, 0.0], &x);
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dot_products_depend_only_on_coordinate_differences() {
        let basis = FrequencyBasis::new(12, 10_000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..12)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let k: Vec<f64> = (0..12)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for _ in 0..10 {
            let p: [f64; 3] = [
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
            ];
            let delta: [f64; 3] = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ];
            let shift: [f64; 3] = [
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..20.0),
            ];
            let q1 = rotate_one(&basis, p, &q);
            let k1 = rotate_one(
                &basis,
                [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]],
                &k,
            );
            let q2 = rotate_one(
                &basis,
                [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]],
                &q,
            );
            let k2 = rotate_one(
                &basis,
                [
                    p[0] + delta[0] + shift[0],
                    p[1] + delta[1] + shift[1],
                    p[2] + delta[2] + shift[2],
                ],
                &k,
            );
            assert!((dot(&q1, &k1) - dot(&q2, &k2)).abs() < 1e-9);
        }
    }

    #[test]
    fn phase_tables_align_with_tape_rotation_layout() {
        // Two tokens, ensure the second token's phases land on the second row.
        let basis = FrequencyBasis::new(6, 10_000.0).unwrap();
        let grid = PositionGrid {
            coords: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
        };
        let (cos, sin) = basis.phase_tables::<f64>(&grid);
        assert_eq!(cos.len(), 2 * 3);
        // token 0 at origin: identity phases
        assert_eq!(&cos[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&sin[..3], &[0.0, 0.0, 0.0]);
        // token 1: temporal plane rotates by 2.0, spatial bands stay identity
        assert!((cos[3] - 2.0f64.cos()).abs() < 1e-15);
        assert!((sin[3] - 2.0f64.sin()).abs() < 1e-15);
        assert_eq!(&cos[4..], &[1.0, 1.0]);
        assert_eq!(&sin[4..], &[0.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_f64s(&[1, 2, 1, 6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let v = tape.leaf(&x);
        let r = tape.rope(v, &cos, &sin).unwrap();
        let out = tape.value(r);
        // token 0 unchanged
        assert_eq!(&out[..6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        // token 1: first plane rotated by angle 2, others unchanged
        assert!((out[6] - 2.0f64.cos()).abs() < 1e-15);
        assert!((out[7] - 2.0f64.sin()).abs() < 1e-15);
        assert_eq!(&out[8..], &[1.0, 0.0, 1.0, 0.0]);
    }
}
