//! Multi-axis rotary embeddings: the attention score between two rotated
//! vectors depends only on their coordinate *difference*, and text tokens
//! placed at their chunk's center frame are in phase with exactly the frames
//! they describe.
//!
//! Run with `cargo run --example rotary_relative_offsets`.

use physvid::rope::{chunk_time, ChunkCoordMode, FrequencyBasis, PositionGrid};
use physvid::stream_rng;
use physvid::tensor::Tape;

/// Rotate one head vector at one coordinate.
fn rotate(basis: &FrequencyBasis, coord: [f64; 3], x: &[f64]) -> Vec<f64> {
    let grid = PositionGrid {
        coords: vec![coord],
    };
    let (cos, sin) = basis.phase_tables::<f64>(&grid);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&[1, 1, 1, basis.head_dim()], x.to_vec());
    let r = tape.rope(v, &cos, &sin).expect("rotation");
    tape.value(r).to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> physvid::Result<()> {
    let basis = FrequencyBasis::new(12, 10_000.0)?;
    let mut rng = stream_rng(3, 0);
    use rand::Rng;
    let q: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();

    // Same offset, three different absolute positions: identical scores.
    println!("q.k after rotation, offset fixed at (+2 frames, +1 row, -1 col):");
    for base in [[0.0, 0.0, 0.0], [5.0, 3.0, 4.0], [17.0, 6.0, 1.0]] {
        let qr = rotate(&basis, base, &q);
        let kr = rotate(
            &basis,
            [base[0] + 2.0, base[1] + 1.0, base[2] - 1.0],
            &k,
        );
        println!(
            "  anchored at ({:>4.1}, {:>3.1}, {:>3.1}) -> {:+.10}",
            base[0],
            base[1],
            base[2],
            dot(&qr, &kr)
        );
    }

    // A caption token for chunk 3 sits at that chunk's center frame. Sweep a
    // video token across all 21 frames and watch the phase agreement peak
    // inside the chunk's own [9, 12) span.
    let frames_per_chunk = 3;
    let c = 3;
    let t_text = chunk_time(c, ChunkCoordMode::Center, frames_per_chunk);
    let text_k = rotate(&basis, [t_text, 0.0, 0.0], &q);
    println!("\nphase agreement of chunk-{c} caption (time {t_text}) with each frame:");
    let own = (c * frames_per_chunk) as f64..(c * frames_per_chunk + frames_per_chunk) as f64;
    let mut best_frame = 0usize;
    let mut best = f64::NEG_INFINITY;
    for f in 0..21usize {
        let video_q = rotate(&basis, [f as f64, 0.0, 0.0], &q);
        let score = dot(&video_q, &text_k);
        if score > best {
            best = score;
            best_frame = f;
        }
        let bar_len = ((score / dot(&q, &q)).max(0.0) * 40.0) as usize;
        let marker = if own.contains(&(f as f64)) { "<- own chunk" } else { "" };
        println!("  frame {f:>2}: {score:+.3} {} {marker}", "#".repeat(bar_len));
    }
    assert!(
        own.contains(&(best_frame as f64)),
        "peak frame {best_frame} should fall inside the chunk's own span"
    );
    println!("\npeak at frame {best_frame}, inside chunk {c}'s span [9, 12)");
    Ok(())
}
