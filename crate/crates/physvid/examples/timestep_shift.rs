//! The shifted timestep schedule used by both training and sampling:
//! `t = s*u / (1 + (s-1)*u)` warps uniform draws toward the high-noise end,
//! which matters because video tokens are heavily correlated and the model
//! needs most of its capacity near t = 1.
//!
//! Prints the warp for several shifts, the empirical density over random
//! draws, and the descending integration grid the sampler walks.
//!
//! Run with `cargo run --example timestep_shift`.

use physvid::sampling::time_grid;
use physvid::stream_rng;
use physvid::training::{shift_timestep, unshift_timestep};
use rand::Rng;

fn main() -> physvid::Result<()> {
    println!("u -> t under t = s*u / (1 + (s-1)*u):");
    println!("{:>6}  {:>8}  {:>8}  {:>8}", "u", "s=1", "s=3", "s=8");
    for i in 0..=10 {
        let u = i as f64 / 10.0;
        println!(
            "{u:>6.2}  {:>8.4}  {:>8.4}  {:>8.4}",
            shift_timestep(u, 1.0)?,
            shift_timestep(u, 3.0)?,
            shift_timestep(u, 8.0)?
        );
    }

    // The warp is a bijection on [0, 1]; unshift inverts it.
    let u = 0.37;
    let t = shift_timestep(u, 8.0)?;
    assert!((unshift_timestep(t, 8.0)? - u).abs() < 1e-12);

    // Empirical histogram of shifted draws: mass piles up near t = 1.
    let mut rng = stream_rng(1, 0);
    let mut hist = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws {
        let t = shift_timestep(rng.random_range(0.0..1.0), 8.0)?;
        hist[((t * 10.0) as usize).min(9)] += 1;
    }
    println!("\ndistribution of 100k shifted draws (s = 8):");
    for (i, count) in hist.iter().enumerate() {
        let share = *count as f64 / draws as f64;
        println!(
            "  t in [{:.1}, {:.1}): {:5.1}% {}",
            i as f64 / 10.0,
            (i + 1) as f64 / 10.0,
            share * 100.0,
            "#".repeat((share * 120.0) as usize)
        );
    }
    assert!(hist[9] > hist[0], "shift must favor the high-noise end");

    // The sampler integrates the same warp, descending from 1 to 0.
    let grid = time_grid(10, 8.0)?;
    println!(
        "\nsampling grid, 10 steps at shift 8:\n  {}",
        grid.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" > ")
    );
    assert_eq!(grid.len(), 11);
    assert_eq!((grid[0], grid[10]), (1.0, 0.0));
    println!("\nok: schedule is a bijection, biased toward t = 1, shared by both phases");
    Ok(())
}
