//! The built-in 2D physics world: simulate a bouncing ball, print the
//! ground-truth captions it produces for each time chunk, and export the
//! rendered clip as a PNG filmstrip and an animated GIF.
//!
//! Run with `cargo run --example bouncing_world [OUT_DIR]`.

use std::path::PathBuf;

use physvid::annotate::segment_video;
use physvid::sim::{caption_chunks, simulate, ColorId, ObjectInit, WorldConfig};

fn main() -> physvid::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("physvid_out/bouncing_world"));
    std::fs::create_dir_all(&out)?;

    // A single elastic ball dropped left of center with a rightward push.
    let world = WorldConfig::standard(
        0.85,
        vec![ObjectInit {
            x: 10.0,
            y: 8.0,
            vx: 0.9,
            vy: 0.0,
            radius: 2.8,
            color: ColorId::Red,
        }],
    );
    let (video, states) = simulate(&world)?;
    println!(
        "simulated {} frames of {}x{} rgb",
        video.frames(),
        video.height(),
        video.width()
    );

    // Trajectory summary straight from the ground-truth state log.
    for (f, s) in states.iter().enumerate().step_by(5) {
        let o = &s.objects[0];
        println!(
            "  frame {f:>2}: pos ({:5.2}, {:5.2})  vel ({:+.2}, {:+.2})",
            o.x, o.y, o.vx, o.vy
        );
    }

    // The same chunking the training pipeline uses: 7 chunks of 3 frames.
    let intervals = segment_video(video.frames(), 7)?;
    let caps = caption_chunks(&states, &intervals);
    println!("\nglobal caption: {}", caps.global);
    for (k, (local, counter)) in caps.locals.iter().zip(&caps.counterfactuals).enumerate() {
        let (a, b) = intervals[k];
        println!("  chunk {k} [{a:>2}..{b:>2})");
        println!("    caption:        {local}");
        println!("    counterfactual: {counter}");
    }

    let strip = out.join("clip.png");
    let gif = out.join("clip.gif");
    video.save_png_strip(&strip)?;
    video.save_gif(&gif, 10)?;
    println!("\nwrote {} and {}", strip.display(), gif.display());
    Ok(())
}
