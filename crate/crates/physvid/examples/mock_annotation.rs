//! The annotation pipeline against the deterministic mock endpoint: render a
//! small dataset, caption every chunk from keyframe pixels, and print the
//! resulting captions next to their physics-flipped counterfactuals.
//!
//! The mock speaks the same chat protocol as a real endpoint but derives its
//! answers purely from the image bytes, so this example is fully offline and
//! reproducible.
//!
//! Run with `cargo run --example mock_annotation [OUT_DIR]`.

use std::path::PathBuf;

use physvid::annotate::{annotate_dataset, generate_dataset, AnnotateOptions, DatasetOptions};
use physvid::vlm::{flip_physics, MockVlm};

fn main() -> physvid::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("physvid_out/mock_annotation"));
    let data = out.join("data");
    std::fs::create_dir_all(&data)?;

    let opts = DatasetOptions {
        clips: 2,
        seed: 5,
        frames: 21,
        chunks: 7,
        force: true,
        ..DatasetOptions::default()
    };
    let dataset = generate_dataset(&data, &opts)?;
    println!("rendered {} clips into {}", dataset.records.len(), data.display());

    let mock = MockVlm::new();
    let annotated = annotate_dataset(
        &mock,
        &dataset,
        &data,
        &AnnotateOptions {
            chunks: 7,
            ..AnnotateOptions::default()
        },
    )?;
    println!(
        "mock endpoint answered {} chat calls\n",
        mock.calls()
    );

    let record = &annotated.records[0];
    println!("clip {}", record.clip);
    println!("global: {}\n", record.global);
    for chunk in record.chunks.iter().take(3) {
        println!("chunk {} [{}..{})", chunk.index, chunk.start, chunk.end);
        println!("  dynamics:       {}", chunk.dynamics);
        println!("  shape:          {}", chunk.shape);
        println!("  optics:         {}", chunk.optics);
        println!("  caption:        {}", chunk.caption);
        if let Some(neg) = &chunk.counterfactual {
            println!("  counterfactual: {neg}");
        }
        println!();
    }

    // The counterfactual transform is a pure function on the physics claim.
    println!("physics flips used for guidance negatives:");
    for prompt in [
        "the ball falls speeding up",
        "the ball bounces off the floor and rises",
        "the ball moves right steadily",
        "the ball stays at rest",
    ] {
        println!("  {prompt:44} -> {}", flip_physics(prompt));
    }

    let path = data.join("annotated.jsonl");
    annotated.save(&path)?;
    println!("\nwrote {} (sha256 {})", path.display(), annotated.sha256()?);
    Ok(())
}
