//! Dual-branch guided sampling: integrate the learned velocity field along a
//! shift-warped time grid, blending a positive branch (real chunk captions)
//! against a negative branch (physics-flipped counterfactual captions) with
//! weight `w = g - 1`.
//!
//! The model here is trained for only a few steps, so the footage is rough —
//! the point is the machinery: branch blending, seeded determinism, and the
//! exported artifact set (raw tensor, filmstrip, GIF, manifest).
//!
//! Run with `cargo run --example guided_sampling [OUT_DIR]`.

use std::path::PathBuf;

use physvid::annotate::{generate_dataset, load_train_samples, record_to_bundle, DatasetOptions};
use physvid::model::{Model, ModelConfig};
use physvid::sampling::{
    decode_tokens, export_sample, sample, time_grid, GuidanceConfig, ModelVelocity, NegativeMode,
    SamplingManifest,
};
use physvid::text::Vocab;
use physvid::training::{train, TrainConfig};

fn main() -> physvid::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("physvid_out/guided_sampling"));
    let data = out.join("data");
    std::fs::create_dir_all(&data)?;

    // The descending, shift-warped grid the integrator walks (here: 8 steps).
    let grid = time_grid(8, 8.0)?;
    println!(
        "time grid (shift 8): {}",
        grid.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" > ")
    );

    let cfg = ModelConfig {
        height: 32,
        width: 32,
        ..ModelConfig::tiny()
    };
    let dataset = generate_dataset(
        &data,
        &DatasetOptions {
            clips: 4,
            seed: 11,
            frames: cfg.frames,
            chunks: cfg.chunks(),
            force: true,
            ..DatasetOptions::default()
        },
    )?;
    let samples = load_train_samples::<f32>(&dataset, &data, &cfg)?;
    let mut model = Model::<f32>::new(cfg, 0)?;
    let tcfg = TrainConfig {
        stage1_steps: 3,
        stage2_steps: 9,
        batch_size: 2,
        ..TrainConfig::default()
    };
    println!("\ntraining {} quick steps...", tcfg.total_steps());
    train(&mut model, &samples, &tcfg, &out.join("train"), None)?;

    // Prompts (and their counterfactual negatives) come from the dataset's
    // ground-truth captions for clip 0.
    let vocab = Vocab::standard();
    let bundle = record_to_bundle(&dataset.records[0], &vocab, model.config())?;
    println!("positive chunk 0: {}", dataset.records[0].chunks[0].caption);
    println!(
        "negative chunk 0: {}",
        dataset.records[0].chunks[0].counterfactual.as_deref().unwrap_or("-")
    );

    let field = ModelVelocity::new(&model);
    for g in [1.0, 6.0] {
        let gcfg = GuidanceConfig {
            guidance: g,
            steps: 8,
            seed: 17,
            negative_mode: NegativeMode::Counterfactual,
            ..GuidanceConfig::default()
        };
        let run = sample::<f32, _>(&field, &bundle, &gcfg, &vocab)?;
        let video = decode_tokens(&run.tokens, model.config())?;
        let manifest = SamplingManifest::new(&gcfg, &bundle);
        let stem = format!("g{g}");
        let artifacts = export_sample(&out, &stem, &video, &manifest)?;
        println!(
            "\ng = {g} (blend weight w = {}): {}",
            g - 1.0,
            artifacts.gif.display()
        );
        println!("  raw video: {}", artifacts.raw.display());
        println!("  manifest:  {}", artifacts.manifest.display());
    }
    println!("\nnote: at g = 1 the blend weight is 0 and the negative branch is skipped");
    Ok(())
}
