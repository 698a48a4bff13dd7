//! Two-stage flow-matching training on a desk-scale model: stage 1 updates
//! only the chunk-caption pathway while everything else stays frozen, stage 2
//! unfreezes the full network. The run is short but real — losses, periodic
//! checkpoints, and a resumable optimizer state all land in the output
//! directory.
//!
//! Run with `cargo run --example train_tiny_model [OUT_DIR]`.

use std::path::PathBuf;

use physvid::annotate::{generate_dataset, load_train_samples, DatasetOptions};
use physvid::model::{Model, ModelConfig, ParamGroup};
use physvid::training::{train, TrainConfig};

fn main() -> physvid::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("physvid_out/train_tiny_model"));
    let data = out.join("data");
    std::fs::create_dir_all(&data)?;

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
    println!(
        "{} clips -> {} tokens each ({} per patch)",
        samples.len(),
        cfg.num_tokens(),
        cfg.patch_dim()
    );

    let mut model = Model::<f32>::new(cfg, 0)?;
    let by_group = |m: &Model<f32>, g: ParamGroup| {
        m.params()
            .iter()
            .filter(|p| p.group == g)
            .map(|p| p.tensor.numel())
            .sum::<usize>()
    };
    println!(
        "parameters: {} base + {} chunk-caption pathway",
        by_group(&model, ParamGroup::Base),
        by_group(&model, ParamGroup::Local)
    );

    let tcfg = TrainConfig {
        stage1_steps: 3,
        stage2_steps: 5,
        batch_size: 2,
        seed: 0,
        checkpoint_every: 4,
        ..TrainConfig::default()
    };
    let artifacts = train(&mut model, &samples, &tcfg, &out, None)?;

    let csv = std::fs::read_to_string(&artifacts.loss_csv)?;
    println!("\n{:>4}  {:>5}  {:>10}  {:>8}", "step", "stage", "loss", "lr");
    for line in csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let loss: f64 = parts[2].parse().unwrap_or(f64::NAN);
        println!("{:>4}  {:>5}  {loss:>10.5}  {:>8}", parts[0], parts[1], parts[3]);
    }

    println!("\nfinal checkpoint: {}", artifacts.final_model.display());
    println!("optimizer state:  {}", artifacts.final_state.display());
    println!("loss log:         {}", artifacts.loss_csv.display());
    println!("(the state file lets a later run resume bit-identically)");
    Ok(())
}
