//! Desk-scale overfit run on generated data.
//!
//! `cargo run --release --example overfit -- [steps] [width-divisor] [batch]`

use std::time::Instant;

use dbfnet::data::synth_generate;
use dbfnet::network::ModelConfig;
use dbfnet::train::{self, evaluate_model, window_means, TrainConfig, SYNTHETIC_IMAGES, SYNTHETIC_SIZE};

fn main() -> dbfnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().expect("tempdir");
    synth_generate(&dir.path().join("data"), SYNTHETIC_IMAGES, [SYNTHETIC_SIZE, SYNTHETIC_SIZE], 0)?;
    let mut cfg = TrainConfig::preset("synthetic", dir.path().join("data"))?;
    cfg.checkpoint_dir = dir.path().join("run");
    if let Some(&steps) = args.first() {
        cfg.max_steps = Some(steps);
    }
    if let Some(&d) = args.get(1) {
        cfg.model = ModelConfig::default().slimmed(d);
    }
    if let Some(&b) = args.get(2) {
        cfg.batch_size = b;
        cfg.max_epochs = cfg.max_steps.unwrap_or(500) * b / SYNTHETIC_IMAGES + 1;
    }
    let t = Instant::now();
    let out = train::train(&cfg)?;
    let secs = t.elapsed().as_secs_f64();
    let steps = out.run_log.steps().count();
    let ds = dbfnet::data::Dataset::open(cfg.dataset.clone())?;
    let report = evaluate_model(&out.model, &ds, &out.train_ids, None, &Default::default())?;
    println!("params {}", out.model.num_parameters());
    println!("{steps} steps in {secs:.1}s ({:.3}s/step)", secs / steps as f64);
    println!("train DSC {}", report.dsc);
    println!("50-step means {:?}", window_means(&out.run_log.losses(), 50));
    Ok(())
}
