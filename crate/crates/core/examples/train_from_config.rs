//! Run a JSON-configured training job the way the command-line tool does.
//!
//! `cargo run --release --example train_from_config -- configs/toy.json`

use std::path::PathBuf;

use mimi::config::RunConfig;
use mimi::runner::{train, TrainOptions};

fn main() -> mimi::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json"));
    let config = RunConfig::from_path(&path)?;
    let outcome = train(
        &config,
        &TrainOptions {
            reproducible: true,
            ..TrainOptions::default()
        },
    )?;
    for c in &outcome.cycles {
        println!(
            "cycle {}: sigma {} params {} val {:.3} test {:.3}",
            c.cycle, c.sigma_after, c.trainable_params, c.val_acc, c.test_acc
        );
    }
    println!("reports written to {}", outcome.output_dir.display());
    Ok(())
}
