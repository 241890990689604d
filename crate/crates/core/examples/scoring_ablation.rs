//! Score the neurons of a briefly trained model with every scorer and show
//! how global and per-adapter selection distribute the removals.

use mimi::adapter::{inject_adapters, AdapterPlan};
use mimi::data::{generate_synthetic, SyntheticSpec};
use mimi::engine::{run_vanilla, Precision, TrainConfig, VanillaBudget};
use mimi::scoring::{select, ScorerKind, SelectionMode};
use mimi::{build_model, ModelSpec};

fn main() -> mimi::Result<()> {
    let spec = ModelSpec {
        patch_size: 4,
        image_side: 8,
        stages: vec![(16, 2)],
        heads_per_stage: vec![2],
        mlp_ratio: 2.0,
        num_classes: 3,
    };
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        samples_per_class: 40,
        image_side: 8,
        noise_std: 0.4,
        seed: 2,
    })?;
    let config = TrainConfig {
        lr_peak: 0.01,
        weight_decay: 0.0,
        betas: (0.9, 0.999),
        batch_size: 16,
        seed: 2,
        precision: Precision::F64,
        record_time: false,
    };
    let mut model = build_model::<f64>(&spec, 2)?;
    inject_adapters(&mut model, &AdapterPlan::uniform(2.0, 1), 2)?;
    let budget = VanillaBudget {
        total_epochs: 3,
        epochs_per_cycle: 3,
        warmup_epochs: 1,
    };
    let model = run_vanilla(model, &config, &data, &budget, &mut ())?.model;
    let batches = data.train.batches::<f64>(config.batch_size, None);

    for scorer in [ScorerKind::Mimi, ScorerKind::I0, ScorerKind::Grad, ScorerKind::Act, ScorerKind::Random] {
        let table = scorer.score(&model, &batches, 0)?;
        print!("{:<6}", scorer.name());
        let has_down = table.entries.iter().all(|e| e.down_score.is_some());
        for mode in [SelectionMode::Global, SelectionMode::Local, SelectionMode::LocalDw] {
            if mode == SelectionMode::LocalDw && !has_down {
                continue;
            }
            let plan = select(&table, 0.5, mode)?;
            let kept: Vec<usize> = plan.keep.values().map(Vec::len).collect();
            print!("  {mode:?}: kept {kept:?}");
        }
        println!();
    }
    Ok(())
}
