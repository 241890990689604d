//! Compare a pruned run against plain adapters trained at fixed sizes for
//! the same number of epochs.

use mimi::adapter::{inject_adapters, AdapterPlan};
use mimi::data::{generate_synthetic, SyntheticSpec};
use mimi::engine::{run_mimi, run_vanilla, Precision, PruneSchedule, TrainConfig, VanillaBudget};
use mimi::scoring::{ScorerKind, SelectionMode};
use mimi::{build_model, ModelSpec};

fn main() -> mimi::Result<()> {
    let spec = ModelSpec {
        patch_size: 4,
        image_side: 8,
        stages: vec![(32, 2)],
        heads_per_stage: vec![4],
        mlp_ratio: 4.0,
        num_classes: 4,
    };
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        samples_per_class: 80,
        image_side: 8,
        noise_std: 0.6,
        seed: 3,
    })?;
    let schedule = PruneSchedule {
        sigma0: 4.0,
        sigma_target: 16.0,
        rho: 0.5,
        epochs_per_cycle: 4,
        warmup_epochs: 1,
    };
    let config = TrainConfig {
        lr_peak: 0.01,
        weight_decay: 0.0,
        betas: (0.9, 0.999),
        batch_size: 16,
        seed: 3,
        precision: Precision::F32,
        record_time: false,
    };

    let mut model = build_model::<f32>(&spec, 5)?;
    inject_adapters(&mut model, &AdapterPlan::uniform(schedule.sigma0, 1), 3)?;
    let run = run_mimi(model, &schedule, &config, &data, ScorerKind::Mimi, SelectionMode::Global, &mut ())?;
    let last = run.cycles.last().expect("at least one cycle");
    println!("pruned      sigma {:>5} params {:>5} test {:.3}", last.sigma_after, last.trainable_params, last.test_acc);

    let budget = VanillaBudget::matching(&schedule);
    for sigma in [schedule.sigma0, schedule.sigma_target, 32.0] {
        let mut model = build_model::<f32>(&spec, 5)?;
        inject_adapters(&mut model, &AdapterPlan::uniform(sigma, 1), 3)?;
        let r = run_vanilla(model, &config, &data, &budget, &mut ())?.report;
        println!("fixed size  sigma {:>5} params {:>5} test {:.3}", r.sigma, r.trainable_params, r.test_acc);
    }
    Ok(())
}
