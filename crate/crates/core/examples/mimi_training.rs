//! Iterative adapter pruning on a synthetic image task: train, score
//! neurons, remove the weakest half globally, finetune, repeat until the
//! target compression is reached.

use mimi::adapter::{inject_adapters, AdapterPlan};
use mimi::data::{generate_synthetic, SyntheticSpec};
use mimi::engine::{cycle_count_simulated, run_mimi, CycleReport, EpochMetrics, Precision, PruneSchedule, RunObserver, TrainConfig};
use mimi::scoring::{ScorerKind, SelectionMode};
use mimi::{build_model, Model, ModelSpec};

struct Progress;

impl RunObserver<f32> for Progress {
    fn on_epoch(&mut self, m: &EpochMetrics) -> mimi::Result<()> {
        println!(
            "  cycle {} epoch {}: lr {:.4} loss {:.4} train {:.3} val {:.3}",
            m.cycle, m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc
        );
        Ok(())
    }

    fn on_cycle(&mut self, _model: &Model<f32>, r: &CycleReport) -> mimi::Result<()> {
        println!(
            "cycle {}: sigma {} -> {}, removed {}, params {}, test {:.3}",
            r.cycle, r.sigma_before, r.sigma_after, r.removed, r.trainable_params, r.test_acc
        );
        Ok(())
    }
}

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
        samples_per_class: 60,
        image_side: 8,
        noise_std: 0.5,
        seed: 0,
    })?;
    let schedule = PruneSchedule {
        sigma0: 4.0,
        sigma_target: 16.0,
        rho: 0.5,
        epochs_per_cycle: 3,
        warmup_epochs: 1,
    };
    let config = TrainConfig {
        lr_peak: 0.01,
        weight_decay: 0.0,
        betas: (0.9, 0.999),
        batch_size: 16,
        seed: 0,
        precision: Precision::F32,
        record_time: false,
    };
    println!(
        "{} prune events to go from sigma {} to {}",
        cycle_count_simulated(schedule.sigma0, schedule.sigma_target, schedule.rho),
        schedule.sigma0,
        schedule.sigma_target
    );

    let mut model = build_model::<f32>(&spec, 1)?;
    inject_adapters(&mut model, &AdapterPlan::uniform(schedule.sigma0, 1), 0)?;
    let run = run_mimi(model, &schedule, &config, &data, ScorerKind::Mimi, SelectionMode::Global, &mut Progress)?;
    for (slot, a) in run.model.adapters() {
        println!("slot {slot}: {} of {} neurons kept", a.hidden(), a.initial_hidden());
    }
    Ok(())
}
