//! Parameter, storage and FLOP accounting at several compression ratios.

use mimi::adapter::{inject_adapters, AdapterPlan};
use mimi::cost::{adapter_flops, backbone_flops, cost_report, FLOP_CONVENTION};
use mimi::{build_model, ModelSpec};

fn main() -> mimi::Result<()> {
    let spec = ModelSpec {
        patch_size: 4,
        image_side: 32,
        stages: vec![(64, 2), (128, 2)],
        heads_per_stage: vec![4, 8],
        mlp_ratio: 4.0,
        num_classes: 10,
    };
    let bare = build_model::<f32>(&spec, 0)?;
    println!("{FLOP_CONVENTION}");
    println!("backbone forward: {} FLOPs over {} tokens", backbone_flops(&bare, spec.tokens()), spec.tokens());
    println!("one M = 64, N = 8 adapter adds {} FLOPs", adapter_flops(64, 8, spec.tokens()));
    println!();
    println!("{:>6} {:>10} {:>8} {:>10} {:>14}", "sigma", "trainable", "%", "bytes", "FLOPs");
    for sigma in [2.0, 8.0, 32.0, 128.0] {
        let mut model = bare.clone();
        inject_adapters(&mut model, &AdapterPlan::uniform(sigma, 2), 0)?;
        let c = cost_report(&model, None);
        println!(
            "{sigma:>6} {:>10} {:>8.3} {:>10} {:>14}",
            c.trainable_params, c.trainable_percent, c.storage_bytes, c.forward_flops
        );
    }
    let full = cost_report(&bare, None).full_finetuning();
    println!("full finetuning: {}", full.summary());
    Ok(())
}
