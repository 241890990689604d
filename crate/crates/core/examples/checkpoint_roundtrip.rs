//! Save a model with pruned adapters, reload it and confirm the logits are
//! bit-identical.

use mimi::adapter::{inject_adapters, AdapterPlan};
use mimi::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use mimi::{build_model, ModelSpec, Tensor};

fn main() -> mimi::Result<()> {
    let spec = ModelSpec {
        patch_size: 2,
        image_side: 8,
        stages: vec![(16, 1), (24, 1)],
        heads_per_stage: vec![2, 3],
        mlp_ratio: 2.0,
        num_classes: 5,
    };
    let mut model = build_model::<f32>(&spec, 9)?;
    inject_adapters(&mut model, &AdapterPlan::uniform(4.0, 2), 9)?;
    for v in model.adapter_mut(1).expect("slot 1").up_mut().data_mut() {
        *v = 0.25;
    }
    let pruned = model.adapter(1).expect("slot 1").prune(&[0, 2])?;
    model.set_adapter(1, Some(pruned))?;

    let dir = std::env::temp_dir().join(format!("mimi-example-{}", std::process::id()));
    save_checkpoint(&model, &[], &dir)?;
    let manifest = read_manifest(&dir)?;
    println!(
        "{} tensors, {} blob bytes, dtype {}, spec hash {}",
        manifest.tensors.len(),
        manifest.blob_bytes,
        manifest.dtype,
        &manifest.spec_hash[..12]
    );
    for a in &manifest.adapters {
        println!("  slot {} hidden {} of {} origin {:?}", a.slot, a.hidden, a.initial_hidden, a.origin);
    }

    let restored = load_checkpoint::<f32>(&dir)?.model;
    let images = Tensor::from_fn(vec![3, 8, 8], |i| (i as f32 * 0.1).cos());
    let same = model.forward(&images)? == restored.forward(&images)?;
    println!("logits identical after reload: {same}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
