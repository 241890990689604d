//! Build a small two-stage vision transformer, inject adapters and run a
//! forward pass on random images.

use mimi::adapter::{compression_state, inject_adapters, AdapterPlan};
use mimi::vit::slot_location;
use mimi::{build_model, ModelSpec, Tensor};

fn main() -> mimi::Result<()> {
    let spec = ModelSpec {
        patch_size: 4,
        image_side: 16,
        stages: vec![(32, 2), (64, 1)],
        heads_per_stage: vec![4, 8],
        mlp_ratio: 4.0,
        num_classes: 10,
    };
    let mut model = build_model::<f32>(&spec, 0)?;
    println!("{} tokens, {} blocks, {} adapter slots", spec.tokens(), spec.num_blocks(), model.num_slots());

    inject_adapters(&mut model, &AdapterPlan::uniform(8.0, 2), 1)?;
    for (slot, a) in model.adapters() {
        let (layer, kind) = slot_location(slot);
        println!("  layer {layer} {:<3} M = {:>2} N = {}", kind.name(), a.input_dim(), a.hidden());
    }
    println!("global sigma {}", compression_state(&model).global);

    let images = Tensor::from_fn(vec![2, spec.image_side, spec.image_side], |i| ((i * 31 % 17) as f32) / 17.0);
    let logits = model.forward(&images)?;
    // The head starts at zero, so logits stay zero until it is trained.
    println!("logits {:?}, max |logit| {}", logits.shape(), logits.data().iter().fold(0.0f32, |m, v| m.max(v.abs())));
    model.head_mut().weight.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = ((i % 7) as f32 - 3.0) * 0.05);
    let logits = model.forward(&images)?;
    for row in logits.data().chunks(spec.num_classes) {
        println!("  {row:.3?}");
    }
    Ok(())
}
