//! A single bottleneck adapter: forward pass, identity at init, neuron
//! pruning and the compression ratio.

use mimi::adapter::{hidden_for_sigma, Adapter, Sigma};
use mimi::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mimi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 16;
    let n = hidden_for_sigma(m, Sigma::Finite(4.0))?.expect("finite sigma");
    let mut adapter = Adapter::<f64>::init(m, n, &mut rng)?;
    println!("M = {m}, N = {n}, params = {}, sigma = {}", adapter.param_count(), adapter.compression());

    // Freshly initialized adapters have a zero up-projection and pass input through.
    let h = Tensor::from_fn(vec![3, m], |i| (i as f64 * 0.37).sin());
    assert_eq!(adapter.forward(&h)?, h);

    for (i, v) in adapter.up_mut().data_mut().iter_mut().enumerate() {
        *v = ((i * 7 % 11) as f64 - 5.0) / 10.0;
    }
    let full = adapter.forward(&h)?;

    // Zeroing a neuron and physically removing it give the same output.
    let mut zeroed = adapter.clone();
    zeroed.zero_neuron(2)?;
    let keep: Vec<usize> = (0..n).filter(|&j| j != 2).collect();
    let pruned = adapter.prune(&keep)?;
    let diff = zeroed
        .forward(&h)?
        .data()
        .iter()
        .zip(pruned.forward(&h)?.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "after removing neuron 2: N = {}, sigma = {:.3}, origin = {:?}, max |zeroed - pruned| = {diff:e}",
        pruned.hidden(),
        pruned.compression(),
        pruned.origin()
    );
    let changed = full.data().iter().zip(pruned.forward(&h)?.data()).filter(|(a, b)| a != b).count();
    println!("{changed} of {} outputs changed by the removal", full.len());
    Ok(())
}
