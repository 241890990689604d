//! Closed-form Gaussian moments of an adapter in the identity regime and
//! the KL cost of removing each neuron, checked against sampling.

use mimi::analysis::{compare, compare_kl, identity_regime_case, kl_neuron_removal};

fn main() -> mimi::Result<()> {
    let (adapter, input) = identity_regime_case(6, 3, 11)?;
    for row in compare(&adapter, &input, 50_000, 0)? {
        println!(
            "{:<8} {}: mean {:>9.4} vs {:>9.4}   var {:>8.5} vs {:>8.5}",
            row.stage, row.index, row.analytic_mean, row.mc_mean, row.analytic_var, row.mc_var
        );
    }
    println!();
    for k in compare_kl(&adapter, &input, 50_000, 0)? {
        let detail = kl_neuron_removal(&adapter, &input, k.neuron)?;
        println!(
            "remove neuron {}: KL {:.5} (sampled {:.5}, rel. error {:.2}%), {} output dims affected",
            k.neuron,
            k.analytic,
            k.mc,
            100.0 * k.relative_error(),
            detail.kl.iter().filter(|&&v| v > 0.0).count()
        );
    }
    Ok(())
}
