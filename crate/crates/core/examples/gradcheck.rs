//! Check reverse-mode gradients against central finite differences, first
//! for a hand-written expression, then for whole models.

use mimi::autodiff::finite_diff_check;
use mimi::verify::gradcheck_suite;
use mimi::Tensor;

fn main() -> mimi::Result<()> {
    // sum(gelu(x) * x) over a 2x3 leaf.
    let x = Tensor::new(vec![2, 3], vec![-1.5, -0.2, 0.0, 0.4, 1.1, 2.5])?;
    let err = finite_diff_check(
        |tape, p| {
            let g = tape.gelu(p)?;
            let y = tape.mul(g, p)?;
            tape.sum(y)
        },
        &x,
        1e-6,
    )?;
    println!("gelu(x)*x: max relative error {err:e}");

    let suite = gradcheck_suite(12, 3)?;
    println!("{suite}");
    Ok(())
}
