//! Record a small computation on a tape, differentiate it and check against finite differences.

use grounding::autodiff::{finite_difference_check, Tape};
use grounding::Tensor;

fn main() -> grounding::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.5, 2.0, 0.25, -1.0])?;

    // f(x) = sum(sigmoid(x W))^2
    let f = |tape: &mut Tape, x| {
        let wv = tape.constant(w.clone());
        let y = tape.matmul(x, wv)?;
        let s = tape.sigmoid(y)?;
        tape.squared_norm(s)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let grad = tape.backward(out)?.wrt(&tape, leaf);
    println!("f(x) = {:.6}", tape.value(out).item());
    println!("df/dx = {:?}", grad.data());
    println!("max relative error vs central differences: {:.2e}", finite_difference_check(f, &x, 1e-5)?);
    Ok(())
}
