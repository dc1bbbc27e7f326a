//! Reverse-mode gradients on the tape, checked against central differences.

use poemkit::tensor::{gradcheck, Tape, Tensor, Var};
use poemkit::Result;

fn softmax_energy<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    let logits = v[0].matmul(v[1])?;
    Ok(logits.softmax(1)?.mul(logits)?.sum())
}

fn main() -> Result<()> {
    let a = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.7).sin());
    let b = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).cos());

    let tape = Tape::new();
    let (x, w) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let loss = softmax_energy(&tape, &[x, w])?;
    tape.backward(loss)?;
    println!("loss {:.6}", loss.value().item()?);
    println!("d loss / d a = {:?}", tape.grad(x).expect("leaf gradient").data());

    let err = gradcheck(softmax_energy, &[a, b], 1e-6)?;
    println!("max relative gradient error {err:.2e}");
    Ok(())
}
