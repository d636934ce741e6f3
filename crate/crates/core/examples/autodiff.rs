//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use hyperode_rca::tensor::{grad_check, Tape, Tensor};

fn main() -> hyperode_rca::Result<()> {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.1, -0.3])?);
    let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0])?);
    // softmax(x W) followed by a squared-norm readout
    let y = x.matmul(w)?.softmax()?;
    let loss = y.square().sum();
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", loss.item());
    println!("dL/dW = {:?}", grads.get(w).data());

    let start = Tensor::vector(vec![0.3, -1.2, 0.8, 1.9]);
    let weights = Tensor::vector(vec![0.7, -0.4, 1.1, 0.2]);
    let err = grad_check(
        |t, v| {
            let wt = t.constant(weights.clone());
            Ok(v.tanh().mul(v.sigmoid())?.layer_norm(1e-10)?.mul(wt)?.sum())
        },
        &start,
        1e-6,
    )?;
    println!("max relative error of a composite function: {err:.2e}");
    Ok(())
}
