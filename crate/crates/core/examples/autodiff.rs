//! Builds a small expression on the tape, backpropagates, and compares the
//! gradient with central finite differences.

use mgml::gradcheck::{check, FD_STEP};
use mgml::tensor::{Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.3, 0.8, -0.4])?;
    let x = Tensor::matrix(1, 2, vec![1.5, -0.5])?;

    let tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let loss = xv.matmul(wv)?.relu().sum();
    tape.backward(loss)?;
    println!("loss {:.4}", loss.item());
    println!("dL/dW {:?}", wv.grad().expect("param has a gradient"));

    let result = check(&[w], FD_STEP, |t, vars| {
        Ok(t.constant(x.clone()).matmul(vars[0])?.relu().sum())
    })?;
    println!("finite differences: max rel err {:.2e} over {} entries", result.max_rel_err, result.checked);
    Ok(())
}
