//! Reverse-mode gradients on a tiny regression, checked against a finite difference.
//!
//! cargo run --example autodiff_basics

use reid_forge::autodiff::Tape;
use reid_forge::tensor::{Init, Tensor};

fn loss(w: &Tensor<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let tape = Tape::no_grad();
    let pred = tape.constant(x.clone()).matmul(tape.constant(w.clone())).unwrap();
    let err = pred.sub(tape.constant(y.clone())).unwrap();
    err.mul(err).unwrap().mean_all().unwrap().item()
}

fn main() -> reid_forge::error::Result<()> {
    let x = Tensor::<f64>::alloc([8, 3], Init::Gaussian { mean: 0.0, std: 1.0, seed: 1 })?;
    let y = Tensor::<f64>::alloc([8, 2], Init::Gaussian { mean: 0.0, std: 1.0, seed: 2 })?;
    let w = Tensor::<f64>::alloc([3, 2], Init::Gaussian { mean: 0.0, std: 0.1, seed: 3 })?;

    let tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let err = tape.constant(x.clone()).matmul(wv)?.sub(tape.constant(y.clone()))?;
    let l = err.mul(err)?.mean_all()?;
    let grads = tape.backward(l)?;
    let g = grads.wrt(wv).expect("w requires grad");

    println!("loss {:.6}", l.value().item());
    let h = 1e-5;
    for j in 0..w.numel() {
        let mut up = w.clone();
        up.data_mut()[j] += h;
        let mut down = w.clone();
        down.data_mut()[j] -= h;
        let fd = (loss(&up, &x, &y) - loss(&down, &x, &y)) / (2.0 * h);
        println!("dL/dw[{j}]  backward {:+.8}  central difference {:+.8}", g.data()[j], fd);
    }
    Ok(())
}
