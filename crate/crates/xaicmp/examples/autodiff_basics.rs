//! The reverse-mode tape that powers the gradient-based attribution
//! methods: build a computation, run backward once, and verify a gradient
//! against central finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_basics
//! ```

use xaicmp::{Tape, Tensor};

/// f(x, w) = sum(softmax_rows(x . w) * x . w) built twice: once on a tape
/// for gradients, once plainly for finite differences.
fn forward_plain(x: &Tensor, w: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = tape.input(w.clone());
    let logits = tape.matmul(xv, wv).unwrap();
    let probs = tape.softmax_rows(logits).unwrap();
    let weighted = tape.mul(probs, logits).unwrap();
    let out = tape.sum(weighted).unwrap();
    tape.value(out).unwrap().data()[0]
}

fn main() -> xaicmp::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5])?;
    let w = Tensor::new(vec![3, 3], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9])?;

    // one forward pass on the tape, one backward sweep for all gradients
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = tape.input(w.clone());
    let logits = tape.matmul(xv, wv)?;
    let probs = tape.softmax_rows(logits)?;
    let weighted = tape.mul(probs, logits)?;
    let out = tape.sum(weighted)?;
    println!("f(x, w) = {:.6}", tape.value(out)?.data()[0]);

    let grads = tape.backward(out)?;
    let gx = grads.wrt(xv).expect("x is an input");
    let gw = grads.wrt(wv).expect("w is an input");
    println!("df/dx: {:?}", gx.shape());
    println!("df/dw: {:?}", gw.shape());

    // spot-check every x entry against central differences
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (forward_plain(&plus, &w) - forward_plain(&minus, &w)) / (2.0 * h);
        worst = worst.max((gx.data()[i] - fd).abs());
        println!(
            "  x[{i}]: autodiff {:+.6}  finite-diff {:+.6}",
            gx.data()[i],
            fd
        );
    }
    println!("largest |autodiff - finite-diff| over x: {worst:.2e}");
    Ok(())
}
