//! Reverse-mode autodiff on the shared tape.
//!
//! Builds `loss = mse(silu(x · W + b), y)`, backpropagates once, and checks
//! every gradient entry against central finite differences. Also shows the
//! tape's non-finite guard: feeding an overflow through a checked tape is an
//! error, not a silent NaN.
//!
//! Run with `cargo run --example autodiff_scalar_field`.

use physvid::stream_rng;
use physvid::tensor::{Tape, Tensor};

fn loss_value(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let bv = tape.leaf(b);
    let yv = tape.leaf(y);
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.add_rows(h, bv).unwrap();
    let h = tape.silu(h).unwrap();
    let loss = tape.mse(h, yv).unwrap();
    tape.value(loss)[0]
}

fn main() -> physvid::Result<()> {
    let mut rng = stream_rng(7, 0);
    let x = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 4], 0.5, &mut rng).requires_grad(true);
    let b = Tensor::<f64>::randn(&[4], 0.1, &mut rng).requires_grad(true);
    let y = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);

    // One forward + backward pass.
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let bv = tape.leaf(&b);
    let yv = tape.leaf(&y);
    let h = tape.matmul(xv, wv)?;
    let h = tape.add_rows(h, bv)?;
    let h = tape.silu(h)?;
    let loss = tape.mse(h, yv)?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss)[0]);
    println!("tape holds {} nodes", tape.len());

    // Compare the analytic weight gradient against central differences.
    let grad_w = tape.grad_tensor(wv).expect("W requires grad");
    let eps = 1e-6;
    let mut max_err: f64 = 0.0;
    for i in 0..w.numel() {
        let mut wp = w.clone();
        wp.data_mut()[i] += eps;
        let mut wm = w.clone();
        wm.data_mut()[i] -= eps;
        let numeric = (loss_value(&x, &wp, &b, &y) - loss_value(&x, &wm, &b, &y)) / (2.0 * eps);
        let analytic = grad_w.data()[i];
        max_err = max_err.max((numeric - analytic).abs());
    }
    println!("max |analytic - finite difference| over dL/dW = {max_err:.3e}");
    assert!(max_err < 1e-7, "gradients disagree with finite differences");

    // The checked tape refuses to produce non-finite values.
    let mut guarded: Tape<f64> = Tape::new();
    let big = guarded.constant(&[1], vec![1e308]);
    let overflow = guarded
        .mul(big, big)
        .and_then(|sq| guarded.mul(sq, big));
    println!("1e308^3 on a checked tape -> {overflow:?}");
    assert!(overflow.is_err(), "overflow must surface as an error");

    println!("ok: gradients verified, non-finite guard active");
    Ok(())
}
