//! The tape-based autodiff engine on a two-layer network, checked against
//! finite differences.
//!
//! ```text
//! cargo run --release --example autodiff
//! ```

use scratch_st::autodiff::{grad_check, Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?;
    let w1 = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w2 = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?;

    let mut g = Graph::new();
    let (xv, w1v, w2v) = (g.constant(x.clone()), g.param(w1.clone()), g.param(w2.clone()));
    let h = g.matmul(xv, w1v)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w2v)?;
    let lp = g.log_softmax(out)?;
    let loss = g.mean(lp)?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW2 {:.4?}", g.grad(w2v).expect("parameter gradient"));

    let err = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.relu(h)?;
            let out = g.matmul(h, v[2])?;
            let lp = g.log_softmax(out)?;
            g.mean(lp)
        },
        &[x, w1, w2],
        1e-6,
    )?;
    println!("max relative gradient error vs central differences: {err:.2e}");
    Ok(())
}
