//! Log-distance and learned (PDP) attention penalties for a short sequence.
//!
//! ```text
//! cargo run --release --example distance_penalty
//! ```

use scratch_st::autodiff::{Graph, Tensor};
use scratch_st::model::{attention_logits, distance_matrix, log_penalty, pdp_penalty};

fn print_matrix(name: &str, t: usize, data: &[f64]) {
    println!("{name}");
    for row in data.chunks(t) {
        println!("  {}", row.iter().map(|x| format!("{x:6.3}")).collect::<Vec<_>>().join(" "));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = 5;
    let log_d = log_penalty(&distance_matrix(t)?)?;
    print_matrix("log distance", t, log_d.data());

    // One head, R = 3: distances beyond 3 share the last weight.
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![1, 3], vec![1.0, 0.5, 2.0])?);
    let pdp = pdp_penalty(&mut g, w, t)?;
    print_matrix("learned penalty, w = [1, 0.5, 2]", t, g.value(pdp).data());

    // With identical queries and keys the penalty alone shapes the logits.
    let q = g.constant(Tensor::full(vec![1, t, 4], 0.5));
    let logits = attention_logits(&mut g, q, q, Some(pdp))?;
    print_matrix("attention logits", t, g.value(logits).data());

    let total = g.sum(logits)?;
    g.backward(total)?;
    println!("d(sum of logits)/dw = {:?}", g.grad(w).expect("w is a parameter"));
    Ok(())
}
