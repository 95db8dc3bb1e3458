//! CTC loss, its gradient and best-path decoding on a hand-made alignment.
//!
//! ```text
//! cargo run --release --example ctc_loss
//! ```

use scratch_st::autodiff::{Graph, Tensor};
use scratch_st::ctc::{ctc_feasible, ctc_greedy_decode, ctc_log_likelihood, ctc_loss, CtcBatchItem};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two labels (0 and 1) plus blank (2); frames favour a, a, blank, b, b.
    let favoured = [0, 0, 2, 1, 1];
    let classes = 3;
    let mut logits = vec![0.0; favoured.len() * classes];
    for (t, &c) in favoured.iter().enumerate() {
        logits[t * classes + c] = 2.0;
    }
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, favoured.len(), classes], logits)?);
    let lp = g.log_softmax(x)?;

    let labels = vec![vec![0, 1]];
    let (losses, feasible) = ctc_loss(&mut g, lp, &[favoured.len()], &labels)?;
    let total = g.sum(losses)?;
    g.backward(total)?;
    println!("loss for [a b]: {:.4} (feasible {:?})", g.value(total).item(), feasible);

    let grad = g.grad(x).expect("logits get a gradient");
    for (t, row) in grad.chunks(classes).enumerate() {
        println!("frame {t} dL/dlogit {:+.3?}", row);
    }

    let frame_lp = Tensor::new(vec![favoured.len(), classes], g.value(lp).data().to_vec())?;
    println!("best path collapses to {:?}", ctc_greedy_decode(&frame_lp));

    for target in [vec![1, 0], vec![0, 0, 1]] {
        let item = CtcBatchItem::new(frame_lp.clone(), target.clone())?;
        println!("loss for {target:?}: {:.4}", ctc_log_likelihood(&item)?);
    }
    println!("[a a a b b b] fits in 5 frames: {}", ctc_feasible(5, &[0, 0, 0, 1, 1, 1]));
    Ok(())
}
