//! CTC with translation tokens as labels, used as an auxiliary loss on the
//! encoder.
//!
//! The blank symbol is the last class (index `V` for a `V`-token vocabulary).
//! All dynamic programming runs in log space with a finite floor so the tape
//! never sees infinities.

use crate::autodiff::{Graph, Tensor, TensorError, Var};

/// Stand-in for log(0) inside the forward/backward recursions.
pub const LOG_ZERO: f64 = -1e30;

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames a CTC alignment of `labels` needs: one per label
/// plus a separating blank between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether a valid alignment exists within `frames` encoder frames.
pub fn ctc_feasible(frames: usize, labels: &[usize]) -> bool {
    frames > 0 && frames >= min_frames(labels)
}

/// One utterance's CTC inputs.
#[derive(Clone, Debug)]
pub struct CtcBatchItem {
    /// `[T, V+1]` per-frame log distribution; the last class is blank.
    pub log_probs: Tensor,
    pub labels: Vec<usize>,
    pub feasible: bool,
}

impl CtcBatchItem {
    pub fn new(log_probs: Tensor, labels: Vec<usize>) -> Result<Self, TensorError> {
        if log_probs.rank() != 2 || log_probs.shape()[1] < 2 {
            return Err(TensorError::Shape(format!(
                "ctc log_probs must be [T, V+1], got {:?}",
                log_probs.shape()
            )));
        }
        let classes = log_probs.shape()[1];
        let blank = classes - 1;
        if labels.is_empty() {
            return Err(TensorError::Contract("ctc labels must be non-empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
            return Err(TensorError::Contract(format!(
                "label {bad} collides with blank or exceeds the {blank}-token vocabulary"
            )));
        }
        for (t, row) in log_probs.data().chunks_exact(classes).enumerate() {
            let mass: f64 = row.iter().map(|x| x.exp()).sum();
            if (mass - 1.0).abs() > 1e-6 {
                return Err(TensorError::Domain(format!(
                    "frame {t} log-probabilities sum to {mass} in probability space"
                )));
            }
        }
        let feasible = ctc_feasible(log_probs.shape()[0], &labels);
        Ok(Self { log_probs, labels, feasible })
    }

    pub fn blank(&self) -> usize {
        self.log_probs.shape()[1] - 1
    }
}

/// `-log P(labels | log_probs)` for one item.
pub fn ctc_log_likelihood(item: &CtcBatchItem) -> Result<f64, TensorError> {
    if !item.feasible {
        return Err(TensorError::Contract(format!(
            "{} frames cannot align {} labels; skip this item",
            item.log_probs.shape()[0],
            item.labels.len()
        )));
    }
    let classes = item.log_probs.shape()[1];
    Ok(forward_backward(item.log_probs.data(), classes, &item.labels, false).0)
}

/// Loss and, optionally, its gradient with respect to every log-probability.
///
/// `log_probs` is a row-major `[T, classes]` block with blank = `classes - 1`.
fn forward_backward(log_probs: &[f64], classes: usize, labels: &[usize], want_grad: bool) -> (f64, Vec<f64>) {
    let blank = classes - 1;
    let frames = log_probs.len() / classes;
    let states: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = states.len();
    let lp = |t: usize, s: usize| log_probs[t * classes + states[s]];
    // Skipping over the blank at s-1 is allowed unless it would merge repeats.
    let can_skip = |s: usize| s >= 2 && states[s] != blank && states[s] != states[s - 2];

    let mut alpha = vec![LOG_ZERO; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc <= LOG_ZERO { LOG_ZERO } else { acc + lp(t, s) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !want_grad {
        return (-log_p, Vec::new());
    }

    let mut beta = vec![LOG_ZERO; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc <= LOG_ZERO { LOG_ZERO } else { acc + lp(t, s) };
        }
    }

    // d(-log P)/d lp[t][k] = -(occupancy of class k at frame t).
    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a <= LOG_ZERO || b <= LOG_ZERO {
                continue;
            }
            let occupancy = (a + b - lp(t, s) - log_p).exp();
            grad[t * classes + states[s]] -= occupancy;
        }
    }
    (-log_p, grad)
}

/// Per-item CTC losses for a padded batch, recorded on the tape.
///
/// `log_probs` is `[B, T, V+1]`; item `b` uses its first `lengths[b]` frames.
/// Infeasible items get loss 0 and no gradient; the returned flags say which
/// items counted.
pub fn ctc_loss(
    g: &mut Graph,
    log_probs: Var,
    lengths: &[usize],
    labels: &[Vec<usize>],
) -> Result<(Var, Vec<bool>), TensorError> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() || shape[0] != labels.len() {
        return Err(TensorError::Shape(format!(
            "ctc_loss expects [B, T, C] with B = {} items, got {shape:?}",
            lengths.len()
        )));
    }
    let (batch, max_t, classes) = (shape[0], shape[1], shape[2]);
    let blank = classes - 1;
    let data = g.value(log_probs).data();
    let mut losses = vec![0.0; batch];
    let mut feasible = vec![false; batch];
    let mut grads = vec![0.0; data.len()];
    for b in 0..batch {
        let len = lengths[b].min(max_t);
        if labels[b].iter().any(|&l| l >= blank) {
            return Err(TensorError::Contract(format!("item {b} has a label outside the vocabulary")));
        }
        if labels[b].is_empty() || !ctc_feasible(len, &labels[b]) {
            continue;
        }
        feasible[b] = true;
        let off = b * max_t * classes;
        let block = &data[off..off + len * classes];
        let (loss, grad) = forward_backward(block, classes, &labels[b], true);
        losses[b] = loss;
        grads[off..off + len * classes].copy_from_slice(&grad);
    }
    let per_item = max_t * classes;
    let out = g.custom(
        log_probs,
        Tensor::new(vec![batch], losses)?,
        Box::new(move |upstream, input_grad| {
            for (b, &u) in upstream.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                let range = b * per_item..(b + 1) * per_item;
                for (acc, gv) in input_grad[range.clone()].iter_mut().zip(&grads[range]) {
                    *acc += u * gv;
                }
            }
        }),
    )?;
    Ok((out, feasible))
}

/// Best-path decoding: frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let classes = log_probs.last_dim();
    let blank = classes - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks_exact(classes) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(frames: usize, classes: usize) -> Tensor {
        Tensor::full(vec![frames, classes], -(classes as f64).ln())
    }

    #[test]
    fn feasibility() {
        assert!(ctc_feasible(3, &[0, 1, 2]));
        assert!(!ctc_feasible(3, &[0, 0, 1]));
        assert!(ctc_feasible(4, &[0, 0, 1]));
        assert!(!ctc_feasible(0, &[0]));
    }

    #[test]
    fn single_frame_single_label() {
        let item = CtcBatchItem::new(uniform(1, 2), vec![0]).unwrap();
        assert!((ctc_log_likelihood(&item).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let item = CtcBatchItem::new(uniform(2, 2), vec![0]).unwrap();
        let loss = ctc_log_likelihood(&item).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn infeasible_item_is_contract_error() {
        let item = CtcBatchItem::new(uniform(3, 3), vec![0, 0, 1]).unwrap();
        assert!(!item.feasible);
        assert!(matches!(ctc_log_likelihood(&item), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unnormalized_rows_rejected() {
        assert!(CtcBatchItem::new(Tensor::zeros(vec![2, 3]), vec![0]).is_err());
    }

    #[test]
    fn greedy_collapse() {
        let peaked = |ids: &[usize], classes: usize| {
            let mut data = vec![-20.0; ids.len() * classes];
            for (t, &i) in ids.iter().enumerate() {
                data[t * classes + i] = 0.0;
            }
            Tensor::new(vec![ids.len(), classes], data).unwrap()
        };
        // classes: a=0, b=1, blank=2
        assert_eq!(ctc_greedy_decode(&peaked(&[0, 0, 2, 1], 3)), vec![0, 1]);
        assert_eq!(ctc_greedy_decode(&peaked(&[2, 2, 2], 3)), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&peaked(&[0, 2, 0], 3)), vec![0, 0]);
    }

    #[test]
    fn batched_loss_skips_infeasible_and_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (classes, max_t) = (4, 5);
        let mut rows = Vec::new();
        for _ in 0..2 * max_t {
            let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = crate::autodiff::logsumexp(&logits);
            rows.extend(logits.iter().map(|l| l - lse));
        }
        let mut g = Graph::new();
        let lp = g.param(Tensor::new(vec![2, max_t, classes], rows.clone()).unwrap());
        let labels = vec![vec![0, 1], vec![2, 2, 2]];
        let (losses, feasible) = ctc_loss(&mut g, lp, &[3, 4], &labels).unwrap();
        assert_eq!(feasible, vec![true, false]);
        let direct = CtcBatchItem::new(
            Tensor::new(vec![3, classes], rows[..3 * classes].to_vec()).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let v = g.value(losses).data().to_vec();
        assert!((v[0] - ctc_log_likelihood(&direct).unwrap()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        let total = g.sum(losses).unwrap();
        g.backward(total).unwrap();
        let grad = g.grad(lp).unwrap();
        // Padding frames of item 0 and all of item 1 receive nothing.
        assert!(grad[3 * classes..].iter().all(|&x| x == 0.0));
    }
}
