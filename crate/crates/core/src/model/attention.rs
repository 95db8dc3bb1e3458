//! Distance penalties, positional encodings and scaled dot-product attention.

use crate::autodiff::{Graph, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// `D[i][j] = |i - j| + 1` as a `[T, T]` tensor.
pub fn distance_matrix(t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(TensorError::Contract("distance matrix needs T >= 1".into()));
    }
    let data = (0..t * t).map(|k| ((k / t).abs_diff(k % t) + 1) as f64).collect();
    Tensor::new(vec![t, t], data)
}

/// Natural log of every distance.
pub fn log_penalty(d: &Tensor) -> Result<Tensor> {
    if let Some(bad) = d.data().iter().find(|&&x| x < 1.0) {
        return Err(TensorError::Domain(format!("distance {bad} is below 1")));
    }
    Tensor::new(d.shape().to_vec(), d.data().iter().map(|x| x.ln()).collect())
}

/// Index into a length-`r` weight vector for each distance: `min(D, R) - 1`.
pub fn pdp_indices(t: usize, r: usize) -> Vec<usize> {
    (0..t * t).map(|k| ((k / t).abs_diff(k % t) + 1).min(r) - 1).collect()
}

/// Per-head learned penalty `log(D) * w[min(D, R)]` recorded on the tape.
///
/// `w` is `[H, R]`; the result is `[H, T, T]` and gradients flow to `w`.
pub fn pdp_penalty(g: &mut Graph, w: Var, t: usize) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape(format!("pdp weights must be [H, R], got {shape:?}")));
    }
    let (h, r) = (shape[0], shape[1]);
    let log_d = g.constant(log_penalty(&distance_matrix(t)?)?);
    let by_distance = g.permute(w, &[1, 0])?;
    let gathered = g.embedding(by_distance, &pdp_indices(t, r))?;
    let gathered = g.reshape(gathered, &[t, t, h])?;
    let per_head = g.permute(gathered, &[2, 0, 1])?;
    g.mul(per_head, log_d)
}

/// Sinusoidal position table `[T, d]`: even columns sine, odd columns cosine.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(TensorError::Contract(format!("d_model {d} must be even and positive")));
    }
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Attention logits `Q Kᵀ / sqrt(d_head) - penalty` for `[.., T, d_head]`
/// inputs. The penalty broadcasts over leading axes.
pub fn attention_logits(g: &mut Graph, q: Var, k: Var, penalty: Option<Var>) -> Result<Var> {
    let d_head = *g.shape(q).last().unwrap_or(&1);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt())?;
    match penalty {
        Some(p) => g.sub(scores, p),
        None => Ok(scores),
    }
}

/// One attention head: `masked_softmax(Q Kᵀ / sqrt(d_head) - penalty) V`.
pub fn attention_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    penalty: Option<Var>,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let logits = attention_logits(g, q, k, penalty)?;
    let weights = g.masked_softmax(logits, mask)?;
    g.batch_matmul(weights, v, false)
}
