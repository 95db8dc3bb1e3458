use super::{Graph, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh graph from leaf vars (one per entry of
/// `inputs`). Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {step}")));
    }
    let eval = |point: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::Contract("grad_check needs a scalar function".into()));
        }
        if !v.item().is_finite() {
            return Err(TensorError::NonFinite("grad_check evaluation"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut point = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + step;
            let up = eval(&point)?;
            point[i].data_mut()[j] = orig - step;
            let down = eval(&point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
