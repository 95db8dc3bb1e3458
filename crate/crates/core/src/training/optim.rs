use crate::autodiff::{ParamStore, TensorError};

/// Warmup then inverse-square-root decay:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> Result<f64, TensorError> {
    if step == 0 {
        return Err(TensorError::Contract("learning-rate steps start at 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(TensorError::Contract("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` means
    /// zero. Non-finite gradients reject the whole step and leave everything
    /// untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[f64]>], lr: f64) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (g, t)) in grads.iter().zip(params.tensors()).enumerate() {
            if let Some(g) = g {
                if g.len() != t.numel() {
                    return Err(TensorError::Shape(format!("gradient {i} has {} entries for {}", g.len(), t.numel())));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite("gradient"));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
