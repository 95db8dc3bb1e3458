//! Objectives, optimizer, batching, checkpoint averaging and the training loop.

mod batch;
mod optim;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::config::{parse_value, ConfigError, KeyValue};
use crate::ctc::ctc_loss;
use crate::model::{CheckpointError, Model};

pub use batch::{make_batches, Batch, Example};
pub use optim::{lr_schedule, Adam};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the CTC term.
    pub lambda: f64,
    /// Weight of the feature-anchoring L2 term (neural frontend only).
    pub gamma: f64,
    pub label_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    pub max_steps: usize,
    /// Padded target tokens (EOS included) per batch.
    pub batch_target_tokens: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub keep_best_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            gamma: 0.05,
            label_smoothing: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 4000,
            lr_factor: 1.0,
            max_steps: 50_000,
            batch_target_tokens: 20_000,
            seed: 1,
            checkpoint_every: 1000,
            keep_best_k: 10,
        }
    }
}

impl TrainConfig {
    /// Short schedule matching [`ModelConfig::desk`](crate::model::ModelConfig::desk).
    pub fn desk() -> Self {
        Self {
            warmup_steps: 400,
            max_steps: 3000,
            batch_target_tokens: 200,
            checkpoint_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let invalid = |field, msg: String| Err(ConfigError::Invalid { field, msg });
        if !(0.0..=1.0).contains(&self.lambda) {
            return invalid("lambda", format!("{} not in [0, 1]", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return invalid("gamma", format!("{} must be non-negative", self.gamma));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return invalid("label_smoothing", format!("{} not in [0, 1)", self.label_smoothing));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return invalid(field, format!("{b} not in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return invalid("adam_eps", "must be positive".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return invalid("lr_factor", "must be positive".into());
        }
        for (field, v) in [
            ("warmup_steps", self.warmup_steps),
            ("max_steps", self.max_steps),
            ("batch_target_tokens", self.batch_target_tokens),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return invalid(field, "must be at least 1".into());
            }
        }
        Ok(())
    }
}

impl KeyValue for TrainConfig {
    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "lr_factor" => self.lr_factor = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "batch_target_tokens" => self.batch_target_tokens = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "keep_best_k" => self.keep_best_k = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda", self.lambda.to_string()),
            ("gamma", self.gamma.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_target_tokens", self.batch_target_tokens.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("keep_best_k", self.keep_best_k.to_string()),
        ]
    }
}

/// Label-smoothed cross-entropy averaged over non-pad positions.
///
/// `logits` is `[B, U, V]`, `gold` holds `B·U` ids with [`PAD`](crate::data::PAD)
/// marking ignored positions. The target is `(1 - ε)·onehot + ε/V`.
pub fn mle_loss(g: &mut Graph, logits: Var, gold: &[usize], epsilon: f64) -> std::result::Result<Var, TensorError> {
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap_or(&0);
    if shape.len() != 3 || shape[0] * shape[1] != gold.len() {
        return Err(TensorError::Shape(format!("logits {shape:?} do not match {} gold ids", gold.len())));
    }
    let tokens = gold.iter().filter(|&&t| t != crate::data::PAD).count();
    if tokens == 0 {
        return Err(TensorError::Contract("every gold position is padding".into()));
    }
    if let Some(bad) = gold.iter().find(|&&t| t >= v) {
        return Err(TensorError::Contract(format!("gold id {bad} outside vocabulary of {v}")));
    }
    let mut weights = vec![0.0; gold.len() * v];
    let scale = 1.0 / tokens as f64;
    for (row, &t) in weights.chunks_exact_mut(v).zip(gold) {
        if t == crate::data::PAD {
            continue;
        }
        row.fill(epsilon / v as f64 * scale);
        row[t] += (1.0 - epsilon) * scale;
    }
    let logp = g.log_softmax(logits)?;
    let w = g.constant(Tensor::new(shape, weights)?);
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0)
}

/// Scalar terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub mle: Var,
    /// Mean CTC loss over feasible items; `None` when no item is feasible.
    pub ctc: Option<Var>,
    /// Per-frame squared distance between learned and filterbank features.
    pub nafm_l2: Option<Var>,
}

impl LossParts {
    /// `(1 - λ)·mle + λ·ctc + γ·l2`, dropping absent terms.
    pub fn combine(&self, g: &mut Graph, lambda: f64, gamma: f64) -> std::result::Result<Var, TensorError> {
        let mut total = g.scale(self.mle, 1.0 - lambda)?;
        if let Some(ctc) = self.ctc {
            let c = g.scale(ctc, lambda)?;
            total = g.add(total, c)?;
        }
        if let Some(l2) = self.nafm_l2 {
            let c = g.scale(l2, gamma)?;
            total = g.add(total, c)?;
        }
        Ok(total)
    }
}

/// Runs the model on a batch and records every loss term.
///
/// The CTC term is only built when `with_ctc` is set so that λ = 0 runs skip
/// its cost.
pub fn forward_losses(
    g: &mut Graph,
    model: &Model,
    p: &[Var],
    batch: &Batch,
    label_smoothing: f64,
    with_ctc: bool,
) -> std::result::Result<LossParts, TensorError> {
    let enc = model.encode(g, p, &batch.source)?;
    let logits = model.decode(g, p, &enc, &batch.dec_input, batch.u)?;
    let mle = mle_loss(g, logits, &batch.gold, label_smoothing)?;
    let ctc = if with_ctc {
        let lp = model.ctc_log_probs(g, p, &enc)?;
        let (losses, feasible) = ctc_loss(g, lp, &enc.lengths, &batch.labels)?;
        let n = feasible.iter().filter(|&&f| f).count();
        if n == 0 {
            None
        } else {
            let w: Vec<f64> = feasible.iter().map(|&f| if f { 1.0 / n as f64 } else { 0.0 }).collect();
            let w = g.constant(Tensor::new(vec![w.len()], w)?);
            let weighted = g.mul(losses, w)?;
            Some(g.sum(weighted)?)
        }
    } else {
        None
    };
    let nafm_l2 = match (enc.nafm_features, &batch.fbank_targets) {
        (Some(x2), Some(target)) => {
            if g.shape(x2) != target.shape() {
                return Err(TensorError::Contract(format!(
                    "learned features {:?} and filterbank targets {:?} differ in frame count",
                    g.shape(x2),
                    target.shape()
                )));
            }
            let t = g.constant(target.clone());
            let diff = g.sub(x2, t)?;
            let sq = g.mul(diff, diff)?;
            let total = g.sum(sq)?;
            let frames: usize = batch.source.lengths.iter().sum();
            Some(g.scale(total, 1.0 / frames as f64)?)
        }
        (Some(_), None) => return Err(TensorError::Contract("neural frontend needs filterbank targets".into())),
        _ => None,
    };
    Ok(LossParts { mle, ctc, nafm_l2 })
}

/// Joint objective `(1 - λ)·MLE + λ·CTC` for one batch.
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    p: &[Var],
    batch: &Batch,
    lambda: f64,
    label_smoothing: f64,
) -> std::result::Result<Var, TensorError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::Contract(format!("lambda {lambda} not in [0, 1]")));
    }
    let parts = forward_losses(g, model, p, batch, label_smoothing, lambda > 0.0)?;
    LossParts { nafm_l2: None, ..parts }.combine(g, lambda, 0.0)
}

/// Joint objective plus `γ` times the feature-anchoring term.
pub fn nafm_loss(
    g: &mut Graph,
    model: &Model,
    p: &[Var],
    batch: &Batch,
    lambda: f64,
    gamma: f64,
    label_smoothing: f64,
) -> std::result::Result<Var, TensorError> {
    let parts = forward_losses(g, model, p, batch, label_smoothing, lambda > 0.0)?;
    if parts.nafm_l2.is_none() {
        return Err(TensorError::Contract("model has no neural frontend".into()));
    }
    parts.combine(g, lambda, gamma)
}

/// Dev loss: token-level cross-entropy without smoothing over a whole set.
pub fn dev_loss(model: &Model, examples: &[Example], budget: usize) -> Result<f64> {
    let lengths: Vec<usize> = examples.iter().map(Example::target_tokens).collect();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ids in make_batches(&lengths, budget, None) {
        let refs: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::new(&refs)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let enc = model.encode(&mut g, &p, &batch.source)?;
        let logits = model.decode(&mut g, &p, &enc, &batch.dec_input, batch.u)?;
        let loss = mle_loss(&mut g, logits, &batch.gold, 0.0)?;
        let n = batch.gold.iter().filter(|&&t| t != crate::data::PAD).count();
        total += g.value(loss).item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::Data("dev set is empty".into()));
    }
    Ok(total / tokens as f64)
}

/// A parameter snapshot scored on the dev set (lower is better).
#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub step: usize,
    pub dev_score: f64,
    pub params: ParamStore,
}

/// Element-wise mean of the `k` records with the lowest dev score.
///
/// Ties in score go to the earlier step, so the choice does not depend on the
/// order of `records`. A coordinate on which all chosen snapshots agree keeps
/// that exact value.
pub fn average_checkpoints(records: &[CheckpointRecord], k: usize) -> Result<ParamStore> {
    if records.is_empty() || k == 0 {
        return Err(TrainError::Data("nothing to average".into()));
    }
    if k > records.len() {
        log::warn!("asked for the best {k} checkpoints but only {} exist; averaging all", records.len());
    }
    let mut order: Vec<&CheckpointRecord> = records.iter().collect();
    order.sort_by(|a, b| a.dev_score.total_cmp(&b.dev_score).then(a.step.cmp(&b.step)));
    order.truncate(k);
    let first = &order[0].params;
    if order.iter().any(|r| !r.params.same_layout(first)) {
        return Err(TrainError::Data("checkpoints have different parameter layouts".into()));
    }
    let mut out = first.clone();
    let n = order.len() as f64;
    for (i, t) in out.tensors_mut().iter_mut().enumerate() {
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            let base = *x;
            let mut sum = 0.0;
            let mut same = true;
            for r in &order {
                let v = r.params.tensors()[i].data()[j];
                same &= v.to_bits() == base.to_bits();
                sum += v;
            }
            *x = if same { base } else { sum / n };
        }
    }
    Ok(out)
}

/// Per-step values written to the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub mle: f64,
    pub ctc: f64,
    pub nafm_l2: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step\tlr\tmle\tctc\tnafm_l2\ttotal";

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.mle, self.ctc, self.nafm_l2, self.total
        )
    }
}

/// Where the loop writes files. Everything is optional.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    /// Receives `step-<n>.ckpt` at each evaluation and `averaged.ckpt` at the end.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub metrics: Vec<StepMetrics>,
    /// `(step, dev loss)` of every evaluation.
    pub records: Vec<(usize, f64)>,
    /// Dev loss of the final (averaged) parameters.
    pub final_dev_loss: f64,
    pub seconds: f64,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

/// Trains `model` in place and finishes with the average of the best
/// `keep_best_k` evaluated checkpoints.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &[Example],
    dev_set: &[Example],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainError::Data("training and dev sets must be non-empty".into()));
    }
    let started = Instant::now();
    let d_model = model.config().d_model;
    let lengths: Vec<usize> = train_set.iter().map(Example::target_tokens).collect();
    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut metrics = Vec::with_capacity(cfg.max_steps);
    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut history = Vec::new();
    if let Some(w) = opts.metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let with_nafm = model.config().frontend_mode == crate::model::FrontendMode::Nafm;
    let mut step = 0;
    let mut epoch = 0u64;
    'outer: loop {
        let batches = make_batches(&lengths, cfg.batch_target_tokens, Some(cfg.seed.wrapping_add(epoch)));
        epoch += 1;
        for ids in batches {
            step += 1;
            let refs: Vec<&Example> = ids.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&refs)?;
            let lr = lr_schedule(step, d_model, cfg.warmup_steps)? * cfg.lr_factor;
            let mut g = Graph::with_dropout_seed(step_seed(cfg.seed, step));
            let p = model.bind(&mut g);
            let diagnose = |what: String| {
                TrainError::Numeric(format!(
                    "step {step} (lr {lr:.3e}, items {:?}): {what}",
                    refs.iter().map(|e| e.id.as_str()).collect::<Vec<_>>()
                ))
            };
            let parts = forward_losses(&mut g, model, &p, &batch, cfg.label_smoothing, cfg.lambda > 0.0)
                .map_err(|e| match e {
                    TensorError::NonFinite(op) => diagnose(format!("non-finite value in {op}")),
                    other => other.into(),
                })?;
            let gamma = if with_nafm { cfg.gamma } else { 0.0 };
            let total = parts.combine(&mut g, cfg.lambda, gamma)?;
            let m = StepMetrics {
                step,
                lr,
                mle: g.value(parts.mle).item(),
                ctc: parts.ctc.map_or(0.0, |v| g.value(v).item()),
                nafm_l2: parts.nafm_l2.map_or(0.0, |v| g.value(v).item()),
                total: g.value(total).item(),
            };
            if !m.total.is_finite() {
                return Err(diagnose(format!("loss is {}", m.total)));
            }
            g.backward(total)?;
            let grads: Vec<Option<&[f64]>> = p.iter().map(|&v| g.grad(v)).collect();
            adam.step(model.params_mut(), &grads, lr)
                .map_err(|e| diagnose(e.to_string()))?;
            if let Some(w) = opts.metrics.as_deref_mut() {
                writeln!(w, "{}", m.to_line())?;
            }
            metrics.push(m);

            if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
                let score = dev_loss(model, dev_set, cfg.batch_target_tokens)?;
                log::info!("step {step}: train loss {:.4}, dev loss {score:.4}", m.total);
                if let Some(dir) = &opts.checkpoint_dir {
                    model.save(&dir.join(format!("step-{step}.ckpt")))?;
                }
                history.push((step, score));
                records.push(CheckpointRecord { step, dev_score: score, params: model.params().clone() });
                if cfg.keep_best_k > 0 && records.len() > cfg.keep_best_k {
                    // Drop the worst snapshot; only the best k can be averaged.
                    let worst = (0..records.len())
                        .max_by(|&a, &b| {
                            records[a]
                                .dev_score
                                .total_cmp(&records[b].dev_score)
                                .then(records[b].step.cmp(&records[a].step))
                        })
                        .expect("non-empty");
                    records.remove(worst);
                }
            }
            if step >= cfg.max_steps {
                break 'outer;
            }
        }
    }
    if cfg.keep_best_k > 0 && !records.is_empty() {
        model.set_params(average_checkpoints(&records, cfg.keep_best_k)?)?;
    }
    let final_dev_loss = dev_loss(model, dev_set, cfg.batch_target_tokens)?;
    if let Some(dir) = &opts.checkpoint_dir {
        model.save(&dir.join("averaged.ckpt"))?;
    }
    Ok(TrainOutcome {
        steps: step,
        metrics,
        records: history,
        final_dev_loss,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
