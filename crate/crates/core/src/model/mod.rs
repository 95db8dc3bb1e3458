//! Transformer encoder-decoder for speech translation.
//!
//! The encoder reads stacked filterbank rows (or learned features from raw
//! frames) and applies self-attention with a distance penalty; the decoder is
//! a standard causal Transformer decoder. A CTC head sits on the encoder
//! output for the auxiliary loss.

mod attention;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::config::{parse_value, ConfigError, KeyValue};
use crate::frontend::{FeatureSequence, Stage, STACK, WINDOW_SAMPLES};

pub use attention::{
    attention_head, attention_logits, distance_matrix, log_penalty, pdp_indices, pdp_penalty,
    sinusoidal_encoding,
};
pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};

type Result<T> = std::result::Result<T, TensorError>;

/// Width of one filterbank frame after deltas, and of the neural features.
pub const D_SPEECH: usize = 120;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyMode {
    None,
    Log,
    Pdp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrontendMode {
    Filterbank,
    Nafm,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!(
                        "unknown value {other:?}, expected one of {}",
                        [$($text),+].join("|")
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $(Self::$variant => $text,)+
                })
            }
        }
    };
}

text_enum!(PenaltyMode { None => "none", Log => "log", Pdp => "pdp" });
text_enum!(FrontendMode { Filterbank => "filterbank", Nafm => "nafm" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Target vocabulary size including the reserved ids.
    pub vocab_size: usize,
    pub penalty_mode: PenaltyMode,
    /// Longest distance with its own learned penalty weight.
    pub max_distance: usize,
    pub dropout: f64,
    pub ds_init_alpha: f64,
    pub frontend_mode: FrontendMode,
    /// Inner width of the two feed-forward blocks of the neural feature model.
    pub nafm_d_ff: usize,
    pub pre_ln: bool,
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_enc: 4,
            n_dec: 2,
            d_model: 64,
            d_head: 16,
            heads: 4,
            d_ff: 256,
            vocab_size,
            penalty_mode: PenaltyMode::Log,
            max_distance: 512,
            dropout: 0.1,
            ds_init_alpha: 0.5,
            frontend_mode: FrontendMode::Filterbank,
            nafm_d_ff: 256,
            pre_ln: false,
        }
    }

    /// The full-size recipe: 12 encoder and 6 decoder layers, width 256.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            n_enc: 12,
            n_dec: 6,
            d_model: 256,
            d_head: 64,
            heads: 4,
            d_ff: 4096,
            dropout: 0.2,
            nafm_d_ff: 4096,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let invalid = |field, msg: String| Err(ConfigError::Invalid { field, msg });
        for (field, v) in [
            ("n_enc", self.n_enc),
            ("n_dec", self.n_dec),
            ("d_head", self.d_head),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_distance", self.max_distance),
            ("nafm_d_ff", self.nafm_d_ff),
        ] {
            if v == 0 {
                return invalid(field, "must be at least 1".into());
            }
        }
        if self.d_model != self.heads * self.d_head {
            return invalid(
                "d_model",
                format!("{} != heads {} * d_head {}", self.d_model, self.heads, self.d_head),
            );
        }
        if self.d_model % 2 != 0 {
            return invalid("d_model", "must be even for sinusoidal positions".into());
        }
        if self.vocab_size <= crate::data::NUM_RESERVED {
            return invalid("vocab_size", format!("{} leaves no room for text tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if !(self.ds_init_alpha > 0.0 && self.ds_init_alpha.is_finite()) {
            return invalid("ds_init_alpha", format!("{} must be positive", self.ds_init_alpha));
        }
        Ok(())
    }

    /// Width of one encoder input row.
    pub fn input_dim(&self) -> usize {
        match self.frontend_mode {
            FrontendMode::Filterbank => STACK * D_SPEECH,
            FrontendMode::Nafm => WINDOW_SAMPLES,
        }
    }
}

impl KeyValue for ModelConfig {
    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "n_enc" => self.n_enc = parse_value(key, value)?,
            "n_dec" => self.n_dec = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_head" => self.d_head = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "penalty_mode" => self.penalty_mode = parse_value(key, value)?,
            "max_distance" => self.max_distance = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "ds_init_alpha" => self.ds_init_alpha = parse_value(key, value)?,
            "frontend_mode" => self.frontend_mode = parse_value(key, value)?,
            "nafm_d_ff" => self.nafm_d_ff = parse_value(key, value)?,
            "pre_ln" => self.pre_ln = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_enc", self.n_enc.to_string()),
            ("n_dec", self.n_dec.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_head", self.d_head.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("penalty_mode", self.penalty_mode.to_string()),
            ("max_distance", self.max_distance.to_string()),
            ("dropout", self.dropout.to_string()),
            ("ds_init_alpha", self.ds_init_alpha.to_string()),
            ("frontend_mode", self.frontend_mode.to_string()),
            ("nafm_d_ff", self.nafm_d_ff.to_string()),
            ("pre_ln", self.pre_ln.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    ln_attn: Norm,
    ffn: FeedForward,
    ln_ffn: Norm,
    pdp: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    ln_self: Norm,
    cross: Attention,
    ln_cross: Norm,
    ffn: FeedForward,
    ln_ffn: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Nafm {
    proj: Linear,
    block1: FeedForward,
    ln1: Norm,
    block2: FeedForward,
    ln2: Norm,
}

/// Uniform draw in `±sqrt(6 / (fan_in + fan_out)) * scale`.
fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.store.insert(name, t).expect("parameter names are unique")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, scale: f64) -> Linear {
        let w = xavier(self.rng, fan_in, fan_out, scale);
        Linear {
            w: self.add(format!("{name}.w"), w),
            b: self.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), Tensor::full(vec![d], 1.0)),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize, scale: f64) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, scale),
            k: self.linear(&format!("{name}.k"), d, d, scale),
            v: self.linear(&format!("{name}.v"), d, d, scale),
            o: self.linear(&format!("{name}.o"), d, d, scale),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize, scale: f64) -> FeedForward {
        FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff, scale),
            outer: self.linear(&format!("{name}.outer"), d_ff, d, scale),
        }
    }
}

/// Padded batch of encoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    /// `[B, T, d_in]`, zero beyond each item's length.
    pub frames: Tensor,
    /// Valid rows per item.
    pub lengths: Vec<usize>,
}

impl SourceBatch {
    /// Pads feature sequences of one stage into a batch. Raw frames are padded
    /// to a multiple of the stacking factor.
    pub fn from_sequences(seqs: &[&FeatureSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| TensorError::Contract("empty batch".into()))?;
        let (stage, d) = (first.stage(), first.dim());
        if seqs.iter().any(|s| s.stage() != stage || s.is_empty()) {
            return Err(TensorError::Contract("batch mixes feature stages or has empty items".into()));
        }
        let mut t = seqs.iter().map(|s| s.num_frames()).max().unwrap_or(0);
        if stage == Stage::Raw400 {
            t = t.div_ceil(STACK) * STACK;
        }
        let mut data = vec![0.0; seqs.len() * t * d];
        for (b, s) in seqs.iter().enumerate() {
            data[b * t * d..b * t * d + s.data().len()].copy_from_slice(s.data());
        }
        Ok(Self {
            frames: Tensor::new(vec![seqs.len(), t, d], data)?,
            lengths: seqs.iter().map(|s| s.num_frames()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Encoder states for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, T', d_model]`.
    pub states: Var,
    /// Valid encoder positions per item.
    pub lengths: Vec<usize>,
    /// Pre-softmax self-attention logits per layer, `[B, H, T', T']`.
    pub attn_logits: Vec<Var>,
    /// Learned 120-dimensional features `[B, T, 120]`, zero on padding (NAFM only).
    pub nafm_features: Option<Var>,
}

impl EncoderOutput {
    pub fn max_len(&self, g: &Graph) -> usize {
        g.shape(self.states)[1]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    input_proj: Linear,
    nafm: Option<Nafm>,
    encoder: Vec<EncoderLayer>,
    enc_final: Option<Norm>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_final: Option<Norm>,
    out_proj: Linear,
    ctc_proj: Linear,
}

/// `key_valid[b][j]` expanded to a `[B, H, Tq, Tk]` mask.
fn key_padding_mask(lengths: &[usize], heads: usize, tq: usize, tk: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(lengths.len() * heads * tq * tk);
    for &len in lengths {
        for _ in 0..heads * tq {
            mask.extend((0..tk).map(|j| j < len));
        }
    }
    mask
}

fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

impl Model {
    /// Fresh parameters. Weights inside encoder/decoder layer `l` (1-based)
    /// are drawn uniformly in `±sqrt(6 / (fan_in + fan_out)) * α / sqrt(l)`;
    /// all other matrices use plain Xavier bounds. Biases start at 0, layer
    /// norms at gain 1, penalty weights at 1.
    pub fn new(cfg: ModelConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let d = cfg.d_model;
        let nafm = (cfg.frontend_mode == FrontendMode::Nafm).then(|| Nafm {
            proj: b.linear("nafm.proj", WINDOW_SAMPLES, D_SPEECH, 1.0),
            block1: b.ffn("nafm.block1", D_SPEECH, cfg.nafm_d_ff, 1.0),
            ln1: b.norm("nafm.ln1", D_SPEECH),
            block2: b.ffn("nafm.block2", D_SPEECH, cfg.nafm_d_ff, 1.0),
            ln2: b.norm("nafm.ln2", D_SPEECH),
        });
        let input_proj = b.linear("input_proj", STACK * D_SPEECH, d, 1.0);
        let encoder = (1..=cfg.n_enc)
            .map(|l| {
                let scale = cfg.ds_init_alpha / (l as f64).sqrt();
                let name = format!("enc.{l}");
                EncoderLayer {
                    attn: b.attention(&format!("{name}.attn"), d, scale),
                    ln_attn: b.norm(&format!("{name}.ln_attn"), d),
                    ffn: b.ffn(&format!("{name}.ffn"), d, cfg.d_ff, scale),
                    ln_ffn: b.norm(&format!("{name}.ln_ffn"), d),
                    pdp: (cfg.penalty_mode == PenaltyMode::Pdp).then(|| {
                        b.add(format!("{name}.pdp"), Tensor::full(vec![cfg.heads, cfg.max_distance], 1.0))
                    }),
                }
            })
            .collect();
        let enc_final = cfg.pre_ln.then(|| b.norm("enc.final", d));
        let embed = {
            let t = xavier(b.rng, cfg.vocab_size, d, 1.0);
            b.add("embed".into(), t)
        };
        let decoder = (1..=cfg.n_dec)
            .map(|l| {
                let scale = cfg.ds_init_alpha / (l as f64).sqrt();
                let name = format!("dec.{l}");
                DecoderLayer {
                    self_attn: b.attention(&format!("{name}.self_attn"), d, scale),
                    ln_self: b.norm(&format!("{name}.ln_self"), d),
                    cross: b.attention(&format!("{name}.cross"), d, scale),
                    ln_cross: b.norm(&format!("{name}.ln_cross"), d),
                    ffn: b.ffn(&format!("{name}.ffn"), d, cfg.d_ff, scale),
                    ln_ffn: b.norm(&format!("{name}.ln_ffn"), d),
                }
            })
            .collect();
        let dec_final = cfg.pre_ln.then(|| b.norm("dec.final", d));
        let out_proj = b.linear("out_proj", d, cfg.vocab_size, 1.0);
        let ctc_proj = b.linear("ctc_proj", d, cfg.vocab_size + 1, 1.0);
        let params = b.store;
        Ok(Self {
            cfg,
            params,
            input_proj,
            nafm,
            encoder,
            enc_final,
            embed,
            decoder,
            dec_final,
            out_proj,
            ctc_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Swaps in parameters with exactly this model's layout.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(TensorError::Contract("parameter layout does not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Puts every parameter on the tape; returned vars are indexed by `ParamId`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Like [`Model::bind`] but without gradients (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind_frozen(g)
    }

    fn linear(&self, g: &mut Graph, p: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[l.w.index()])?;
        g.add(y, p[l.b.index()])
    }

    fn norm(&self, g: &mut Graph, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, p[n.gain.index()], p[n.bias.index()], LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, p: &[Var], f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(g, p, f.inner, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.cfg.dropout)?;
        self.linear(g, p, f.outer, h)
    }

    /// `[B, T, d] -> [B, H, T, d_head]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.cfg.heads, self.cfg.d_head])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        g: &mut Graph,
        p: &[Var],
        a: Attention,
        xq: Var,
        xkv: Var,
        penalty: Option<Var>,
        mask: &[bool],
        logits_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.linear(g, p, a.q, xq)?;
        let k = self.linear(g, p, a.k, xkv)?;
        let v = self.linear(g, p, a.v, xkv)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let logits = attention_logits(g, q, k, penalty)?;
        if let Some(out) = logits_out {
            out.push(logits);
        }
        let weights = g.masked_softmax(logits, Some(mask))?;
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let s = g.shape(ctx).to_vec();
        let ctx = g.reshape(ctx, &[s[0], s[1], self.cfg.d_model])?;
        self.linear(g, p, a.o, ctx)
    }

    /// Residual wrapper: post-LN `LN(x + drop(f(x)))` or pre-LN `x + drop(f(LN(x)))`.
    fn sublayer(
        &self,
        g: &mut Graph,
        p: &[Var],
        norm: Norm,
        x: Var,
        f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    ) -> Result<Var> {
        if self.cfg.pre_ln {
            let h = self.norm(g, p, norm, x)?;
            let h = f(g, h)?;
            let h = g.dropout(h, self.cfg.dropout)?;
            g.add(x, h)
        } else {
            let h = f(g, x)?;
            let h = g.dropout(h, self.cfg.dropout)?;
            let h = g.add(x, h)?;
            self.norm(g, p, norm, h)
        }
    }

    /// Two residual feed-forward blocks over projected raw frames.
    ///
    /// `raw` is `[B, T, 400]`; the result is `[B, T, 120]`.
    pub fn nafm_forward(&self, g: &mut Graph, p: &[Var], raw: Var) -> Result<Var> {
        let nafm = self
            .nafm
            .ok_or_else(|| TensorError::Contract("model was built without the neural feature frontend".into()))?;
        let x0 = self.linear(g, p, nafm.proj, raw)?;
        let mut x = x0;
        for (block, ln) in [(nafm.block1, nafm.ln1), (nafm.block2, nafm.ln2)] {
            let h = self.ffn(g, p, block, x)?;
            let h = g.dropout(h, self.cfg.dropout)?;
            let h = g.add(h, x)?;
            x = self.norm(g, p, ln, h)?;
        }
        Ok(x)
    }

    pub fn encode(&self, g: &mut Graph, p: &[Var], src: &SourceBatch) -> Result<EncoderOutput> {
        let shape = src.frames.shape().to_vec();
        if shape.len() != 3 || shape[0] != src.lengths.len() || shape[2] != self.cfg.input_dim() {
            return Err(TensorError::Shape(format!(
                "encoder input must be [B, T, {}] with {} lengths, got {shape:?}",
                self.cfg.input_dim(),
                src.lengths.len()
            )));
        }
        if src.lengths.iter().any(|&l| l == 0 || l > shape[1]) {
            return Err(TensorError::Contract("every item needs between 1 and T frames".into()));
        }
        let (batch, t_in) = (shape[0], shape[1]);
        let input = g.constant(src.frames.clone());
        let (stacked, lengths, nafm_features) = match self.cfg.frontend_mode {
            FrontendMode::Filterbank => (input, src.lengths.clone(), None),
            FrontendMode::Nafm => {
                if t_in % STACK != 0 {
                    return Err(TensorError::Shape(format!("raw frame count {t_in} is not a multiple of {STACK}")));
                }
                let x2 = self.nafm_forward(g, p, input)?;
                // Zero the padding frames so stacking matches the filterbank path.
                let mut keep = vec![0.0; batch * t_in * D_SPEECH];
                for (b, &len) in src.lengths.iter().enumerate() {
                    keep[b * t_in * D_SPEECH..(b * t_in + len) * D_SPEECH].fill(1.0);
                }
                let keep = g.constant(Tensor::new(vec![batch, t_in, D_SPEECH], keep)?);
                let x2 = g.mul(x2, keep)?;
                let stacked = g.reshape(x2, &[batch, t_in / STACK, STACK * D_SPEECH])?;
                let lengths = src.lengths.iter().map(|l| l.div_ceil(STACK)).collect();
                (stacked, lengths, Some(x2))
            }
        };
        let t = g.shape(stacked)[1];
        let h = self.linear(g, p, self.input_proj, stacked)?;
        let pe = g.constant(sinusoidal_encoding(t, self.cfg.d_model)?);
        let h = g.add(h, pe)?;
        let mut h = g.dropout(h, self.cfg.dropout)?;

        let mask = key_padding_mask(&lengths, self.cfg.heads, t, t);
        let log_pen = match self.cfg.penalty_mode {
            PenaltyMode::Log => Some(g.constant(log_penalty(&distance_matrix(t)?)?)),
            _ => None,
        };
        let mut attn_logits = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let penalty = match layer.pdp {
                Some(w) => Some(pdp_penalty(g, p[w.index()], t)?),
                None => log_pen,
            };
            h = self.sublayer(g, p, layer.ln_attn, h, |g, x| {
                self.multi_head(g, p, layer.attn, x, x, penalty, &mask, Some(&mut attn_logits))
            })?;
            h = self.sublayer(g, p, layer.ln_ffn, h, |g, x| self.ffn(g, p, layer.ffn, x))?;
        }
        if let Some(n) = self.enc_final {
            h = self.norm(g, p, n, h)?;
        }
        Ok(EncoderOutput { states: h, lengths, attn_logits, nafm_features })
    }

    /// Next-token logits `[B, U, V]` for teacher-forced prefixes.
    ///
    /// `tokens` holds `B` rows of `U` ids each, row-major; each row should start
    /// with BOS. Position `t` sees only tokens `0..=t`.
    pub fn decode(&self, g: &mut Graph, p: &[Var], enc: &EncoderOutput, tokens: &[usize], u: usize) -> Result<Var> {
        let batch = enc.lengths.len();
        if u == 0 || tokens.len() != batch * u {
            return Err(TensorError::Shape(format!(
                "expected {batch} prefixes of length {u}, got {} ids",
                tokens.len()
            )));
        }
        let d = self.cfg.d_model;
        let e = g.embedding(p[self.embed.index()], tokens)?;
        let e = g.reshape(e, &[batch, u, d])?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = g.constant(sinusoidal_encoding(u, d)?);
        let e = g.add(e, pe)?;
        let mut h = g.dropout(e, self.cfg.dropout)?;
        let t_enc = enc.max_len(g);
        let self_mask = causal_mask(u);
        let cross_mask = key_padding_mask(&enc.lengths, self.cfg.heads, u, t_enc);
        for layer in &self.decoder {
            h = self.sublayer(g, p, layer.ln_self, h, |g, x| {
                self.multi_head(g, p, layer.self_attn, x, x, None, &self_mask, None)
            })?;
            h = self.sublayer(g, p, layer.ln_cross, h, |g, x| {
                self.multi_head(g, p, layer.cross, x, enc.states, None, &cross_mask, None)
            })?;
            h = self.sublayer(g, p, layer.ln_ffn, h, |g, x| self.ffn(g, p, layer.ffn, x))?;
        }
        if let Some(n) = self.dec_final {
            h = self.norm(g, p, n, h)?;
        }
        self.linear(g, p, self.out_proj, h)
    }

    /// Frame-level log-probabilities over `V + 1` classes (blank last), `[B, T', V+1]`.
    pub fn ctc_log_probs(&self, g: &mut Graph, p: &[Var], enc: &EncoderOutput) -> Result<Var> {
        let z = self.linear(g, p, self.ctc_proj, enc.states)?;
        g.log_softmax(z)
    }
}
