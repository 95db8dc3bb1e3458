//! Greedy and beam-search decoding with length-normalized final selection.

use std::cmp::Ordering;

use crate::autodiff::{Graph, TensorError, Var};
use crate::data::{BOS, EOS, PAD};
use crate::frontend::FeatureSequence;
use crate::model::{EncoderOutput, Model, SourceBatch};

type Result<T> = std::result::Result<T, TensorError>;

/// Source of next-token distributions for decoding.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary following each prefix. All
    /// prefixes have the same length and start with BOS.
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// `logp / ((5 + length) / 6)^α`.
pub fn length_penalty_score(logp: f64, length: usize, alpha: f64) -> f64 {
    logp / ((5.0 + length as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// BOS followed by generated ids (EOS last if finished).
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Self { tokens: vec![BOS], logp: 0.0, finished: false }
    }

    /// Generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, alpha: f64) -> f64 {
        length_penalty_score(self.logp, self.len().max(1), alpha)
    }

    /// Output ids with BOS/EOS removed.
    pub fn output(&self) -> Vec<usize> {
        self.tokens[1..].iter().copied().filter(|&t| t != EOS).collect()
    }
}

fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Higher score first; then shorter; then lower ids.
fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Follows the most probable token (lowest id on ties) until EOS or `max_len`
/// generated tokens.
pub fn greedy_decode(scorer: &mut dyn NextTokenScorer, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis::start();
    while hyp.len() < max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&hyp.tokens))?.remove(0);
        let Some((tok, &p)) = lp
            .iter()
            .enumerate()
            .filter(|&(t, p)| emittable(t) && p.is_finite())
            .fold(None, |best: Option<(usize, &f64)>, (t, p)| match best {
                Some((_, bp)) if *bp >= *p => best,
                _ => Some((t, p)),
            })
        else {
            break;
        };
        hyp.tokens.push(tok);
        hyp.logp += p;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search over `scorer`.
///
/// Each step expands every live hypothesis by every emittable token and keeps
/// the `beam` best continuations by raw log-probability (ties: lower token
/// id). Continuations ending in EOS leave the beam for the finished pool.
/// The search stops when nothing is live or after `max_len` tokens; the
/// finished hypothesis with the best length-penalized score wins. The greedy
/// path is always among the finished candidates, so the result never scores
/// below greedy decoding. If nothing finished, the best unfinished
/// hypothesis is returned with a warning.
pub fn beam_search(scorer: &mut dyn NextTokenScorer, beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(TensorError::Contract("beam and max_len must be at least 1".into()));
    }
    let greedy = greedy_decode(scorer, max_len)?;
    let mut finished = Vec::new();
    let mut unfinished = Vec::new();
    if greedy.finished {
        finished.push(greedy);
    } else {
        unfinished.push(greedy);
    }
    let mut live = vec![Hypothesis::start()];
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in lps.iter().enumerate() {
            for (tok, &p) in lp.iter().enumerate() {
                if emittable(tok) && p.is_finite() {
                    cands.push((live[h].logp + p, tok, h));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (logp, tok, h) in cands {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis { tokens, logp, finished: tok == EOS };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let pool = if finished.is_empty() {
        log::warn!("no hypothesis finished within {max_len} tokens; returning the best unfinished one");
        unfinished.extend(live);
        unfinished
    } else {
        finished
    };
    Ok(pool
        .into_iter()
        .min_by(|a, b| better(a, b, alpha))
        .expect("the greedy hypothesis is always present"))
}

/// Scores prefixes with a trained model for one utterance, reusing the
/// encoder output across steps.
pub struct ModelScorer<'m> {
    model: &'m Model,
    graph: Graph,
    params: Vec<Var>,
    enc: EncoderOutput,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, source: &FeatureSequence) -> Result<Self> {
        let mut graph = Graph::new();
        let params = model.bind_frozen(&mut graph);
        let batch = SourceBatch::from_sequences(&[source])?;
        let enc = model.encode(&mut graph, &params, &batch)?;
        Ok(Self { model, graph, params, enc })
    }

    /// Encoder positions for this utterance.
    pub fn encoder_len(&self) -> usize {
        self.enc.lengths[0]
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let u = prefixes.first().map_or(0, Vec::len);
        if k == 0 || prefixes.iter().any(|p| p.len() != u) {
            return Err(TensorError::Contract("prefixes must be non-empty and of equal length".into()));
        }
        let g = &mut self.graph;
        let states = if k == 1 {
            self.enc.states
        } else {
            g.concat(&vec![self.enc.states; k], 0)?
        };
        let enc = EncoderOutput {
            states,
            lengths: vec![self.enc.lengths[0]; k],
            attn_logits: Vec::new(),
            nafm_features: None,
        };
        let tokens: Vec<usize> = prefixes.concat();
        let logits = self.model.decode(g, &self.params, &enc, &tokens, u)?;
        let last = g.slice(logits, 1, u - 1, 1)?;
        let lp = g.log_softmax(last)?;
        let v = self.model.config().vocab_size;
        Ok(g.value(lp).data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
    pub greedy: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { beam: 8, alpha: 0.6, greedy: false }
    }
}

/// Default output length cap for an encoder of `t` positions.
pub fn default_max_len(t: usize) -> usize {
    2 * t + 10
}

/// Decodes one utterance with a trained model.
pub fn translate(model: &Model, source: &FeatureSequence, opts: DecodeOptions) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::new(model, source)?;
    let max_len = default_max_len(scorer.encoder_len());
    if opts.greedy {
        greedy_decode(&mut scorer, max_len)
    } else {
        beam_search(&mut scorer, opts.beam, opts.alpha, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Next-token distribution depends only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
    }

    impl NextTokenScorer for Bigram {
        fn vocab_size(&self) -> usize {
            self.table.len()
        }
        fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| self.table[*p.last().unwrap()].clone()).collect())
        }
    }

    fn normalized(weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| (w / total).ln()).collect()
    }

    fn random_bigram(rng: &mut ChaCha8Rng, v: usize) -> Bigram {
        let table = (0..v)
            .map(|_| {
                let w: Vec<f64> = (0..v).map(|t| if emittable(t) { rng.gen_range(0.01..1.0) } else { 0.0 }).collect();
                normalized(&w)
            })
            .collect();
        Bigram { table }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(length_penalty_score(-2.5, 1, 0.6), -2.5);
        assert_eq!(length_penalty_score(-2.5, 9, 0.0), -2.5);
        let long = length_penalty_score(-1.2, 13, 0.6);
        let short = length_penalty_score(-1.0, 5, 0.6);
        assert_eq!(format!("{long:.4}"), "-0.6207");
        assert_eq!(format!("{short:.4}"), "-0.7360");
        assert!(long > short);
    }

    #[test]
    fn eos_first_model_gives_empty_output() {
        let mut w = vec![0.1; 6];
        w[PAD] = 0.0;
        w[BOS] = 0.0;
        w[EOS] = 5.0;
        let mut m = Bigram { table: vec![normalized(&w); 6] };
        let g = greedy_decode(&mut m, 10).unwrap();
        assert!(g.finished);
        assert!(g.output().is_empty());
        assert_eq!(beam_search(&mut m, 4, 0.6, 10).unwrap().output(), Vec::<usize>::new());
    }

    #[test]
    fn peaked_model_follows_the_argmax_path() {
        // 3 -> 4 -> 5 -> EOS with certainty.
        let mut table = vec![vec![f64::NEG_INFINITY; 6]; 6];
        table[BOS][3] = 0.0;
        table[3][4] = 0.0;
        table[4][5] = 0.0;
        table[5][EOS] = 0.0;
        let mut m = Bigram { table };
        for beam in [1, 2, 8] {
            let h = beam_search(&mut m, beam, 0.6, 10).unwrap();
            assert_eq!(h.output(), vec![3, 4, 5]);
            assert_eq!(h.logp, 0.0);
        }
    }

    #[test]
    fn never_emits_reserved_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut m = random_bigram(&mut rng, 7);
            let h = beam_search(&mut m, 4, 0.6, 6).unwrap();
            assert!(h.tokens[1..].iter().all(|&t| t != PAD && t != BOS));
            assert!(h.output().iter().all(|&t| t >= 3));
        }
    }

    #[test]
    fn unfinished_fallback() {
        let mut table = vec![vec![f64::NEG_INFINITY; 5]; 5];
        table[BOS][3] = 0.0;
        table[3][4] = 0.0;
        table[4][3] = 0.0;
        let mut m = Bigram { table };
        let h = beam_search(&mut m, 3, 0.6, 4).unwrap();
        assert!(!h.finished);
        assert_eq!(h.output(), vec![3, 4, 3, 4]);
    }

    #[test]
    fn beam_one_is_greedy_and_beam_beats_greedy_at_alpha_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut m = random_bigram(&mut rng, 6);
            let g = greedy_decode(&mut m, 8).unwrap();
            assert_eq!(beam_search(&mut m, 1, 0.6, 8).unwrap(), g);
            assert!(beam_search(&mut m, 3, 0.0, 8).unwrap().logp >= g.logp);
        }
    }
}
