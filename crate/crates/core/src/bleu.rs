//! Corpus-level BLEU over whitespace tokens.
//!
//! Up to 4-gram clipped precisions, geometric mean and brevity penalty. Orders
//! for which the hypotheses contain no n-grams at all are left out of the mean,
//! so short segments can still reach 100. Not a SacreBLEU replacement: there
//! is no tokenization beyond splitting on whitespace.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{hyps} hypotheses but {refs} references")]
pub struct LineCountMismatch {
    pub hyps: usize,
    pub refs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuScore {
    /// Clipped precision of each order, in percent (0 when there are no n-grams).
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                p[n] = 100.0 * self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        p
    }
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions();
        let ratio = if self.ref_len == 0 { 0.0 } else { self.hyp_len as f64 / self.ref_len as f64 };
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty, ratio, self.hyp_len, self.ref_len
        )
    }
}

fn ngrams<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuScore, LineCountMismatch> {
    if hyps.len() != refs.len() {
        return Err(LineCountMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngrams(&r, n);
            for (g, c) in ngrams(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let orders: Vec<usize> = (0..MAX_ORDER).filter(|&n| totals[n] > 0).collect();
    let score = if orders.is_empty() || orders.iter().any(|&n| matches[n] == 0) {
        0.0
    } else {
        let log_mean = orders
            .iter()
            .map(|&n| (matches[n] as f64 / totals[n] as f64).ln())
            .sum::<f64>()
            / orders.len() as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore { score, matches, totals, brevity_penalty, hyp_len, ref_len })
}
