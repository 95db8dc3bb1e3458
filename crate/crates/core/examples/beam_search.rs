//! Greedy decoding versus beam search with a length penalty on a toy model
//! whose next-token distribution depends only on the previous token.
//!
//! ```text
//! cargo run --release --example beam_search
//! ```

use scratch_st::autodiff::TensorError;
use scratch_st::data::{BOS, EOS, PAD};
use scratch_st::decoding::{beam_search, greedy_decode, length_penalty_score, NextTokenScorer};

struct Bigram {
    table: Vec<Vec<f64>>,
}

impl NextTokenScorer for Bigram {
    fn vocab_size(&self) -> usize {
        self.table.len()
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, TensorError> {
        Ok(prefixes.iter().map(|p| self.table[*p.last().unwrap()].clone()).collect())
    }
}

fn row(weights: [f64; 5]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total).ln()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Tokens 3 and 4. After BOS, 3 looks best, but 3 rarely ends the
    // sentence while 4 is almost always followed by EOS.
    let mut model = Bigram {
        table: vec![
            row([0.0, 0.0, 1.0, 0.0, 0.0]),
            row([0.0, 0.0, 0.0, 0.55, 0.45]),
            row([0.0, 0.0, 1.0, 0.0, 0.0]),
            row([0.0, 0.0, 0.2, 0.4, 0.4]),
            row([0.0, 0.0, 0.9, 0.05, 0.05]),
        ],
    };
    assert_eq!((PAD, BOS, EOS), (0, 1, 2));

    let greedy = greedy_decode(&mut model, 10)?;
    println!("greedy: {:?} logp {:.4} finished {}", greedy.output(), greedy.logp, greedy.finished);
    for (beam, alpha) in [(1, 0.6), (4, 0.0), (4, 0.6), (4, 2.0)] {
        let hyp = beam_search(&mut model, beam, alpha, 10)?;
        println!(
            "beam {beam} alpha {alpha}: {:?} logp {:.4} score {:.4}",
            hyp.output(),
            hyp.logp,
            hyp.score(alpha)
        );
    }
    println!(
        "length penalty at alpha 0.6: logp -1.2 over 13 tokens -> {:.4}, logp -1.0 over 5 tokens -> {:.4}",
        length_penalty_score(-1.2, 13, 0.6),
        length_penalty_score(-1.0, 5, 0.6)
    );
    Ok(())
}
