//! Corpus BLEU over whitespace tokens.
//!
//! ```text
//! cargo run --release --example bleu
//! ```

use scratch_st::bleu::corpus_bleu;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let refs = ["the cat sat on the mat", "a quick brown fox", "hello world"];
    let cases: [(&str, [&str; 3]); 3] = [
        ("exact", refs),
        ("close", ["the cat sat on a mat", "a quick brown fox", "hello"]),
        ("repetitive", ["the the the the the the", "fox fox fox fox", "world world"]),
    ];
    for (name, hyps) in cases {
        println!("{name:>10}: {}", corpus_bleu(&hyps, &refs)?);
    }
    Ok(())
}
