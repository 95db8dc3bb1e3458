//! Character and BPE vocabularies built from a small corpus.
//!
//! ```text
//! cargo run --release --example tokenizers
//! ```

use scratch_st::data::{build_vocab, TokenizerMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus: Vec<String> = [
        "low lower lowest",
        "new newer newest",
        "wide wider widest",
        "the lowest and the newest",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let chars = build_vocab(&corpus, TokenizerMode::Char, 0)?;
    let bpe = build_vocab(&corpus, TokenizerMode::Bpe, 40)?;
    let sentence = "the newest lower";
    for vocab in [&chars, &bpe] {
        let ids = vocab.encode(sentence)?;
        let pieces: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect();
        println!("{} vocabulary, {} entries", vocab.mode(), vocab.len());
        println!("  ids    {ids:?}");
        println!("  pieces {pieces:?}");
        println!("  decode {:?}", vocab.decode(&ids)?);
    }
    println!("first merges: {:?}", &bpe.merges()[..bpe.merges().len().min(6)]);
    Ok(())
}
