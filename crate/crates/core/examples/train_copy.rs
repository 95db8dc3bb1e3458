//! Trains the desk-size model on the synthetic copy task and reports greedy
//! exact-match accuracy.
//!
//! ```text
//! cargo run --release --example train_copy -- [steps] [seed] [filterbank|nafm]
//! ```
//!
//! With `nafm` the model learns its own acoustic features from raw frames.

use scratch_st::data::{build_vocab, synth_dataset, MappingRule, SynthSpec, TokenizerMode};
use scratch_st::decoding::{translate, DecodeOptions};
use scratch_st::model::{FrontendMode, Model, ModelConfig};
use scratch_st::training::{train, Example, TrainConfig, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let mode: FrontendMode = args.next().map(|s| s.parse()).transpose()?.unwrap_or(FrontendMode::Filterbank);

    let spec = SynthSpec::new(8, 100.0, MappingRule::Copy, 0.01)?;
    let train_samples = synth_dataset(&spec, 500, seed)?;
    let dev_samples = synth_dataset(&spec, 50, seed + 1000)?;
    let texts: Vec<String> = train_samples.iter().map(|s| s.target.clone()).collect();
    let vocab = build_vocab(&texts, TokenizerMode::Char, 0)?;

    let to_examples = |samples: &[scratch_st::data::SynthSample]| -> Result<Vec<Example>, Box<dyn std::error::Error>> {
        samples
            .iter()
            .map(|s| Ok(Example::from_waveform(&s.id, &s.waveform, vocab.encode(&s.target)?, mode)?))
            .collect()
    };
    let train_set = to_examples(&train_samples)?;
    let dev_set = to_examples(&dev_samples)?;

    let mut model = Model::new(ModelConfig { frontend_mode: mode, ..ModelConfig::desk(vocab.len()) }, seed)?;
    println!("parameters: {}", model.num_params());
    let cfg = TrainConfig { max_steps: steps, seed, ..TrainConfig::desk() };
    let outcome = train(&mut model, &cfg, &train_set, &dev_set, TrainOptions::default())?;
    println!(
        "{} steps in {:.1}s, final dev loss {:.4}",
        outcome.steps, outcome.seconds, outcome.final_dev_loss
    );
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        if mode == FrontendMode::Nafm {
            println!("feature anchor L2: {:.4} at step 1, {:.4} at the end", first.nafm_l2, last.nafm_l2);
        }
    }

    let opts = DecodeOptions { greedy: true, ..DecodeOptions::default() };
    let mut correct = 0;
    for (ex, s) in train_set.iter().zip(&train_samples) {
        let hyp = translate(&model, &ex.source, opts)?;
        correct += usize::from(vocab.decode(&hyp.output())? == s.target);
    }
    println!("greedy exact match on training items: {correct}/{}", train_set.len());
    Ok(())
}
