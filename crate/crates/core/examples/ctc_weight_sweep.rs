//! Trains the desk model on the synthetic reverse task for several CTC
//! weights and seeds, then prints the seed-averaged dev loss per weight.
//!
//! ```text
//! cargo run --release --example ctc_weight_sweep -- [steps] [samples] [seeds] [weights]
//! cargo run --release --example ctc_weight_sweep -- 1500 2000 3 0,0.3,1
//! ```

use scratch_st::data::{build_vocab, synth_dataset, MappingRule, SynthSample, SynthSpec, TokenizerMode};
use scratch_st::model::{FrontendMode, Model, ModelConfig};
use scratch_st::training::{train, Example, TrainConfig, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let samples: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let weights: Vec<f64> = args
        .next()
        .unwrap_or_else(|| "0,0.3,1".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;

    let spec = SynthSpec::new(8, 100.0, MappingRule::Reverse, 0.01)?;
    let train_samples = synth_dataset(&spec, samples, 3)?;
    let dev_samples = synth_dataset(&spec, samples / 10, 1003)?;
    let texts: Vec<String> = train_samples.iter().map(|s| s.target.clone()).collect();
    let vocab = build_vocab(&texts, TokenizerMode::Char, 0)?;
    let examples = |set: &[SynthSample]| -> Result<Vec<Example>, Box<dyn std::error::Error>> {
        set.iter()
            .map(|s| Ok(Example::from_waveform(&s.id, &s.waveform, vocab.encode(&s.target)?, FrontendMode::Filterbank)?))
            .collect()
    };
    let train_set = examples(&train_samples)?;
    let dev_set = examples(&dev_samples)?;

    for &lambda in &weights {
        let mut total = 0.0;
        for seed in 1..=seeds {
            let mut model = Model::new(ModelConfig::desk(vocab.len()), seed)?;
            let cfg = TrainConfig { lambda, max_steps: steps, seed, ..TrainConfig::desk() };
            let outcome = train(&mut model, &cfg, &train_set, &dev_set, TrainOptions::default())?;
            println!(
                "lambda {lambda}: seed {seed} dev loss {:.4} ({:.0}s)",
                outcome.final_dev_loss, outcome.seconds
            );
            total += outcome.final_dev_loss;
        }
        println!("lambda {lambda}: mean dev loss {:.4}", total / seeds as f64);
    }
    Ok(())
}
