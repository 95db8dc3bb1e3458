//! Runs the acoustic frontend stage by stage on a synthetic utterance and
//! writes the stacked features to a dump file.
//!
//! ```text
//! cargo run --release --example features -- [dump path]
//! ```

use scratch_st::data::{synth_dataset, MappingRule, SynthSpec};
use scratch_st::frontend::{self, read_feature_record, write_feature_record};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dump = std::env::args().nth(1).unwrap_or_else(|| "features.bin".into());
    let spec = SynthSpec::new(8, 100.0, MappingRule::Copy, 0.01)?;
    let sample = synth_dataset(&spec, 1, 7)?.remove(0);
    let wave = &sample.waveform;
    println!("utterance {:?}: {:.2}s of audio", sample.source, wave.duration_secs());

    let frames = frontend::frame_signal(wave);
    let fbank = frontend::log_mel_fbank(&frames)?;
    let with_deltas = frontend::add_deltas(&fbank)?;
    let normalized = frontend::cmvn(&with_deltas)?;
    let stacked = frontend::stack_frames(&normalized)?;
    for (name, f) in [("log-mel", &fbank), ("+deltas", &with_deltas), ("cmvn", &normalized), ("stacked", &stacked)] {
        println!("{name:>8}: T={:>3} d={}", f.num_frames(), f.dim());
    }

    // The loudest filter in each 100 ms tone tracks the symbol being played.
    let per_tone = spec.tone_samples() / frontend::HOP_SAMPLES;
    let peaks: Vec<usize> = (0..sample.symbols.len())
        .map(|i| {
            let row = fbank.row(i * per_tone + per_tone / 2);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        })
        .collect();
    println!("symbols {:?} peak mel filters {peaks:?}", sample.symbols);

    let mut file = std::fs::File::create(&dump)?;
    write_feature_record(&mut file, &sample.id, &stacked)?;
    let (id, t, d, values) = read_feature_record(std::fs::File::open(&dump)?)?.expect("one record");
    println!("wrote {dump}: {id} {t}x{d} ({} f32 values)", values.len());
    Ok(())
}
