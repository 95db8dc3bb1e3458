//! Command-line front end: `train`, `translate`, `evaluate`, `features`, `synth`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::bleu::corpus_bleu;
use crate::config::{self, parse_value, ConfigError, KeyValue};
use crate::data::{
    build_vocab, load_manifest, synth_dataset, write_manifest, DataError, ManifestRecord, MappingRule, SynthSpec,
    TokenizerMode, Vocabulary,
};
use crate::decoding::{translate, DecodeOptions};
use crate::frontend::{self, FeatureSequence, FrontendError, Waveform};
use crate::model::{CheckpointError, Model, ModelConfig};
use crate::training::{train, Example, TrainConfig, TrainError, TrainOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => Self::Numeric(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Numeric(_) => Self::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "scratch-st", version, about = "End-to-end speech translation from scratch")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints, vocabulary and metrics.
    Train(TrainArgs),
    /// Decode audio with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Extract features from one WAV file.
    Features(FeaturesArgs),
    /// Generate a synthetic tone corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values before the config file is applied.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Override one key (repeatable); wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Manifest (id, audio, text tab-separated) or one WAV path per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Append a tab and the length-penalized score to each line.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureMode {
    Filterbank,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureStage {
    /// 40 log-mel energies.
    Fbank,
    /// With deltas and normalization.
    Normalized,
    /// Three frames stacked.
    Stacked,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, value_enum, default_value = "filterbank")]
    pub mode: FeatureMode,
    #[arg(long, value_enum, default_value = "fbank")]
    pub stage: FeatureStage,
    /// Dump file; nothing is written when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "copy")]
    pub rule: MappingRule,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub alphabet: usize,
    #[arg(long, default_value_t = 100.0)]
    pub tone_ms: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where training data comes from and how text is tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest of training audio; empty means use the synthetic generator.
    pub train_manifest: String,
    pub dev_manifest: String,
    pub synth_rule: MappingRule,
    pub synth_samples: usize,
    pub synth_dev_samples: usize,
    pub synth_alphabet: usize,
    pub synth_tone_ms: f64,
    pub synth_noise: f64,
    pub tokenizer: TokenizerMode,
    pub bpe_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: String::new(),
            dev_manifest: String::new(),
            synth_rule: MappingRule::Copy,
            synth_samples: 500,
            synth_dev_samples: 50,
            synth_alphabet: 8,
            synth_tone_ms: 100.0,
            synth_noise: 0.01,
            tokenizer: TokenizerMode::Char,
            bpe_size: 1000,
        }
    }
}

impl KeyValue for DataConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "train_manifest" => self.train_manifest = value.to_string(),
            "dev_manifest" => self.dev_manifest = value.to_string(),
            "synth_rule" => self.synth_rule = parse_value(key, value)?,
            "synth_samples" => self.synth_samples = parse_value(key, value)?,
            "synth_dev_samples" => self.synth_dev_samples = parse_value(key, value)?,
            "synth_alphabet" => self.synth_alphabet = parse_value(key, value)?,
            "synth_tone_ms" => self.synth_tone_ms = parse_value(key, value)?,
            "synth_noise" => self.synth_noise = parse_value(key, value)?,
            "tokenizer" => self.tokenizer = parse_value(key, value)?,
            "bpe_size" => self.bpe_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train_manifest", self.train_manifest.clone()),
            ("dev_manifest", self.dev_manifest.clone()),
            ("synth_rule", self.synth_rule.to_string()),
            ("synth_samples", self.synth_samples.to_string()),
            ("synth_dev_samples", self.synth_dev_samples.to_string()),
            ("synth_alphabet", self.synth_alphabet.to_string()),
            ("synth_tone_ms", self.synth_tone_ms.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("tokenizer", self.tokenizer.to_string()),
            ("bpe_size", self.bpe_size.to_string()),
        ]
    }
}

/// Everything `train` needs, resolved from preset, file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                model: ModelConfig::desk(4),
                train: TrainConfig::desk(),
                data: DataConfig::default(),
            },
            Preset::Paper => Self {
                model: ModelConfig::paper(4),
                train: TrainConfig::default(),
                data: DataConfig::default(),
            },
        }
    }

    pub fn apply(&mut self, assignments: &[(String, String)]) -> Result<(), ConfigError> {
        config::apply(assignments, &mut [&mut self.model, &mut self.train, &mut self.data])
    }

    /// `key=value` lines for every field; [`RunConfig::apply`] reads them back.
    pub fn render(&self) -> String {
        format!(
            "{}{}{}",
            config::render(&self.model),
            config::render(&self.train),
            config::render(&self.data)
        )
    }

    /// Preset, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(args: &TrainArgs) -> Result<Self, CliError> {
        let mut cfg = Self::preset(args.preset);
        if let Some(path) = &args.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply(&config::parse_text(&text)?)?;
        }
        let overrides = args
            .overrides
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        cfg.apply(&overrides)?;
        if let Some(seed) = args.seed {
            cfg.train.seed = seed;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(args)?;
    std::fs::create_dir_all(&args.out)?;
    let d = &cfg.data;

    let (train_items, dev_items) = if d.train_manifest.is_empty() {
        let spec = SynthSpec::new(d.synth_alphabet, d.synth_tone_ms, d.synth_rule, d.synth_noise)?;
        let seed = cfg.train.seed;
        let to_items = |samples: Vec<crate::data::SynthSample>| {
            samples.into_iter().map(|s| (s.id, s.waveform, s.target)).collect::<Vec<_>>()
        };
        (
            to_items(synth_dataset(&spec, d.synth_samples, seed)?),
            to_items(synth_dataset(&spec, d.synth_dev_samples, seed.wrapping_add(1_000_003))?),
        )
    } else {
        if d.dev_manifest.is_empty() {
            return Err(CliError::Usage("dev_manifest is required with train_manifest".into()));
        }
        (read_manifest_audio(Path::new(&d.train_manifest))?, read_manifest_audio(Path::new(&d.dev_manifest))?)
    };
    let texts: Vec<String> = train_items.iter().map(|(_, _, t)| t.clone()).collect();
    let vocab = build_vocab(&texts, d.tokenizer, d.bpe_size)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    eprint!("# resolved config\n{}", cfg.render());
    std::fs::write(args.out.join("config.txt"), cfg.render())?;
    vocab.save(&args.out.join("vocab.txt"))?;

    let mode = cfg.model.frontend_mode;
    let to_examples = |items: &[(String, Waveform, String)]| -> Result<Vec<Example>, CliError> {
        items
            .iter()
            .map(|(id, w, t)| Ok(Example::from_waveform(id.clone(), w, vocab.encode(t)?, mode)?))
            .collect()
    };
    let train_set = to_examples(&train_items)?;
    let dev_set = to_examples(&dev_items)?;

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!("{} parameters", model.num_params());
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(args.out.join("metrics.tsv"))?);
    let outcome = train(
        &mut model,
        &cfg.train,
        &train_set,
        &dev_set,
        TrainOptions { metrics: Some(&mut metrics), checkpoint_dir: Some(args.out.clone()) },
    )?;
    metrics.flush()?;
    println!(
        "trained {} steps in {:.1}s; final dev loss {:.4}; model {}",
        outcome.steps,
        outcome.seconds,
        outcome.final_dev_loss,
        args.out.join("averaged.ckpt").display()
    );
    Ok(())
}

fn read_manifest_audio(path: &Path) -> Result<Vec<(String, Waveform, String)>, CliError> {
    load_manifest(path)?
        .into_iter()
        .map(|r| {
            let w = Waveform::read_wav_file(&r.audio)
                .map_err(|e| CliError::Data(format!("{}: {e}", r.audio.display())))?;
            Ok((r.id, w, r.translation))
        })
        .collect()
}

/// Reads either a manifest (tab-separated) or a plain list of WAV paths.
fn read_translate_inputs(path: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let text = std::fs::read_to_string(path)?;
    if text.lines().any(|l| l.contains('\t')) {
        return Ok(load_manifest(path)?.into_iter().map(|r| (r.id, r.audio)).collect());
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            let p = if p.is_absolute() { p } else { base.join(p) };
            (l.to_string(), p)
        })
        .collect())
}

fn translate_one(model: &Model, vocab: &Vocabulary, audio: &Path, opts: DecodeOptions) -> Result<(String, f64), CliError> {
    let wave = Waveform::read_wav_file(audio)?;
    let source = match model.config().frontend_mode {
        crate::model::FrontendMode::Filterbank => frontend::extract_features(&wave)?,
        crate::model::FrontendMode::Nafm => frontend::raw_feature_frames(&wave)?,
    };
    let hyp = translate(model, &source, opts)?;
    Ok((vocab.decode(&hyp.output())?, hyp.score(opts.alpha)))
}

pub fn run_translate(args: &TranslateArgs) -> Result<(), CliError> {
    if args.beam == 0 || args.workers == 0 {
        return Err(CliError::Usage("--beam and --workers must be at least 1".into()));
    }
    let model = Model::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let inputs = read_translate_inputs(&args.input)?;
    let opts = DecodeOptions { beam: args.beam, alpha: args.alpha, greedy: args.greedy };
    eprintln!("# beam={} alpha={} greedy={} workers={}", opts.beam, opts.alpha, opts.greedy, args.workers);

    let mut results: Vec<Option<Result<(String, f64), CliError>>> = (0..inputs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..args.workers.min(inputs.len().max(1)))
            .map(|w| {
                let (model, vocab, inputs) = (&model, &vocab, &inputs);
                scope.spawn(move || {
                    (w..inputs.len())
                        .step_by(args.workers)
                        .map(|i| (i, translate_one(model, vocab, &inputs[i].1, opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("decoding worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut failures = 0;
    for ((id, _), r) in inputs.iter().zip(results) {
        match r.expect("every input is decoded") {
            Ok((text, score)) if args.scores => writeln!(out, "{text}\t{score:.6}")?,
            Ok((text, _)) => writeln!(out, "{text}")?,
            Err(e) => {
                failures += 1;
                eprintln!("error: {id}: {e}");
                writeln!(out)?;
            }
        }
    }
    out.flush()?;
    if failures > 0 && failures == inputs.len() {
        return Err(CliError::Data(format!("all {failures} inputs failed")));
    }
    Ok(())
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    eprintln!("# hyps={} refs={} tokenizer=whitespace", args.hyps.display(), args.refs.display());
    let hyps = std::fs::read_to_string(&args.hyps)?;
    let refs = std::fs::read_to_string(&args.refs)?;
    let hyps: Vec<&str> = hyps.lines().collect();
    let refs: Vec<&str> = refs.lines().collect();
    let score = corpus_bleu(&hyps, &refs).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{score}");
    Ok(())
}

pub fn run_features(args: &FeaturesArgs) -> Result<(), CliError> {
    eprintln!("# wav={} mode={:?} stage={:?}", args.wav.display(), args.mode, args.stage);
    let wave = Waveform::read_wav_file(&args.wav)?;
    let feats: FeatureSequence = match args.mode {
        FeatureMode::Raw => frontend::raw_feature_frames(&wave)?,
        FeatureMode::Filterbank => match args.stage {
            FeatureStage::Fbank => {
                let mut frames = frontend::frame_signal(&wave);
                if frames.is_empty() {
                    return Err(CliError::Data("audio is shorter than one analysis window".into()));
                }
                frames.truncate(frontend::MAX_FRAMES);
                frontend::log_mel_fbank(&frames)?
            }
            FeatureStage::Normalized => frontend::filterbank_features(&wave)?,
            FeatureStage::Stacked => frontend::extract_features(&wave)?,
        },
    };
    println!("T={} d={}", feats.num_frames(), feats.dim());
    if let Some(path) = &args.output {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let id = args.wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        frontend::write_feature_record(&mut w, &id, &feats)?;
        w.flush()?;
    }
    Ok(())
}

pub fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    eprintln!(
        "# rule={} count={} alphabet={} tone_ms={} noise={} seed={}",
        args.rule, args.count, args.alphabet, args.tone_ms, args.noise, args.seed
    );
    let spec = SynthSpec::new(args.alphabet, args.tone_ms, args.rule, args.noise)?;
    let samples = synth_dataset(&spec, args.count, args.seed)?;
    let audio = args.out.join("audio");
    std::fs::create_dir_all(&audio)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = PathBuf::from("audio").join(format!("{}.wav", s.id));
        s.waveform.write_wav_file(args.out.join(&rel))?;
        records.push(ManifestRecord { id: s.id.clone(), audio: rel, translation: s.target.clone() });
    }
    let manifest = args.out.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    println!("wrote {} samples to {}", records.len(), manifest.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Translate(a) => run_translate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Features(a) => run_features(a),
        Command::Synth(a) => run_synth(a),
    }
}

/// Parses `args` (program name first), runs the command and maps failures to
/// exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
