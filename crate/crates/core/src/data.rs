//! Vocabularies, text encoding, manifests and the synthetic tone corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::frontend::{self, Waveform};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_RESERVED: usize = 3;
const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>"];
/// End-of-word marker appended to every word in BPE mode.
pub const END_OF_WORD: &str = "</w>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("tokenization error: {0}")]
    Tokenize(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("malformed manifest {path}: {}", format_lines(.lines))]
    Manifest { path: PathBuf, lines: Vec<(usize, String)> },
    #[error("missing audio files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingAudio(Vec<PathBuf>),
    #[error(transparent)]
    Frontend(#[from] frontend::FrontendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Char,
    Bpe,
}

impl FromStr for TokenizerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "char" => Ok(Self::Char),
            "bpe" => Ok(Self::Bpe),
            other => Err(format!("unknown tokenizer mode {other:?} (char|bpe)")),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Char => "char",
            Self::Bpe => "bpe",
        })
    }
}

/// Token/id bijection. Ids 0..3 are pad, bos and eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    mode: TokenizerMode,
    merges: Vec<(String, String)>,
}

impl Vocabulary {
    fn from_parts(text_tokens: Vec<String>, mode: TokenizerMode, merges: Vec<(String, String)>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(text_tokens)
            .collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(DataError::Contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids, mode, merges })
    }

    /// Vocabulary size `V`, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self.mode {
            TokenizerMode::Char => text
                .chars()
                .map(|c| {
                    self.id(c.encode_utf8(&mut [0; 4]))
                        .ok_or_else(|| DataError::Tokenize(format!("unknown symbol {c:?}")))
                })
                .collect(),
            TokenizerMode::Bpe => {
                let ranks: HashMap<(&str, &str), usize> = self
                    .merges
                    .iter()
                    .enumerate()
                    .map(|(i, (a, b))| ((a.as_str(), b.as_str()), i))
                    .collect();
                let mut ids = Vec::new();
                for word in text.split_whitespace() {
                    for piece in bpe_segment(word, &ranks) {
                        ids.push(self.id(&piece).ok_or_else(|| {
                            DataError::Tokenize(format!("unknown symbol in {word:?}: {piece:?}"))
                        })?);
                    }
                }
                Ok(ids)
            }
        }
    }

    /// Text for `ids`; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if Self::is_reserved(id) {
                continue;
            }
            let tok = self
                .token(id)
                .ok_or_else(|| DataError::Tokenize(format!("id {id} outside vocabulary of {}", self.len())))?;
            out.push_str(tok);
        }
        Ok(match self.mode {
            TokenizerMode::Char => out,
            TokenizerMode::Bpe => out.replace(END_OF_WORD, " ").trim_end().to_string(),
        })
    }

    /// One text token per line (line `i` holds id `i + 3`). BPE merges go to
    /// `<path>.merges`, one space-separated pair per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in &self.tokens[NUM_RESERVED..] {
            writeln!(f, "{}", escape(tok))?;
        }
        f.flush()?;
        let merges_path = merges_path(path);
        if self.mode == TokenizerMode::Bpe {
            let mut m = std::io::BufWriter::new(std::fs::File::create(merges_path)?);
            for (a, b) in &self.merges {
                writeln!(m, "{a} {b}")?;
            }
            m.flush()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(unescape).collect();
        let merges_path = merges_path(path);
        if merges_path.exists() {
            let merges = std::fs::read_to_string(&merges_path)?
                .lines()
                .enumerate()
                .map(|(n, line)| {
                    line.split_once(' ')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| DataError::Tokenize(format!("bad merge on line {}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            Self::from_parts(tokens, TokenizerMode::Bpe, merges)
        } else {
            Self::from_parts(tokens, TokenizerMode::Char, Vec::new())
        }
    }
}

fn merges_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".merges");
    PathBuf::from(s)
}

fn escape(tok: &str) -> String {
    tok.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Applies merges lowest-rank first until none applies.
fn bpe_segment(word: &str, ranks: &HashMap<(&str, &str), usize>) -> Vec<String> {
    let mut symbols = word_symbols(word);
    loop {
        let best = symbols
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| ranks.get(&(w[0].as_str(), w[1].as_str())).map(|&r| (r, i)))
            .min();
        let Some((_, i)) = best else { break };
        let right = symbols.remove(i + 1);
        symbols[i].push_str(&right);
    }
    symbols
}

/// Builds a vocabulary from `corpus`.
///
/// Char mode keeps every observed character (and ignores `size`). BPE mode
/// starts from characters plus the end-of-word marker and greedily merges the
/// most frequent adjacent pair (ties go to the lexicographically smallest
/// pair) until the vocabulary has `size` entries or nothing is left to merge.
pub fn build_vocab(corpus: &[String], mode: TokenizerMode, size: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(DataError::Contract("corpus is empty".into()));
    }
    match mode {
        TokenizerMode::Char => {
            let chars: BTreeSet<char> = corpus.iter().flat_map(|s| s.chars()).collect();
            Vocabulary::from_parts(chars.into_iter().map(String::from).collect(), mode, Vec::new())
        }
        TokenizerMode::Bpe => {
            let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            for line in corpus {
                for w in line.split_whitespace() {
                    *words.entry(word_symbols(w)).or_default() += 1;
                }
            }
            let base: BTreeSet<String> = words.keys().flatten().cloned().collect();
            let mut tokens: Vec<String> = base.into_iter().collect();
            if size < NUM_RESERVED + tokens.len() {
                return Err(DataError::Contract(format!(
                    "bpe size {size} is below the {} reserved + base symbols",
                    NUM_RESERVED + tokens.len()
                )));
            }
            let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
            let mut merges = Vec::new();
            let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
            while NUM_RESERVED + tokens.len() < size {
                let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
                for (syms, freq) in &words {
                    for w in syms.windows(2) {
                        *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
                    }
                }
                // BTreeMap iterates pairs in ascending order, so the first
                // maximum is the lexicographically smallest among ties.
                let Some((pair, _)) = counts.iter().fold(None, |best: Option<(&(&str, &str), usize)>, (p, &c)| {
                    match best {
                        Some((_, bc)) if bc >= c => best,
                        _ => Some((p, c)),
                    }
                }) else {
                    break;
                };
                let (a, b) = (pair.0.to_string(), pair.1.to_string());
                for (syms, _) in &mut words {
                    let mut i = 0;
                    while i + 1 < syms.len() {
                        if syms[i] == a && syms[i + 1] == b {
                            let right = syms.remove(i + 1);
                            syms[i].push_str(&right);
                        }
                        i += 1;
                    }
                }
                let merged = format!("{a}{b}");
                if known.insert(merged.clone()) {
                    tokens.push(merged);
                }
                merges.push((a, b));
            }
            Vocabulary::from_parts(tokens, mode, merges)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingRule {
    Copy,
    Reverse,
    /// Mirror substitution: symbol `i` of `n` becomes symbol `n - 1 - i`.
    Cipher,
}

impl FromStr for MappingRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "cipher" | "substitution-cipher" => Ok(Self::Cipher),
            other => Err(format!("unknown mapping rule {other:?} (copy|reverse|cipher)")),
        }
    }
}

impl fmt::Display for MappingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Cipher => "cipher",
        })
    }
}

/// Recipe for a tone-sequence to text corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Tone frequency in Hz for each symbol; symbol `i` is written `'a' + i`.
    pub frequencies: Vec<f64>,
    pub tone_ms: f64,
    pub rule: MappingRule,
    pub noise_std: f64,
    pub min_len: usize,
    pub max_len: usize,
}

pub const TONE_AMPLITUDE: f64 = 0.5;
const MIN_TONE_HZ: f64 = 200.0;
const MAX_TONE_HZ: f64 = 3000.0;
const MIN_SEPARATION_HZ: f64 = 100.0;

impl SynthSpec {
    /// Tones placed on mel filter centers spread across 200–3000 Hz, so each
    /// symbol peaks in its own filterbank channel.
    pub fn new(alphabet_size: usize, tone_ms: f64, rule: MappingRule, noise_std: f64) -> Result<Self> {
        let centers: Vec<f64> = frontend::mel_centers()
            .into_iter()
            .filter(|f| (MIN_TONE_HZ..=MAX_TONE_HZ).contains(f))
            .collect();
        if alphabet_size == 0 || alphabet_size > centers.len() {
            return Err(DataError::Contract(format!(
                "alphabet size {alphabet_size} must be in 1..={}",
                centers.len()
            )));
        }
        let frequencies = if alphabet_size == 1 {
            vec![centers[centers.len() / 2]]
        } else {
            (0..alphabet_size)
                .map(|i| {
                    let pos = (i * (centers.len() - 1)) as f64 / (alphabet_size - 1) as f64;
                    centers[pos.round() as usize]
                })
                .collect()
        };
        let spec = Self {
            frequencies,
            tone_ms,
            rule,
            noise_std,
            min_len: 3,
            max_len: 12,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn alphabet_size(&self) -> usize {
        self.frequencies.len()
    }

    pub fn symbol(&self, i: usize) -> char {
        char::from(b'a' + i as u8)
    }

    pub fn tone_samples(&self) -> usize {
        (self.tone_ms * frontend::SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frequencies.len();
        if n == 0 || n > 26 {
            return Err(DataError::Contract(format!("alphabet size {n} must be in 1..=26")));
        }
        if let Some(f) = self.frequencies.iter().find(|f| !(MIN_TONE_HZ..=MAX_TONE_HZ).contains(*f)) {
            return Err(DataError::Contract(format!("tone frequency {f} Hz outside [200, 3000]")));
        }
        for i in 0..n {
            for j in i + 1..n {
                if (self.frequencies[i] - self.frequencies[j]).abs() < MIN_SEPARATION_HZ {
                    return Err(DataError::Contract(format!(
                        "tones {} and {} are closer than {MIN_SEPARATION_HZ} Hz",
                        self.frequencies[i], self.frequencies[j]
                    )));
                }
            }
        }
        if self.tone_samples() == 0 || self.noise_std < 0.0 {
            return Err(DataError::Contract("tone duration must be positive and noise non-negative".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Contract(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Target text for a source symbol string.
    pub fn apply_rule(&self, source: &str) -> String {
        match self.rule {
            MappingRule::Copy => source.to_string(),
            MappingRule::Reverse => source.chars().rev().collect(),
            MappingRule::Cipher => {
                let n = self.alphabet_size() as u8;
                source
                    .chars()
                    .map(|c| char::from(b'a' + (n - 1 - (c as u8 - b'a'))))
                    .collect()
            }
        }
    }

    /// Concatenated tones for symbol indices, amplitude 0.5, plus noise.
    pub fn render(&self, symbols: &[usize], rng: &mut impl Rng) -> Result<Waveform> {
        let per = self.tone_samples();
        let noise = Normal::new(0.0, self.noise_std.max(0.0))
            .map_err(|e| DataError::Contract(e.to_string()))?;
        let sr = frontend::SAMPLE_RATE as f64;
        let mut samples = Vec::with_capacity(per * symbols.len());
        for &s in symbols {
            let f = self.frequencies[s];
            for n in 0..per {
                let tone = TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * f * n as f64 / sr).sin();
                let eps = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                samples.push((tone + eps).clamp(-1.0, 1.0));
            }
        }
        Ok(Waveform::new(samples, frontend::SAMPLE_RATE)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub source: String,
    pub symbols: Vec<usize>,
    pub waveform: Waveform,
    pub target: String,
}

/// `n` random samples; identical `seed` gives identical output.
pub fn synth_dataset(spec: &SynthSpec, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Contract("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.alphabet_size())).collect();
            let source: String = symbols.iter().map(|&s| spec.symbol(s)).collect();
            let waveform = spec.render(&symbols, &mut rng)?;
            Ok(SynthSample {
                id: format!("synth-{seed}-{i:05}"),
                target: spec.apply_rule(&source),
                source,
                symbols,
                waveform,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio: PathBuf,
    pub translation: String,
}

pub type Manifest = Vec<ManifestRecord>;

/// Parses `id<TAB>audio_path<TAB>translation` lines. Relative audio paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            bad.push((lineno, format!("expected 3 tab-separated columns, found {}", cols.len())));
            continue;
        }
        if cols[2].trim().is_empty() {
            bad.push((lineno, "empty translation".into()));
            continue;
        }
        let audio = PathBuf::from(cols[1]);
        records.push(ManifestRecord {
            id: cols[0].to_string(),
            audio: if audio.is_absolute() { audio } else { base.join(audio) },
            translation: cols[2].to_string(),
        });
    }
    if !bad.is_empty() {
        return Err(DataError::Manifest { path: path.to_path_buf(), lines: bad });
    }
    let missing: Vec<PathBuf> = records.iter().filter(|r| !r.audio.exists()).map(|r| r.audio.clone()).collect();
    if !missing.is_empty() {
        return Err(DataError::MissingAudio(missing));
    }
    if records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}\t{}\t{}", r.id, r.audio.display(), r.translation)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn char_vocab() {
        let v = build_vocab(&corpus(&["aab"]), TokenizerMode::Char, 0).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("ab").unwrap(), vec![3, 4]);
        assert_eq!(v.encode("").unwrap(), Vec::<usize>::new());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(v.encode("abc"), Err(DataError::Tokenize(_))));
        assert_eq!(v.decode(&[BOS, 3, 4, EOS, PAD]).unwrap(), "ab");
    }

    #[test]
    fn bpe_first_merge_is_most_frequent_pair() {
        let base = build_vocab(&corpus(&["abab abab abab"]), TokenizerMode::Bpe, 0);
        assert!(matches!(base, Err(DataError::Contract(_))));
        // Base: reserved + {</w>, a, b} = 6; one more slot allows one merge.
        let v = build_vocab(&corpus(&["abab abab abab"]), TokenizerMode::Bpe, 7).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b".to_string())]);
        assert!(v.id("ab").is_some());
        let ids = v.encode("abab").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.decode(&ids).unwrap(), "abab");
    }

    #[test]
    fn bpe_round_trip_on_corpus() {
        let lines = corpus(&["the cat sat", "the cat ate the rat", "a rat sat"]);
        let v = build_vocab(&lines, TokenizerMode::Bpe, 20).unwrap();
        for l in &lines {
            assert_eq!(&v.decode(&v.encode(l).unwrap()).unwrap(), l);
        }
        let ids = v.encode("the cat").unwrap();
        assert!(ids.iter().all(|&i| !Vocabulary::is_reserved(i)));
    }

    #[test]
    fn vocabulary_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lines = corpus(&["x\\y z\n", "the cat"]);
        for mode in [TokenizerMode::Char, TokenizerMode::Bpe] {
            let v = build_vocab(&lines, mode, 16).unwrap();
            let path = dir.path().join(format!("{mode}.vocab"));
            v.save(&path).unwrap();
            assert_eq!(Vocabulary::load(&path).unwrap(), v);
        }
    }

    proptest! {
        #[test]
        fn char_encode_decode_identity(s in "[a-h ]{0,30}") {
            let v = build_vocab(&corpus(&["abcdefgh "]), TokenizerMode::Char, 0).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn mapping_rules() {
        let mut spec = SynthSpec::new(8, 300.0, MappingRule::Copy, 0.0).unwrap();
        assert_eq!(spec.apply_rule("abc"), "abc");
        spec.rule = MappingRule::Reverse;
        assert_eq!(spec.apply_rule("abc"), "cba");
        spec.rule = MappingRule::Cipher;
        assert_eq!(spec.apply_rule("abh"), "hga");
    }

    #[test]
    fn tone_lengths() {
        let spec = SynthSpec::new(8, 300.0, MappingRule::Copy, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = spec.render(&[0, 1, 2], &mut rng).unwrap();
        assert_eq!(w.samples().len(), 14400);
        assert_eq!(frontend::frame_signal(&w).len(), 88);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SynthSpec::new(4, 100.0, MappingRule::Copy, 0.0).unwrap();
        assert!(spec.frequencies.windows(2).all(|w| w[1] - w[0] >= 100.0));
        spec.frequencies[1] = spec.frequencies[0] + 50.0;
        assert!(spec.validate().is_err());
        assert!(SynthSpec::new(40, 100.0, MappingRule::Copy, 0.0).is_err());
    }

    #[test]
    fn each_tone_peaks_in_its_own_filter() {
        let spec = SynthSpec::new(8, 100.0, MappingRule::Copy, 0.01).unwrap();
        let centers = frontend::mel_centers();
        let channel: Vec<usize> = spec
            .frequencies
            .iter()
            .map(|f| centers.iter().position(|c| c == f).unwrap())
            .collect();
        let per = spec.tone_samples();
        let mut hits = 0;
        let mut total = 0;
        for s in synth_dataset(&spec, 50, 7).unwrap() {
            let frames = frontend::frame_signal(&s.waveform);
            let fbank = frontend::log_mel_fbank(&frames).unwrap();
            for (k, &sym) in s.symbols.iter().enumerate() {
                // A frame lying entirely inside tone k.
                let t = (k * per).div_ceil(frontend::HOP_SAMPLES);
                if t * frontend::HOP_SAMPLES + frontend::WINDOW_SAMPLES > (k + 1) * per {
                    continue;
                }
                let row = fbank.row(t);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                total += 1;
                hits += usize::from(argmax == channel[sym]);
            }
        }
        assert!(total > 100);
        assert_eq!(hits, total);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::new(8, 100.0, MappingRule::Reverse, 0.01).unwrap();
        let a = synth_dataset(&spec, 5, 42).unwrap();
        let b = synth_dataset(&spec, 5, 42).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((3..=12).contains(&s.source.len()));
            assert_eq!(s.target, s.source.chars().rev().collect::<String>());
        }
        assert_ne!(a, synth_dataset(&spec, 5, 43).unwrap());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        std::fs::write(&wav, b"").unwrap();
        let good = dir.path().join("good.tsv");
        std::fs::write(&good, "u1\ta.wav\thello\nu2\ta.wav\tworld\n").unwrap();
        let m = load_manifest(&good).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].audio, wav);

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "u1\ta.wav\thello\nonly-one-column\n").unwrap();
        let err = load_manifest(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let missing = dir.path().join("missing.tsv");
        std::fs::write(&missing, "u1\tnope.wav\thi\n").unwrap();
        assert!(matches!(load_manifest(&missing), Err(DataError::MissingAudio(_))));

        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_manifest(&empty).unwrap().is_empty());
    }
}
