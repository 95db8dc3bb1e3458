//! Acoustic front end: 16 kHz PCM to log-mel filterbanks, deltas, CMVN and
//! non-overlapping three-frame stacking.
//!
//! Framing uses 25 ms windows (400 samples) every 10 ms (160 samples). Each
//! frame gets its own pre-emphasis (coefficient 0.97, first sample against
//! itself) and a symmetric Hann window, then a zero-padded 512-point DFT.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::autodiff::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 40;
pub const MAX_FRAMES: usize = 3000;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_EPS: f64 = 1e-8;
pub const DELTA_WINDOW: usize = 2;
pub const STACK: usize = 3;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("format error: {0}")]
    Format(String),
    #[error("expected {expected:?} features, got {actual:?}")]
    Stage { expected: Stage, actual: Stage },
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FrontendError>;

/// Mono waveform at 16 kHz with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(FrontendError::Format(format!(
                "sample rate {sample_rate} Hz is not supported; expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(FrontendError::Format("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Reads RIFF/WAVE PCM s16le mono at 16 kHz; anything else is rejected.
    pub fn read_wav(reader: impl Read) -> Result<Self> {
        let mut r = hound::WavReader::new(reader).map_err(|e| FrontendError::Format(e.to_string()))?;
        let spec = r.spec();
        if spec.channels != 1 {
            return Err(FrontendError::Format(format!("{} channels; expected mono", spec.channels)));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(FrontendError::Format(format!(
                "{}-bit {:?} samples; expected 16-bit PCM",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(FrontendError::Format(format!(
                "sample rate {} Hz is not supported; expected {SAMPLE_RATE} Hz (resample first)",
                spec.sample_rate
            )));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| FrontendError::Format(e.to_string()))?;
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn read_wav_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_wav(std::io::BufReader::new(file))
    }

    /// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
    pub fn write_wav_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| FrontendError::Format(e.to_string()))?;
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(q).map_err(|e| FrontendError::Format(e.to_string()))?;
        }
        w.finalize().map_err(|e| FrontendError::Format(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fbank40,
    Fbank120,
    Stacked360,
    /// Unwindowed 400-sample frames feeding the neural feature model.
    Raw400,
}

impl Stage {
    pub fn dim(self) -> usize {
        match self {
            Stage::Fbank40 => N_MELS,
            Stage::Fbank120 => 3 * N_MELS,
            Stage::Stacked360 => 3 * N_MELS * STACK,
            Stage::Raw400 => WINDOW_SAMPLES,
        }
    }
}

/// Row-major `T × d` feature matrix tagged with its pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    stage: Stage,
}

impl FeatureSequence {
    pub fn new(stage: Stage, data: Vec<f64>) -> Result<Self> {
        if data.len() % stage.dim() != 0 {
            return Err(FrontendError::Contract(format!(
                "{} values do not form rows of {}",
                data.len(),
                stage.dim()
            )));
        }
        if stage == Stage::Fbank40 && data.len() / stage.dim() > MAX_FRAMES {
            return Err(FrontendError::Contract(format!(
                "filterbank sequences hold at most {MAX_FRAMES} frames"
            )));
        }
        Ok(Self { data, stage })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn dim(&self) -> usize {
        self.stage.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.data[t * d..(t + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `[T, d]` tensor; fails on empty sequences.
    pub fn to_tensor(&self) -> std::result::Result<Tensor, crate::autodiff::TensorError> {
        Tensor::new(vec![self.num_frames(), self.dim()], self.data.clone())
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(FrontendError::Stage {
                expected: stage,
                actual: self.stage,
            });
        }
        Ok(())
    }
}

pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        1 + (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES
    }
}

fn hann() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        let n = WINDOW_SAMPLES as f64;
        (0..WINDOW_SAMPLES)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1.0)).cos())
            .collect()
    })
}

/// Slices the waveform into pre-emphasized, Hann-windowed 400-sample frames.
pub fn frame_signal(w: &Waveform) -> Vec<Vec<f64>> {
    let window = hann();
    raw_frames(w)
        .into_iter()
        .map(|frame| {
            (0..WINDOW_SAMPLES)
                .map(|i| {
                    let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                    (frame[i] - PRE_EMPHASIS * prev) * window[i]
                })
                .collect()
        })
        .collect()
}

/// Untouched 400-sample frames on the same 10 ms grid as [`frame_signal`].
pub fn raw_frames(w: &Waveform) -> Vec<Vec<f64>> {
    (0..num_frames(w.samples.len()))
        .map(|t| w.samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES].to_vec())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters as `(first bin, weights)` over the 257 DFT bins.
fn mel_filters() -> &'static [(usize, Vec<f64>)] {
    static FILTERS: OnceLock<Vec<(usize, Vec<f64>)>> = OnceLock::new();
    FILTERS.get_or_init(|| {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..=FFT_SIZE / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect()
    })
}

/// Center frequency in Hz of each mel filter.
pub fn mel_centers() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (1..=N_MELS)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Power spectrum of one windowed frame (257 bins).
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for (b, &x) in buf.iter_mut().zip(frame) {
        b.re = x;
    }
    fft.process(&mut buf);
    buf[..=FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// 40 log mel energies per frame, floored at 1e-10 before the log.
pub fn log_mel_fbank(frames: &[Vec<f64>]) -> Result<FeatureSequence> {
    if frames.is_empty() {
        return Err(FrontendError::Contract("no frames to analyze".into()));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let filters = mel_filters();
    let mut out = Vec::with_capacity(frames.len() * N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for frame in frames {
        buf.fill(Complex::new(0.0, 0.0));
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        fft.process(&mut buf);
        for (first, weights) in filters {
            let energy: f64 = weights
                .iter()
                .zip(&buf[*first..])
                .map(|(w, c)| w * c.norm_sqr())
                .sum();
            out.push(energy.max(LOG_FLOOR).ln());
        }
    }
    FeatureSequence::new(Stage::Fbank40, out)
}

/// Regression deltas with edge replication, window N = 2.
fn deltas(data: &[f64], dim: usize) -> Vec<f64> {
    let t_len = data.len() / dim;
    let norm = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; data.len()];
    for t in 0..t_len {
        for n in 1..=DELTA_WINDOW {
            let ahead = (t + n).min(t_len - 1);
            let behind = t.saturating_sub(n);
            for c in 0..dim {
                out[t * dim + c] += n as f64 * (data[ahead * dim + c] - data[behind * dim + c]);
            }
        }
        for c in 0..dim {
            out[t * dim + c] /= norm;
        }
    }
    out
}

/// Appends delta and delta-delta coefficients: `[static | Δ | ΔΔ]`.
pub fn add_deltas(f: &FeatureSequence) -> Result<FeatureSequence> {
    f.expect(Stage::Fbank40)?;
    let d = f.dim();
    let delta = deltas(f.data(), d);
    let delta2 = deltas(&delta, d);
    let mut out = Vec::with_capacity(f.data.len() * 3);
    for t in 0..f.num_frames() {
        out.extend_from_slice(f.row(t));
        out.extend_from_slice(&delta[t * d..(t + 1) * d]);
        out.extend_from_slice(&delta2[t * d..(t + 1) * d]);
    }
    FeatureSequence::new(Stage::Fbank120, out)
}

/// Per-utterance mean and variance normalization of every coefficient.
pub fn cmvn(f: &FeatureSequence) -> Result<FeatureSequence> {
    f.expect(Stage::Fbank120)?;
    let t_len = f.num_frames();
    if t_len == 0 {
        return Err(FrontendError::Contract("cmvn needs at least one frame".into()));
    }
    let d = f.dim();
    let mut mean = vec![0.0; d];
    for row in f.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t_len as f64);
    let mut var = vec![0.0; d];
    for row in f.rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / t_len as f64 + CMVN_EPS).sqrt())
        .collect();
    let out = f
        .rows()
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((x, m), s)| (x - m) * s)
                .collect::<Vec<_>>()
        })
        .collect();
    FeatureSequence::new(Stage::Fbank120, out)
}

/// Concatenates each run of three frames; the last group is zero-padded.
pub fn stack_frames(f: &FeatureSequence) -> Result<FeatureSequence> {
    f.expect(Stage::Fbank120)?;
    let groups = f.num_frames().div_ceil(STACK);
    let mut out = f.data.clone();
    out.resize(groups * STACK * f.dim(), 0.0);
    FeatureSequence::new(Stage::Stacked360, out)
}

/// Normalized 120-dimensional features (truncated to 3000 frames).
pub fn filterbank_features(w: &Waveform) -> Result<FeatureSequence> {
    let mut frames = frame_signal(w);
    if frames.is_empty() {
        return Err(FrontendError::Contract(format!(
            "audio of {} samples is shorter than one {WINDOW_SAMPLES}-sample window",
            w.samples.len()
        )));
    }
    frames.truncate(MAX_FRAMES);
    let fbank = log_mel_fbank(&frames)?;
    cmvn(&add_deltas(&fbank)?)
}

/// Full pipeline from audio to 360-dimensional encoder input rows.
pub fn extract_features(w: &Waveform) -> Result<FeatureSequence> {
    stack_frames(&filterbank_features(w)?)
}

/// Unwindowed frames for the neural feature model, truncated like filterbanks.
pub fn raw_feature_frames(w: &Waveform) -> Result<FeatureSequence> {
    let mut frames = raw_frames(w);
    if frames.is_empty() {
        return Err(FrontendError::Contract(format!(
            "audio of {} samples is shorter than one {WINDOW_SAMPLES}-sample window",
            w.samples.len()
        )));
    }
    frames.truncate(MAX_FRAMES);
    FeatureSequence::new(Stage::Raw400, frames.concat())
}

/// Writes one feature-dump record: `u32 id_len, id, u32 T, u32 d, T·d f32`,
/// all little-endian.
pub fn write_feature_record(mut w: impl Write, id: &str, f: &FeatureSequence) -> std::io::Result<()> {
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    w.write_all(&(f.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(f.dim() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(f.data.len() * 4);
    for &v in &f.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// `(id, T, d, values)` as stored in a feature dump.
pub type FeatureRecord = (String, usize, usize, Vec<f32>);

/// One record from a feature dump, or `None` at EOF.
pub fn read_feature_record(mut r: impl Read) -> std::io::Result<Option<FeatureRecord>> {
    let mut word = [0u8; 4];
    match r.read_exact(&mut word) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut id = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "id is not UTF-8"))?;
    r.read_exact(&mut word)?;
    let t = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    let mut raw = vec![0u8; t * d * 4];
    r.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some((id, t, d, values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), SAMPLE_RATE).unwrap()
    }

    fn seq(stage: Stage, rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::new(stage, rows.concat()).unwrap()
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_signal(&noise(16000, 1)).len(), 98);
        assert_eq!(frame_signal(&noise(400, 1)).len(), 1);
        assert_eq!(frame_signal(&noise(399, 1)).len(), 0);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        assert!(matches!(
            Waveform::new(vec![0.0; 10], 8000),
            Err(FrontendError::Format(_))
        ));
    }

    #[test]
    fn mel_scale_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.177).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn silent_frame_hits_log_floor() {
        let f = log_mel_fbank(&[vec![0.0; WINDOW_SAMPLES]]).unwrap();
        assert_eq!(f.dim(), 40);
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    /// Naive DFT as an independent check of the FFT-based filterbank.
    #[test]
    fn filterbank_matches_naive_dft() {
        let frames = frame_signal(&noise(800, 3));
        let fast = log_mel_fbank(&frames[..1]).unwrap();
        let frame = &frames[0];
        let power: Vec<f64> = (0..=FFT_SIZE / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let centers = mel_centers();
        let top = hz_to_mel(8000.0);
        let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / 41.0)).collect();
        for m in 0..N_MELS {
            assert!((centers[m] - edges[m + 1]).abs() < 1e-9);
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let f = k as f64 * 16000.0 / 512.0;
                let w = if f > edges[m] && f <= edges[m + 1] {
                    (f - edges[m]) / (edges[m + 1] - edges[m])
                } else if f > edges[m + 1] && f < edges[m + 2] {
                    (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
                } else {
                    0.0
                };
                e += w * p;
            }
            let expected = e.max(LOG_FLOOR).ln();
            assert!((fast.row(0)[m] - expected).abs() < 1e-8, "filter {m}");
        }
    }

    #[test]
    fn delta_cases() {
        let constant = seq(Stage::Fbank40, &vec![vec![2.5; 40]; 6]);
        let out = add_deltas(&constant).unwrap();
        assert_eq!(out.dim(), 120);
        assert!(out.rows().all(|r| r[40..].iter().all(|&v| v == 0.0)));

        let ramp: Vec<Vec<f64>> = (0..9).map(|t| vec![t as f64; 40]).collect();
        let out = add_deltas(&seq(Stage::Fbank40, &ramp)).unwrap();
        for t in 2..7 {
            assert!((out.row(t)[40] - 1.0).abs() < 1e-12, "frame {t}");
        }
        // ΔΔ of an interior ramp is zero where the Δ window sees no edges.
        assert!(out.row(4)[80].abs() < 1e-12);

        let single = add_deltas(&seq(Stage::Fbank40, &[vec![1.0; 40]])).unwrap();
        assert!(single.row(0)[40..].iter().all(|&v| v == 0.0));

        assert!(matches!(add_deltas(&single), Err(FrontendError::Stage { .. })));
    }

    #[test]
    fn cmvn_cases() {
        let constant = seq(Stage::Fbank120, &vec![vec![3.0; 120]; 4]);
        assert!(cmvn(&constant).unwrap().data().iter().all(|&v| v == 0.0));

        let two = seq(Stage::Fbank120, &[vec![-1.0; 120], vec![1.0; 120]]);
        let out = cmvn(&two).unwrap();
        assert!((out.row(0)[0] + 1.0).abs() < 1e-6 && (out.row(1)[0] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..120).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let out = cmvn(&seq(Stage::Fbank120, &rows)).unwrap();
        for c in 0..120 {
            let col: Vec<f64> = out.rows().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / 25.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn stacking_cases() {
        let six = seq(Stage::Fbank120, &vec![vec![1.0; 120]; 6]);
        let out = stack_frames(&six).unwrap();
        assert_eq!((out.num_frames(), out.dim()), (2, 360));

        let seven = seq(Stage::Fbank120, &vec![vec![1.0; 120]; 7]);
        let out = stack_frames(&seven).unwrap();
        assert_eq!(out.num_frames(), 3);
        assert!(out.row(2)[..120].iter().all(|&v| v == 1.0));
        assert!(out.row(2)[120..].iter().all(|&v| v == 0.0));

        let one = seq(Stage::Fbank120, &[vec![1.0; 120]]);
        let out = stack_frames(&one).unwrap();
        assert_eq!(out.row(0)[120..].iter().filter(|&&v| v == 0.0).count(), 240);

        let empty = FeatureSequence::new(Stage::Fbank120, vec![]).unwrap();
        assert!(stack_frames(&empty).unwrap().is_empty());
    }

    #[test]
    fn pipeline_shapes() {
        let out = extract_features(&noise(16000, 9)).unwrap();
        assert_eq!((out.num_frames(), out.dim()), (33, 360));

        // 4000 frames of audio are cut to 3000 before stacking.
        let long = noise(HOP_SAMPLES * 3999 + WINDOW_SAMPLES, 2);
        assert_eq!(num_frames(long.samples().len()), 4000);
        let out = extract_features(&long).unwrap();
        assert_eq!((out.num_frames(), out.dim()), (1000, 360));

        let silence = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        assert!(extract_features(&silence).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let w = noise(6400, 4);
        let shifted = Waveform::new(w.samples()[HOP_SAMPLES..].to_vec(), SAMPLE_RATE).unwrap();
        let a = log_mel_fbank(&frame_signal(&w)).unwrap();
        let b = log_mel_fbank(&frame_signal(&shifted)).unwrap();
        assert_eq!(b.num_frames() + 1, a.num_frames());
        for t in 0..b.num_frames() {
            for (x, y) in a.row(t + 1).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_and_finite() {
        let w = noise(5000, 8);
        let a = extract_features(&w).unwrap();
        assert_eq!(a, extract_features(&w).unwrap());
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wav_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25], SAMPLE_RATE).unwrap();
        w.write_wav_file(&path).unwrap();
        let back = Waveform::read_wav_file(&path).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let p8 = dir.path().join("b.wav");
        let mut wr = hound::WavWriter::create(&p8, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(Waveform::read_wav_file(&p8), Err(FrontendError::Format(_))));
    }

    #[test]
    fn feature_dump_round_trip() {
        let f = extract_features(&noise(1200, 6)).unwrap();
        let mut buf = Vec::new();
        write_feature_record(&mut buf, "utt1", &f).unwrap();
        write_feature_record(&mut buf, "utt2", &f).unwrap();
        let mut r = buf.as_slice();
        let (id, t, d, vals) = read_feature_record(&mut r).unwrap().unwrap();
        assert_eq!((id.as_str(), t, d), ("utt1", f.num_frames(), 360));
        assert_eq!(vals[7], f.data()[7] as f32);
        assert!(read_feature_record(&mut r).unwrap().is_some());
        assert!(read_feature_record(&mut r).unwrap().is_none());
    }
}
