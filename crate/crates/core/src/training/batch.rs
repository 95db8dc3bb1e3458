use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, TensorError};
use crate::data::{BOS, EOS, PAD};
use crate::frontend::{self, FeatureSequence, FrontendError, Waveform};
use crate::model::{FrontendMode, SourceBatch, D_SPEECH};

/// One utterance ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// Stacked filterbank rows or raw frames, depending on the model frontend.
    pub source: FeatureSequence,
    /// Target ids without BOS/EOS.
    pub target: Vec<usize>,
    /// 120-dimensional filterbank frames anchoring the neural frontend.
    pub fbank: Option<FeatureSequence>,
}

impl Example {
    pub fn from_waveform(
        id: impl Into<String>,
        wave: &Waveform,
        target: Vec<usize>,
        mode: FrontendMode,
    ) -> Result<Self, FrontendError> {
        let (source, fbank) = match mode {
            FrontendMode::Filterbank => (frontend::extract_features(wave)?, None),
            FrontendMode::Nafm => (
                frontend::raw_feature_frames(wave)?,
                Some(frontend::filterbank_features(wave)?),
            ),
        };
        Ok(Self { id: id.into(), source, target, fbank })
    }

    /// Decoder positions this example occupies (target plus EOS).
    pub fn target_tokens(&self) -> usize {
        self.target.len() + 1
    }
}

/// Padded tensors for a group of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: SourceBatch,
    /// `B·U` teacher-forcing inputs: BOS then the target, PAD-filled.
    pub dec_input: Vec<usize>,
    /// `B·U` gold ids: the target then EOS, PAD-filled.
    pub gold: Vec<usize>,
    pub u: usize,
    /// CTC label sequences (the targets).
    pub labels: Vec<Vec<usize>>,
    /// `[B, T, 120]` filterbank frames aligned with the raw source frames.
    pub fbank_targets: Option<Tensor>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self, TensorError> {
        let sources: Vec<&FeatureSequence> = examples.iter().map(|e| &e.source).collect();
        let source = SourceBatch::from_sequences(&sources)?;
        let u = examples.iter().map(|e| e.target_tokens()).max().unwrap_or(1);
        let mut dec_input = vec![PAD; examples.len() * u];
        let mut gold = vec![PAD; examples.len() * u];
        for (b, e) in examples.iter().enumerate() {
            let row = b * u;
            dec_input[row] = BOS;
            dec_input[row + 1..row + 1 + e.target.len()].copy_from_slice(&e.target);
            gold[row..row + e.target.len()].copy_from_slice(&e.target);
            gold[row + e.target.len()] = EOS;
        }
        let fbank_targets = if examples.iter().all(|e| e.fbank.is_some()) && !examples.is_empty() {
            let t = source.frames.shape()[1];
            let mut data = vec![0.0; examples.len() * t * D_SPEECH];
            for (b, e) in examples.iter().enumerate() {
                let f = e.fbank.as_ref().expect("checked above");
                if f.num_frames() != e.source.num_frames() {
                    return Err(TensorError::Contract(format!(
                        "{}: {} filterbank frames for {} raw frames",
                        e.id,
                        f.num_frames(),
                        e.source.num_frames()
                    )));
                }
                data[b * t * D_SPEECH..b * t * D_SPEECH + f.data().len()].copy_from_slice(f.data());
            }
            Some(Tensor::new(vec![examples.len(), t, D_SPEECH], data)?)
        } else {
            None
        };
        Ok(Self {
            source,
            dec_input,
            gold,
            u,
            labels: examples.iter().map(|e| e.target.clone()).collect(),
            fbank_targets,
        })
    }
}

/// Groups item indices so each batch's padded size `count · max(length)`
/// stays within `budget`.
///
/// Items are sorted by length (then index) and packed greedily. An item
/// longer than the budget forms its own batch. With `shuffle_seed`, the
/// order of batches is shuffled.
pub fn make_batches(lengths: &[usize], budget: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = lengths[i];
        if len > budget {
            log::warn!("item {i} has {len} target tokens, more than the batch budget {budget}");
        }
        let widest = longest.max(len);
        if !current.is_empty() && (current.len() + 1) * widest > budget {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if let Some(seed) = shuffle_seed {
        batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    batches
}
