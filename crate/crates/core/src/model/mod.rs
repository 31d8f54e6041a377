//! Span-infill sequence-to-sequence model.
//!
//! A small encoder-decoder transformer reads a query containing one
//! [`MASK`] sentinel and generates the missing span after a
//! [`SPAN_START`] token, terminating with [`SPAN_END`]. Everything runs in
//! `f64` on the CPU with hand-written backward passes.

mod checkpoint;
mod layers;
mod network;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, Vocabulary, MASK, SPAN_END, SPAN_START};
use crate::error::{Error, Result};

pub use train::{OptimizerKind, TrainConfig, TrainReport};

use layers::{Mat, Segment};
use network::Layout;

/// Seed used for every random source unless configured otherwise.
pub const DEFAULT_SEED: u64 = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Number of encoder layers and, separately, of decoder layers.
    pub layers: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    /// Longest encoder input and longest decoder input, in tokens.
    pub max_input_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            layers: 2,
            heads: 4,
            feedforward_dim: 256,
            max_input_len: 48,
            dropout: 0.0,
            seed: DEFAULT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("feedforward_dim", self.feedforward_dim),
            ("max_input_len", self.max_input_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    /// Argmax per step; ties go to the lowest id.
    #[default]
    Greedy,
    /// Draw each token from the predicted distribution.
    Sampled { seed: u64 },
}

/// Generated span plus the full predicted distribution of every decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    /// Content token ids; the terminating [`SPAN_END`] is not included.
    pub span: Vec<TokenId>,
    /// One probability vector over the vocabulary per step, including the
    /// step that emitted [`SPAN_END`] when the span terminated.
    pub distributions: Vec<Vec<f64>>,
    pub terminated: bool,
}

impl SpanPrediction {
    /// Distributions of the steps that emitted content tokens.
    pub fn content_distributions(&self) -> &[Vec<f64>] {
        &self.distributions[..self.span.len()]
    }
}

/// Anything that can fill a masked query. The trained [`InfillModel`] is the
/// production implementation; tests use hand-built stubs.
pub trait Infiller {
    fn vocabulary(&self) -> &Vocabulary;

    /// Generates at most `m` content tokens for the single mask in `masked`.
    fn infill(&self, masked: &TokenSequence, m: usize, mode: DecodeMode) -> Result<SpanPrediction>;
}

#[derive(Debug, Clone)]
pub struct InfillModel {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<Mat>,
}

impl InfillModel {
    /// Initializes parameters deterministically from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.size());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout.init_params(&mut rng);
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn parameters(&self) -> &[ndarray::Array2<f64>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [ndarray::Array2<f64>] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let vocab_size = self.vocab.size();
        match ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::VocabMismatch { id, vocab_size }),
            None => Ok(()),
        }
    }

    /// Infill over raw ids. `input` must contain exactly one [`MASK`].
    pub fn infill_ids(&self, input: &[TokenId], m: usize, mode: DecodeMode) -> Result<SpanPrediction> {
        let masks = input.iter().filter(|&&id| id == MASK).count();
        if masks != 1 {
            return Err(Error::MalformedInput(format!(
                "expected exactly one mask token, found {masks}"
            )));
        }
        if m == 0 {
            return Err(Error::Config("span length cap m must be at least 1".into()));
        }
        let max = self.config.max_input_len;
        if input.len() > max {
            return Err(Error::InputTooLong { len: input.len(), max });
        }
        if m > max {
            return Err(Error::Config(format!(
                "span length cap m={m} exceeds the decoder limit of {max}"
            )));
        }
        self.check_ids(input)?;

        let p = &self.params;
        let enc_segs = [Segment {
            start: 0,
            len: input.len(),
        }];
        let (enc_out, _) = self.layout.encode::<ChaCha8Rng>(p, input, &enc_segs, None);
        let mut sampler = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };

        let mut dec_ids = vec![SPAN_START];
        let mut span = Vec::new();
        let mut distributions = Vec::new();
        let mut terminated = false;
        for _ in 0..m {
            let segs = [Segment {
                start: 0,
                len: dec_ids.len(),
            }];
            let cache = self
                .layout
                .decode::<ChaCha8Rng>(p, &enc_out, &enc_segs, &dec_ids, &segs, None);
            let probs = softmax(&self.layout.last_logits(p, &cache.hidden));
            let token = match sampler.as_mut() {
                None => argmax(&probs),
                Some(rng) => sample(&probs, rng),
            };
            distributions.push(probs);
            if token == SPAN_END {
                terminated = true;
                break;
            }
            span.push(token);
            dec_ids.push(token);
        }
        Ok(SpanPrediction {
            span,
            distributions,
            terminated,
        })
    }
}

impl Infiller for InfillModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn infill(&self, masked: &TokenSequence, m: usize, mode: DecodeMode) -> Result<SpanPrediction> {
        self.infill_ids(&self.vocab.encode(masked), m, mode)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample<R: rand::Rng>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}
