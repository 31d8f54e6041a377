//! Span expansion and selection.
//!
//! A query of `n` words has `n + 1` insertion points. Each one is masked in
//! turn, the infill model generates a span for it, and the spans are ranked
//! by information gain: the negative entropy of the predicted token
//! distributions, averaged over the generated words. Confident expansions
//! (low entropy) rank first.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::model::{DecodeMode, Infiller, SpanPrediction};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_M: usize = 10;

/// How insertion positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    /// Uniformly random positions.
    Rand,
    /// Highest mean log-probability of the generated span.
    Prob,
    /// Highest information gain (lowest mean entropy).
    #[default]
    Entr,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Rand, Strategy::Prob, Strategy::Entr];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Rand => "RAND",
            Strategy::Prob => "PROB",
            Strategy::Entr => "ENTR",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RAND" => Ok(Strategy::Rand),
            "PROB" => Ok(Strategy::Prob),
            "ENTR" => Ok(Strategy::Entr),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected RAND, PROB or ENTR)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpanderConfig {
    /// Number of reformulations returned.
    pub k: usize,
    /// Cap on generated span length.
    pub m: usize,
    pub strategy: Strategy,
    pub decode: DecodeMode,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m: DEFAULT_M,
            strategy: Strategy::Entr,
            decode: DecodeMode::Greedy,
        }
    }
}

impl ExpanderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("k and m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateExpansion {
    /// Insertion index in `0..=n`; 0 is before the first word.
    pub position: usize,
    pub span: Vec<String>,
    /// Mean negative entropy (nats) of the span's content steps.
    pub ig: f64,
    /// The value the strategy ranked by: `ig` for ENTR and RAND, mean
    /// log-probability of the emitted tokens for PROB.
    pub score: f64,
    pub reformulated: String,
}

/// The `n + 1` variants of `query` with a mask inserted at each word
/// boundary, in position order.
pub fn enumerate_candidates(query: &TokenSequence) -> Result<Vec<TokenSequence>> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let words = query.tokens();
    Ok((0..=words.len())
        .map(|pos| {
            let mut v = Vec::with_capacity(words.len() + 1);
            v.extend_from_slice(&words[..pos]);
            v.push(MASK_TOKEN.to_owned());
            v.extend_from_slice(&words[pos..]);
            TokenSequence::new(v)
        })
        .collect())
}

/// `Σ_v p(v) ln p(v)` with `0 ln 0 = 0`; the negative Shannon entropy in nats.
pub fn negative_entropy(dist: &[f64]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// Mean negative entropy over the content steps of a span. The step that
/// emitted the end sentinel is excluded.
pub fn information_gain(prediction: &SpanPrediction) -> Result<f64> {
    let steps = prediction.content_distributions();
    if steps.is_empty() {
        return Err(Error::EmptySpan);
    }
    Ok(steps.iter().map(|d| negative_entropy(d)).sum::<f64>() / steps.len() as f64)
}

/// Mean log-probability of the emitted content tokens.
pub fn mean_log_prob(prediction: &SpanPrediction) -> Result<f64> {
    let steps = prediction.content_distributions();
    if steps.is_empty() {
        return Err(Error::EmptySpan);
    }
    let total: f64 = steps
        .iter()
        .zip(&prediction.span)
        .map(|(d, &tok)| d[tok as usize].ln())
        .sum();
    Ok(total / steps.len() as f64)
}

/// Inserts `span` before word `position` and joins with single spaces.
pub fn splice<S: AsRef<str>>(query: &TokenSequence, position: usize, span: &[S]) -> Result<String> {
    let words = query.tokens();
    if position > words.len() {
        return Err(Error::Index {
            position,
            len: words.len(),
        });
    }
    if span.is_empty() {
        return Err(Error::EmptySpan);
    }
    let parts: Vec<&str> = words[..position]
        .iter()
        .map(String::as_str)
        .chain(span.iter().map(AsRef::as_ref))
        .chain(words[position..].iter().map(String::as_str))
        .collect();
    Ok(parts.join(" "))
}

/// Random stream for one query, derived from `seed` and the query text so
/// RAND results do not depend on the order queries are processed in.
pub fn query_rng(seed: u64, query: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in query.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

fn decode_for_position(mode: DecodeMode, position: usize) -> DecodeMode {
    match mode {
        DecodeMode::Greedy => DecodeMode::Greedy,
        DecodeMode::Sampled { seed } => DecodeMode::Sampled {
            seed: seed.wrapping_add(position as u64),
        },
    }
}

/// Fills the mask at `position`; `None` when the span comes back empty.
fn expand_at<I: Infiller + ?Sized>(
    query: &TokenSequence,
    masked: &TokenSequence,
    position: usize,
    infiller: &I,
    cfg: &ExpanderConfig,
) -> Result<Option<CandidateExpansion>> {
    let pred = infiller.infill(masked, cfg.m, decode_for_position(cfg.decode, position))?;
    let span = infiller.vocabulary().decode(&pred.span);
    if pred.span.is_empty() || span.is_empty() {
        return Ok(None);
    }
    let ig = information_gain(&pred)?;
    let score = match cfg.strategy {
        Strategy::Prob => mean_log_prob(&pred)?,
        Strategy::Entr | Strategy::Rand => ig,
    };
    let reformulated = splice(query, position, &span)?;
    Ok(Some(CandidateExpansion {
        position,
        span,
        ig,
        score,
        reformulated,
    }))
}

/// Runs expansion with the configured strategy and returns at most `k`
/// reformulations. ENTR and PROB results are sorted by score (descending,
/// ties to the smaller position); RAND results are in position order.
/// Identical reformulated strings are reported once.
pub fn expand<I, R>(
    query: &TokenSequence,
    infiller: &I,
    cfg: &ExpanderConfig,
    rng: &mut R,
) -> Result<Vec<CandidateExpansion>>
where
    I: Infiller + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let masked = enumerate_candidates(query)?;
    let positions: Vec<usize> = match cfg.strategy {
        Strategy::Entr | Strategy::Prob => (0..masked.len()).collect(),
        Strategy::Rand => {
            let mut p = rand::seq::index::sample(rng, masked.len(), cfg.k.min(masked.len())).into_vec();
            p.sort_unstable();
            p
        }
    };
    let mut candidates = Vec::with_capacity(positions.len());
    for pos in positions {
        if let Some(c) = expand_at(query, &masked[pos], pos, infiller, cfg)? {
            candidates.push(c);
        }
    }
    if cfg.strategy != Strategy::Rand {
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.position.cmp(&b.position)));
    }
    let mut seen = HashSet::new();
    candidates.retain(|c| seen.insert(c.reformulated.clone()));
    candidates.truncate(cfg.k);
    Ok(candidates)
}
