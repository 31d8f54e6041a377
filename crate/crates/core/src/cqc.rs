//! Corrupted query completion: mask one contiguous span of a query and keep
//! the removed words as the generation target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QueryCorpus, TokenSequence, MASK_TOKEN};
use crate::error::{Error, Result};

/// Percentage of a query's words covered by the masked span.
pub const MASK_PERCENT: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedSample {
    /// Prefix, one mask sentinel, suffix.
    pub corrupted: TokenSequence,
    /// The words removed from the original query.
    pub target_span: TokenSequence,
    /// 0-based word index of the first removed word.
    pub span_start: usize,
    pub span_len: usize,
}

impl CorruptedSample {
    /// Splices the target back into the mask slot.
    pub fn reconstruct(&self) -> TokenSequence {
        let mut out = Vec::with_capacity(self.corrupted.len() + self.span_len - 1);
        for tok in self.corrupted.tokens() {
            if tok == MASK_TOKEN {
                out.extend(self.target_span.tokens().iter().cloned());
            } else {
                out.push(tok.clone());
            }
        }
        TokenSequence::new(out)
    }
}

/// `max(1, ceil(0.15 n))`.
pub fn span_len_for(n: usize) -> usize {
    // Integer ceiling: 0.15 has no exact binary representation.
    (n * MASK_PERCENT).div_ceil(100).max(1).min(n.max(1))
}

/// Replaces a uniformly placed span of `span_len_for(n)` words with the
/// mask sentinel.
pub fn corrupt<R: Rng + ?Sized>(query: &TokenSequence, rng: &mut R) -> Result<CorruptedSample> {
    let n = query.len();
    if n == 0 {
        return Err(Error::EmptyQuery);
    }
    let span_len = span_len_for(n);
    let span_start = rng.random_range(0..=n - span_len);
    Ok(corrupt_at(query, span_start, span_len))
}

/// Deterministic corruption at a given span; callers guarantee the span fits.
pub fn corrupt_at(query: &TokenSequence, span_start: usize, span_len: usize) -> CorruptedSample {
    let words = query.tokens();
    let end = span_start + span_len;
    assert!(span_len >= 1 && end <= words.len(), "span out of range");
    let mut corrupted = Vec::with_capacity(words.len() - span_len + 1);
    corrupted.extend_from_slice(&words[..span_start]);
    corrupted.push(MASK_TOKEN.to_owned());
    corrupted.extend_from_slice(&words[end..]);
    CorruptedSample {
        corrupted: TokenSequence::new(corrupted),
        target_span: TokenSequence::new(words[span_start..end].to_vec()),
        span_start,
        span_len,
    }
}

/// One freshly randomized sample per corpus query, in corpus order.
pub fn make_training_pairs<R: Rng + ?Sized>(corpus: &QueryCorpus, rng: &mut R) -> Vec<CorruptedSample> {
    corpus
        .queries()
        .iter()
        .map(|q| corrupt(q, rng).expect("corpus queries are non-empty"))
        .collect()
}
