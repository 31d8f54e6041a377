//! Self-supervised query expansion for code search.
//!
//! The pipeline trains a span-infill model on unlabeled queries by masking
//! one contiguous span per query and teaching the model to regenerate it.
//! At query time every insertion point of the user's query is masked in
//! turn, the model fills each gap, and the expansions whose predicted
//! distributions carry the least entropy are offered as reformulations. A
//! BM25 engine and an MRR harness measure whether reformulation helps
//! retrieval.

pub mod corpus;
pub mod cqc;
pub mod error;
pub mod eval;
pub mod expander;
pub mod model;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
