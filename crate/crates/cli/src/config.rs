//! TOML configuration shared by every subcommand and the service.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Relative paths are resolved against the directory holding the
//! configuration file.
//!
//! ```toml
//! [paths]
//! query_corpus  = "data/queries.jsonl"    # {"query": ...} per line
//! search_corpus = "data/documents.jsonl"  # {"doc_id", "text", "code"} per line
//! eval_cases    = "data/cases.jsonl"      # {"query", "relevant_doc_id"} per line
//! vocab         = "artifacts/vocab.json"
//! checkpoint    = "artifacts/model.ckpt"
//! index         = "artifacts/index.json"
//! reports       = "artifacts/reports"
//!
//! [vocab]
//! max_size = 20000
//! min_freq = 2
//!
//! [model]        # embed_dim, layers, heads, feedforward_dim, max_input_len, dropout, seed
//! [train]        # epochs, batch_size, learning_rate, grad_clip, optimizer, seed
//! [expander]     # k, m, strategy, decode = { mode = "greedy" }
//! [engine]       # k1, b
//!
//! [eval]
//! top_n = 100
//! use_first = 3
//! seed = 101           # RAND stream for evaluate, reformulate and the service
//! rand_seeds = [1, 2, 3, 4, 5]
//! k_values = [1, 2, 3]
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qexpand_core::corpus::{DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ};
use qexpand_core::eval::{EvalOptions, DEFAULT_USE_FIRST};
use qexpand_core::expander::ExpanderConfig;
use qexpand_core::model::{ModelConfig, TrainConfig, DEFAULT_SEED};
use qexpand_core::search::{Bm25Params, DEFAULT_TOP_N};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub query_corpus: PathBuf,
    pub search_corpus: PathBuf,
    pub eval_cases: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            query_corpus: "data/queries.jsonl".into(),
            search_corpus: "data/documents.jsonl".into(),
            eval_cases: "data/cases.jsonl".into(),
            vocab: "artifacts/vocab.json".into(),
            checkpoint: "artifacts/model.ckpt".into(),
            index: "artifacts/index.json".into(),
            reports: "artifacts/reports".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.query_corpus,
            &mut self.search_corpus,
            &mut self.eval_cases,
            &mut self.vocab,
            &mut self.checkpoint,
            &mut self.index,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            max_size: DEFAULT_MAX_VOCAB,
            min_freq: DEFAULT_MIN_FREQ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_n: usize,
    pub use_first: usize,
    pub seed: u64,
    pub rand_seeds: Vec<u64>,
    pub k_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            use_first: DEFAULT_USE_FIRST,
            seed: DEFAULT_SEED,
            rand_seeds: vec![1, 2, 3, 4, 5],
            k_values: vec![1, 2, 3],
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            top_n: self.top_n,
            use_first: self.use_first,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub expander: ExpanderConfig,
    pub engine: Bm25Params,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.expander.validate()?;
        if self.vocab.max_size == 0 {
            bail!("vocab.max_size must be at least 1");
        }
        if self.eval.top_n == 0 || self.eval.use_first == 0 {
            bail!("eval.top_n and eval.use_first must be at least 1");
        }
        if self.eval.k_values.contains(&0) {
            bail!("eval.k_values must be positive");
        }
        if !(self.engine.k1 >= 0.0 && (0.0..=1.0).contains(&self.engine.b)) {
            bail!("engine.k1 must be non-negative and engine.b within [0, 1]");
        }
        Ok(())
    }
}

/// Fails with a readable message when an input the subcommand needs is
/// missing.
pub fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {}{hint}", path.display());
    }
    Ok(())
}
