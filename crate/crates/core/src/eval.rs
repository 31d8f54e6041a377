//! Mean reciprocal rank harness and the positioning/candidate-count
//! ablations.
//!
//! With a reformulator, each case searches the first `use_first`
//! reformulations and keeps the best rank of the relevant document among
//! them. A document outside the top `top_n` counts as reciprocal rank 0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{for_each_record, tokenize};
use crate::error::{Error, Result};
use crate::expander::{expand, query_rng, ExpanderConfig, Strategy};
use crate::model::Infiller;
use crate::search::{SearchEngine, DEFAULT_TOP_N};

pub const DEFAULT_USE_FIRST: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub query: String,
    pub relevant_doc_id: String,
}

/// Reads `{"query", "relevant_doc_id"}` records, one per line.
pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for_each_record(path, |_, c: EvalCase| {
        cases.push(c);
        Ok(())
    })?;
    Ok(cases)
}

pub fn save_cases(path: &Path, cases: &[EvalCase]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Arithmetic mean of reciprocal ranks.
pub fn mrr(reciprocals: &[f64]) -> Result<f64> {
    if reciprocals.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(r) = reciprocals.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("reciprocal rank {r} outside [0, 1]")));
    }
    Ok(reciprocals.iter().sum::<f64>() / reciprocals.len() as f64)
}

/// Produces ordered reformulations of a query.
pub trait Reformulator: Sync {
    fn reformulate(&self, query: &str) -> Result<Vec<String>>;

    /// Settings recorded in the report.
    fn describe(&self) -> serde_json::Value;
}

/// Reformulates with [`expand`]. RAND draws from a stream derived from the
/// seed and the query text, so results do not depend on case order.
pub struct ExpanderReformulator<'a, I: ?Sized> {
    pub infiller: &'a I,
    pub config: ExpanderConfig,
    pub seed: u64,
}

impl<'a, I: Infiller + Sync + ?Sized> ExpanderReformulator<'a, I> {
    pub fn new(infiller: &'a I, config: ExpanderConfig, seed: u64) -> Self {
        Self { infiller, config, seed }
    }
}

impl<I: Infiller + Sync + ?Sized> Reformulator for ExpanderReformulator<'_, I> {
    fn reformulate(&self, query: &str) -> Result<Vec<String>> {
        let q = tokenize(query)?;
        let mut rng = query_rng(self.seed, query);
        Ok(expand(&q, self.infiller, &self.config, &mut rng)?
            .into_iter()
            .map(|c| c.reformulated)
            .collect())
    }

    fn describe(&self) -> serde_json::Value {
        json!({ "expander": self.config, "seed": self.seed })
    }
}

/// Precomputed reformulation lists keyed by query.
pub struct FixedReformulator {
    lists: HashMap<String, Vec<String>>,
    label: serde_json::Value,
}

impl FixedReformulator {
    pub fn new(lists: HashMap<String, Vec<String>>, label: serde_json::Value) -> Self {
        Self { lists, label }
    }
}

impl Reformulator for FixedReformulator {
    fn reformulate(&self, query: &str) -> Result<Vec<String>> {
        Ok(self.lists.get(query).cloned().unwrap_or_default())
    }

    fn describe(&self) -> serde_json::Value {
        self.label.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub top_n: usize,
    pub use_first: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            use_first: DEFAULT_USE_FIRST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: String,
    pub relevant_doc_id: String,
    /// 1-based rank of the relevant document, if retrieved within `top_n`.
    pub best_rank: Option<usize>,
    pub reciprocal: f64,
    /// The reformulation that achieved `best_rank`.
    pub chosen_reformulation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub per_query: Vec<QueryOutcome>,
    pub config_snapshot: serde_json::Value,
}

impl EvalReport {
    /// Header line (MRR and config) followed by one line per query.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &json!({ "mrr": self.mrr, "queries": self.per_query.len(), "config": self.config_snapshot }),
        )?;
        w.write_all(b"\n")?;
        for q in &self.per_query {
            serde_json::to_writer(&mut w, q)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn hits(&self) -> usize {
        self.per_query.iter().filter(|q| q.best_rank.is_some()).count()
    }
}

fn rank_of(engine: &dyn SearchEngine, query: &str, relevant: &str, top_n: usize) -> Result<Option<usize>> {
    Ok(engine
        .search(query, top_n)?
        .iter()
        .position(|r| r.doc_id == relevant)
        .map(|i| i + 1))
}

/// Runs the retrieval protocol over `cases`.
pub fn evaluate(
    engine: &dyn SearchEngine,
    reformulator: Option<&dyn Reformulator>,
    cases: &[EvalCase],
    opts: EvalOptions,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if opts.top_n == 0 || opts.use_first == 0 {
        return Err(Error::Config("top_n and use_first must be at least 1".into()));
    }
    if let Some(c) = cases.iter().find(|c| !engine.contains(&c.relevant_doc_id)) {
        return Err(Error::CorruptFixture(format!(
            "relevant document `{}` of query `{}` is not in the search corpus",
            c.relevant_doc_id, c.query
        )));
    }
    let mut per_query = Vec::with_capacity(cases.len());
    for case in cases {
        let candidates = match reformulator {
            Some(r) => {
                let mut list = r.reformulate(&case.query)?;
                list.truncate(opts.use_first);
                list
            }
            None => Vec::new(),
        };
        let (best_rank, chosen) = if candidates.is_empty() {
            (rank_of(engine, &case.query, &case.relevant_doc_id, opts.top_n)?, None)
        } else {
            let mut best: Option<(usize, &String)> = None;
            for cand in &candidates {
                if let Some(rank) = rank_of(engine, cand, &case.relevant_doc_id, opts.top_n)? {
                    if best.is_none_or(|(b, _)| rank < b) {
                        best = Some((rank, cand));
                    }
                }
            }
            (best.map(|b| b.0), best.map(|b| b.1.clone()))
        };
        per_query.push(QueryOutcome {
            query: case.query.clone(),
            relevant_doc_id: case.relevant_doc_id.clone(),
            best_rank,
            reciprocal: best_rank.map_or(0.0, |r| 1.0 / r as f64),
            chosen_reformulation: chosen,
        });
    }
    let reciprocals: Vec<f64> = per_query.iter().map(|q| q.reciprocal).collect();
    Ok(EvalReport {
        mrr: mrr(&reciprocals)?,
        per_query,
        config_snapshot: json!({
            "top_n": opts.top_n,
            "use_first": opts.use_first,
            "reformulator": reformulator.map(|r| r.describe()),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    /// Mean over `runs`.
    pub mrr: f64,
    /// One entry per seed for RAND, a single entry otherwise.
    pub runs: Vec<f64>,
}

/// MRR per positioning strategy; RAND is averaged over `seeds`.
pub fn ablate_strategy<I: Infiller + Sync + ?Sized>(
    engine: &dyn SearchEngine,
    infiller: &I,
    cases: &[EvalCase],
    base: &ExpanderConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    opts: EvalOptions,
) -> Result<Vec<StrategyRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    strategies
        .iter()
        .map(|&strategy| {
            let cfg = ExpanderConfig {
                strategy,
                ..base.clone()
            };
            let run_seeds = if strategy == Strategy::Rand { seeds } else { &seeds[..1] };
            let runs = run_seeds
                .iter()
                .map(|&seed| {
                    let r = ExpanderReformulator::new(infiller, cfg.clone(), seed);
                    evaluate(engine, Some(&r), cases, opts).map(|rep| rep.mrr)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(StrategyRow {
                strategy,
                mrr: runs.iter().sum::<f64>() / runs.len() as f64,
                runs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub mrr: f64,
}

/// MRR when only the first `k` reformulations are searched. Candidate lists
/// are generated once with the largest `k`, so smaller lists are prefixes.
pub fn ablate_k<I: Infiller + Sync + ?Sized>(
    engine: &dyn SearchEngine,
    infiller: &I,
    cases: &[EvalCase],
    base: &ExpanderConfig,
    k_values: &[usize],
    seed: u64,
    top_n: usize,
) -> Result<Vec<KRow>> {
    let Some(&k_max) = k_values.iter().max() else {
        return Err(Error::Config("ablation needs at least one k".into()));
    };
    let cfg = ExpanderConfig {
        k: k_max,
        ..base.clone()
    };
    let reformulator = ExpanderReformulator::new(infiller, cfg.clone(), seed);
    let mut lists = HashMap::new();
    for c in cases {
        if !lists.contains_key(&c.query) {
            lists.insert(c.query.clone(), reformulator.reformulate(&c.query)?);
        }
    }
    let fixed = FixedReformulator::new(lists, reformulator.describe());
    k_values
        .iter()
        .map(|&k| {
            let rep = evaluate(engine, Some(&fixed), cases, EvalOptions { top_n, use_first: k })?;
            Ok(KRow { k, mrr: rep.mrr })
        })
        .collect()
}

fn improvement(mrr: f64, baseline: Option<f64>) -> String {
    match baseline {
        Some(b) if b > 0.0 => format!("{:+.2}%", (mrr - b) / b * 100.0),
        _ => "-".into(),
    }
}

pub fn format_strategy_table(rows: &[StrategyRow], baseline: Option<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>12}", "Strategy", "MRR", "Improvement");
    if let Some(b) = baseline {
        let _ = writeln!(out, "{:<10} {:>8.4} {:>12}", "NONE", b, "-");
    }
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>8.4} {:>12}",
            r.strategy.to_string(),
            r.mrr,
            improvement(r.mrr, baseline)
        );
    }
    out
}

pub fn format_k_table(rows: &[KRow], baseline: Option<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>12}", "# Positions", "MRR", "Improvement");
    for r in rows {
        let _ = writeln!(out, "{:<12} {:>8.4} {:>12}", r.k, r.mrr, improvement(r.mrr, baseline));
    }
    out
}
