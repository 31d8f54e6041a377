//! The offline stages behind each subcommand. Every stage reads its inputs
//! from the configured paths, writes its artifacts, and returns a summary
//! for the caller to print.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qexpand_core::corpus::{build_vocabulary, tokenize, QueryCorpus, SearchCorpus, Vocabulary};
use qexpand_core::eval::{
    ablate_k, ablate_strategy, evaluate, format_k_table, format_strategy_table, load_cases, save_cases, EvalReport,
    ExpanderReformulator, KRow, StrategyRow,
};
use qexpand_core::expander::{expand, query_rng, CandidateExpansion, ExpanderConfig, Strategy};
use qexpand_core::model::{InfillModel, TrainReport};
use qexpand_core::search::{SearchEngine, SearchIndex};
use qexpand_core::synth::{IntentBenchmark, IntentBenchmarkConfig};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{require, AppConfig};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub queries: usize,
    pub documents: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub index_terms: usize,
}

/// Tokenizes both corpora, builds and saves the vocabulary and the search
/// index.
pub fn prepare(cfg: &AppConfig) -> Result<PrepareSummary> {
    let p = &cfg.paths;
    require(&p.query_corpus, "query corpus", "")?;
    require(&p.search_corpus, "search corpus", "")?;
    let queries =
        QueryCorpus::load_jsonl(&p.query_corpus).with_context(|| format!("loading {}", p.query_corpus.display()))?;
    let vocab = build_vocabulary(&queries, cfg.vocab.max_size, cfg.vocab.min_freq)?;
    create_parent(&p.vocab)?;
    vocab.save(&p.vocab)?;

    let docs =
        SearchCorpus::load_jsonl(&p.search_corpus).with_context(|| format!("loading {}", p.search_corpus.display()))?;
    let index = SearchIndex::build(&docs, cfg.engine)?;
    create_parent(&p.index)?;
    index.save(&p.index)?;

    Ok(PrepareSummary {
        queries: queries.len(),
        documents: index.num_docs(),
        vocab_size: vocab.size(),
        vocab_hash: vocab.hash(),
        index_terms: index.num_terms(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub report: TrainReport,
    /// Queries longer than the model's input limit, left out of training.
    pub skipped_queries: usize,
    pub parameters: usize,
    pub checkpoint_sha256: String,
}

pub fn train_report_path(cfg: &AppConfig) -> PathBuf {
    cfg.paths.checkpoint.with_extension("report.json")
}

/// Runs corrupted-query-completion training and writes the checkpoint and
/// its training report next to it.
pub fn train(cfg: &AppConfig) -> Result<TrainSummary> {
    let p = &cfg.paths;
    require(&p.vocab, "vocabulary", " (run `qexpand prepare` first)")?;
    require(&p.query_corpus, "query corpus", "")?;
    let vocab = Vocabulary::load(&p.vocab)?;
    let queries = QueryCorpus::load_jsonl(&p.query_corpus)?;
    let total = queries.len();
    let kept: Vec<_> = queries
        .queries()
        .iter()
        .filter(|q| q.len() <= cfg.model.max_input_len)
        .cloned()
        .collect();
    if kept.is_empty() {
        bail!("no query fits within model.max_input_len = {}", cfg.model.max_input_len);
    }
    let corpus = QueryCorpus::new(kept)?;
    let mut model = InfillModel::new(cfg.model.clone(), vocab)?;
    let report = model.train_cqc(&corpus, &cfg.train)?;
    create_parent(&p.checkpoint)?;
    model.save(&p.checkpoint)?;
    let summary = TrainSummary {
        report,
        skipped_queries: total - corpus.len(),
        parameters: model.num_parameters(),
        checkpoint_sha256: sha256_file(&p.checkpoint)?,
    };
    write_json(
        &train_report_path(cfg),
        &json!({
            "per_epoch_loss": summary.report.per_epoch_loss,
            "steps": summary.report.steps,
            "training_queries": corpus.len(),
            "skipped_queries": summary.skipped_queries,
            "parameters": summary.parameters,
            "checkpoint_sha256": summary.checkpoint_sha256,
            "model": cfg.model,
            "train": cfg.train,
        }),
    )?;
    Ok(summary)
}

pub fn load_model(cfg: &AppConfig) -> Result<InfillModel> {
    let p = &cfg.paths;
    require(&p.vocab, "vocabulary", " (run `qexpand prepare` first)")?;
    require(&p.checkpoint, "checkpoint", " (run `qexpand train` first)")?;
    let vocab = Vocabulary::load(&p.vocab)?;
    InfillModel::load(&p.checkpoint, vocab).with_context(|| format!("loading {}", p.checkpoint.display()))
}

pub fn load_index(cfg: &AppConfig) -> Result<SearchIndex> {
    require(&cfg.paths.index, "search index", " (run `qexpand prepare` first)")?;
    Ok(SearchIndex::load(&cfg.paths.index)?)
}

/// Expands one query. RAND draws from the stream for `(seed, query)`, the
/// same one the evaluator and the service use.
pub fn reformulate(
    model: &InfillModel,
    query: &str,
    expander: &ExpanderConfig,
    seed: u64,
) -> Result<Vec<CandidateExpansion>> {
    let q = tokenize(query)?;
    Ok(expand(&q, model, expander, &mut query_rng(seed, query))?)
}

/// One tab-separated line per candidate: IG, position, span, reformulation.
pub fn format_candidates(candidates: &[CandidateExpansion]) -> String {
    candidates
        .iter()
        .map(|c| {
            format!(
                "{:.6}\t{}\t{}\t{}\n",
                c.ig,
                c.position,
                c.span.join(" "),
                c.reformulated
            )
        })
        .collect()
}

/// Content hashes of every input an evaluation depends on.
fn provenance(cfg: &AppConfig) -> Result<serde_json::Value> {
    let p = &cfg.paths;
    Ok(json!({
        "vocab_sha256": sha256_file(&p.vocab)?,
        "checkpoint_sha256": sha256_file(&p.checkpoint)?,
        "index_sha256": sha256_file(&p.index)?,
        "cases_sha256": sha256_file(&p.eval_cases)?,
    }))
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    report.write_jsonl(BufWriter::new(file))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub baseline: EvalReport,
    pub reformulated: EvalReport,
    pub strategy: Strategy,
    pub table: String,
    pub report_paths: Vec<PathBuf>,
}

/// Scores the configured strategy against the unreformulated baseline and
/// writes both per-query reports.
pub fn run_evaluate(cfg: &AppConfig) -> Result<EvaluateSummary> {
    require(&cfg.paths.eval_cases, "evaluation cases", "")?;
    let cases = load_cases(&cfg.paths.eval_cases)?;
    let index = load_index(cfg)?;
    let model = load_model(cfg)?;
    let inputs = provenance(cfg)?;
    let opts = cfg.eval.options();

    let mut baseline = evaluate(&index, None, &cases, opts)?;
    baseline.config_snapshot["inputs"] = inputs.clone();
    let reformulator = ExpanderReformulator::new(&model, cfg.expander.clone(), cfg.eval.seed);
    let mut reformulated = evaluate(&index, Some(&reformulator), &cases, opts)?;
    reformulated.config_snapshot["inputs"] = inputs;

    let strategy = cfg.expander.strategy;
    let row = StrategyRow {
        strategy,
        mrr: reformulated.mrr,
        runs: vec![reformulated.mrr],
    };
    let table = format_strategy_table(&[row], Some(baseline.mrr));
    let dir = &cfg.paths.reports;
    let paths = vec![
        dir.join("eval_none.jsonl"),
        dir.join(format!("eval_{}.jsonl", strategy.to_string().to_lowercase())),
        dir.join("evaluate.txt"),
    ];
    write_report(&paths[0], &baseline)?;
    write_report(&paths[1], &reformulated)?;
    fs::write(&paths[2], &table)?;
    Ok(EvaluateSummary {
        baseline,
        reformulated,
        strategy,
        table,
        report_paths: paths,
    })
}

#[derive(Debug, Clone)]
pub struct AblateSummary {
    pub baseline: f64,
    pub strategies: Vec<StrategyRow>,
    pub ks: Vec<KRow>,
    pub table: String,
    pub report_path: PathBuf,
}

/// Positioning-strategy and candidate-count ablations.
pub fn run_ablate(cfg: &AppConfig) -> Result<AblateSummary> {
    require(&cfg.paths.eval_cases, "evaluation cases", "")?;
    let cases = load_cases(&cfg.paths.eval_cases)?;
    let index = load_index(cfg)?;
    let model = load_model(cfg)?;
    let opts = cfg.eval.options();
    let baseline = evaluate(&index, None, &cases, opts)?.mrr;
    let strategies = ablate_strategy(
        &index,
        &model,
        &cases,
        &cfg.expander,
        &Strategy::ALL,
        &cfg.eval.rand_seeds,
        opts,
    )?;
    let base = ExpanderConfig {
        strategy: Strategy::Entr,
        ..cfg.expander.clone()
    };
    let ks = ablate_k(
        &index,
        &model,
        &cases,
        &base,
        &cfg.eval.k_values,
        cfg.eval.seed,
        cfg.eval.top_n,
    )?;
    let table = format!(
        "{}\n{}",
        format_strategy_table(&strategies, Some(baseline)),
        format_k_table(&ks, Some(baseline))
    );
    let report_path = cfg.paths.reports.join("ablation.json");
    write_json(
        &report_path,
        &json!({
            "baseline_mrr": baseline,
            "strategies": strategies,
            "k": ks,
            "rand_seeds": cfg.eval.rand_seeds,
            "eval": opts,
            "expander": cfg.expander,
            "inputs": provenance(cfg)?,
        }),
    )?;
    fs::write(cfg.paths.reports.join("ablation.txt"), &table)?;
    Ok(AblateSummary {
        baseline,
        strategies,
        ks,
        table,
        report_path,
    })
}

/// Writes the generated intent benchmark and a configuration file that
/// points at it. Returns the configuration path.
pub fn write_benchmark(dir: &Path, bench_cfg: &IntentBenchmarkConfig, app: &AppConfig) -> Result<PathBuf> {
    let bench = IntentBenchmark::generate(bench_cfg);
    let data = dir.join("data");
    fs::create_dir_all(&data).with_context(|| format!("cannot create {}", data.display()))?;
    let mut queries = String::new();
    for q in &bench.pretrain_queries {
        queries.push_str(&serde_json::to_string(&json!({ "query": q }))?);
        queries.push('\n');
    }
    fs::write(data.join("queries.jsonl"), queries)?;
    let mut docs = String::new();
    for d in &bench.documents {
        docs.push_str(&serde_json::to_string(d)?);
        docs.push('\n');
    }
    fs::write(data.join("documents.jsonl"), docs)?;
    save_cases(&data.join("cases.jsonl"), &bench.cases)?;

    let config_path = dir.join("qexpand.toml");
    fs::write(&config_path, app.to_toml()?)?;
    Ok(config_path)
}
