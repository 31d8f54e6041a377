//! Generated corpora for end-to-end checks.
//!
//! The intent benchmark pairs complete queries of the form
//! `how to VERB a OBJECT in LANG` with one document per (verb, object,
//! language) triple. Each (verb, object) pair has one intended language,
//! which is what the pre-training queries always use. Evaluation queries
//! drop the trailing `in LANG`, so every language variant of a document
//! ties until a reformulation restores the language.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::cqc::span_len_for;
use crate::eval::EvalCase;

const VERBS: &[&str] = &[
    "sort",
    "reverse",
    "parse",
    "serialize",
    "merge",
    "filter",
    "split",
    "encode",
    "compress",
    "hash",
    "validate",
    "flatten",
];
const OBJECTS: &[&str] = &[
    "array", "string", "list", "file", "map", "json", "date", "matrix", "url", "image",
];
const LANGS: &[&str] = &["python", "java", "rust", "golang", "ruby"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentBenchmarkConfig {
    pub seed: u64,
    pub verbs: usize,
    pub objects: usize,
    pub langs: usize,
}

impl Default for IntentBenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 101,
            verbs: VERBS.len(),
            objects: OBJECTS.len(),
            langs: LANGS.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentBenchmark {
    /// Complete queries for pre-training.
    pub pretrain_queries: Vec<String>,
    pub documents: Vec<Document>,
    /// Queries with the language modifier removed.
    pub cases: Vec<EvalCase>,
}

impl IntentBenchmark {
    pub fn generate(cfg: &IntentBenchmarkConfig) -> Self {
        let verbs = &VERBS[..cfg.verbs.clamp(1, VERBS.len())];
        let objects = &OBJECTS[..cfg.objects.clamp(1, OBJECTS.len())];
        let langs = &LANGS[..cfg.langs.clamp(2, LANGS.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut doc_id_of = HashMap::new();
        let mut documents = Vec::new();
        let mut used_ids = HashSet::new();
        for verb in verbs {
            for object in objects {
                for lang in langs {
                    // Random ids so tie-breaking by id carries no signal.
                    let id = loop {
                        let id = format!("doc-{:08x}", rng.random::<u32>());
                        if used_ids.insert(id.clone()) {
                            break id;
                        }
                    };
                    documents.push(Document {
                        doc_id: id.clone(),
                        text: format!("{} {object} using {lang}", capitalize(verb)),
                        code: format!("fn {verb}_{object}(input) {{ /* {lang} */ }}"),
                    });
                    doc_id_of.insert((*verb, *object, *lang), id);
                }
            }
        }
        documents.shuffle(&mut rng);

        let mut pretrain_queries = Vec::new();
        let mut cases = Vec::new();
        for verb in verbs {
            for object in objects {
                let lang = *langs.choose(&mut rng).expect("non-empty");
                pretrain_queries.push(format!("how to {verb} a {object} in {lang}"));
                cases.push(EvalCase {
                    query: format!("how to {verb} a {object}"),
                    relevant_doc_id: doc_id_of[&(*verb, *object, lang)].clone(),
                });
            }
        }
        Self {
            pretrain_queries,
            documents,
            cases,
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `count` distinct random queries of 3–8 words over a pool of
/// `pool_size` words, such that every corruption of every query has a
/// unique completion within the set.
pub fn memorizable_queries(count: usize, pool_size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..pool_size).map(|i| format!("w{i}")).collect();
    let mut queries: Vec<Vec<String>> = Vec::with_capacity(count);
    // corrupted context → completion
    let mut contexts: HashMap<Vec<String>, Vec<String>> = HashMap::new();
    while queries.len() < count {
        let n = rng.random_range(3..=8);
        let q: Vec<String> = (0..n).map(|_| pool.choose(&mut rng).expect("pool").clone()).collect();
        let span = span_len_for(n);
        let keys: Vec<(Vec<String>, Vec<String>)> = (0..=n - span)
            .map(|start| {
                let mut ctx = q[..start].to_vec();
                ctx.push(String::new());
                ctx.extend_from_slice(&q[start + span..]);
                (ctx, q[start..start + span].to_vec())
            })
            .collect();
        let clashes = keys
            .iter()
            .any(|(ctx, target)| contexts.get(ctx).is_some_and(|t| t != target));
        if clashes || queries.contains(&q) {
            continue;
        }
        contexts.extend(keys);
        queries.push(q);
    }
    queries.into_iter().map(|q| q.join(" ")).collect()
}
