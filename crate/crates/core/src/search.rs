//! Lexical ranked retrieval with BM25 over an inverted index.
//!
//! For a query with distinct terms `t` the score of document `d` is
//!
//! ```text
//! Σ_t idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d| / avgdl))
//! idf(t) = ln((N − df(t) + 0.5) / (df(t) + 0.5) + 1)
//! ```
//!
//! Repeated query terms count once.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, word_tokens, SearchCorpus};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 100;
pub const INDEX_FORMAT_VERSION: u32 = 1;
const SNIPPET_CHARS: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub doc_id: String,
    pub score: f64,
}

/// A retrieval backend. The evaluator only depends on this trait, so a
/// dense-embedding engine can replace BM25 without touching it.
pub trait SearchEngine: Send + Sync {
    /// At most `top_n` documents in non-increasing score order, ties broken
    /// by ascending doc id. Documents matching no query term are omitted.
    fn search(&self, query: &str, top_n: usize) -> Result<Vec<RankedResult>>;

    fn num_docs(&self) -> usize;

    fn contains(&self, doc_id: &str) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIndex {
    format_version: u32,
    params: Bm25Params,
    /// Term → postings sorted by document ordinal.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avg_doc_len: f64,
    doc_ids: Vec<String>,
    snippets: Vec<String>,
    #[serde(skip)]
    ordinal_of: BTreeMap<String, u32>,
}

impl SearchIndex {
    /// Indexes the text and code of every document together.
    pub fn build(corpus: &SearchCorpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("search corpus is empty".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut snippets = Vec::with_capacity(corpus.len());
        for (ord, doc) in corpus.documents().iter().enumerate() {
            let mut tokens = word_tokens(&doc.text);
            tokens.extend(word_tokens(&doc.code));
            doc_len.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ord as u32,
                    tf: count,
                });
            }
            doc_ids.push(doc.doc_id.clone());
            snippets.push(doc.text.chars().take(SNIPPET_CHARS).collect());
        }
        let avg_doc_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        let mut index = Self {
            format_version: INDEX_FORMAT_VERSION,
            params,
            postings,
            doc_len,
            avg_doc_len,
            doc_ids,
            snippets,
            ordinal_of: BTreeMap::new(),
        };
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        self.ordinal_of = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_len(&self, ordinal: usize) -> u32 {
        self.doc_len[ordinal]
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.doc_ids[ordinal]
    }

    /// First characters of the document's text.
    pub fn snippet(&self, doc_id: &str) -> Option<&str> {
        self.ordinal_of.get(doc_id).map(|&o| self.snippets[o as usize].as_str())
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut index: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported index format version {}",
                index.format_version
            )));
        }
        index.rebuild_lookup();
        Ok(index)
    }
}

impl SearchEngine for SearchIndex {
    fn search(&self, query: &str, top_n: usize) -> Result<Vec<RankedResult>> {
        if top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        let terms: BTreeSet<String> = tokenize(query)?.into_tokens().into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0f64; self.doc_ids.len()];
        let mut hit = vec![false; self.doc_ids.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let d = p.doc as usize;
                let tf = p.tf as f64;
                let norm = k1 * (1.0 - b + b * self.doc_len[d] as f64 / self.avg_doc_len);
                scores[d] += idf * tf * (k1 + 1.0) / (tf + norm);
                hit[d] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..scores.len()).filter(|&d| hit[d]).collect();
        ranked.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.doc_ids[a].cmp(&self.doc_ids[b]))
        });
        ranked.truncate(top_n);
        Ok(ranked
            .into_iter()
            .map(|d| RankedResult {
                doc_id: self.doc_ids[d].clone(),
                score: scores[d],
            })
            .collect())
    }

    fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    fn contains(&self, doc_id: &str) -> bool {
        self.ordinal_of.contains_key(doc_id)
    }
}
