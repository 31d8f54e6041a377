//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls the scoring code under test: BM25, MRR, entropy and
//! top-k selection are recomputed from first principles.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use qexpand_core::corpus::{Document, QueryCorpus, TokenSequence, Vocabulary, MASK_TOKEN, NUM_RESERVED, SPAN_END};
use qexpand_core::cqc::make_training_pairs;
use qexpand_core::eval::EvalCase;
use qexpand_core::model::{DecodeMode, InfillModel, Infiller, ModelConfig, SpanPrediction};
use qexpand_core::search::{RankedResult, SearchEngine};
use qexpand_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------- BM25

/// Five documents whose text and code are lowercase, space-separated words,
/// so whitespace splitting is exactly the tokenization.
pub fn bm25_fixture() -> Vec<Document> {
    let d = |id: &str, text: &str, code: &str| Document {
        doc_id: id.into(),
        text: text.into(),
        code: code.into(),
    };
    vec![
        d("d1", "sort a list in python", "def sort list return sorted list"),
        d("d2", "read a file in java", "files read all lines path"),
        d("d3", "sort a map by value", "map entries sort by value stream"),
        d("d4", "python read json file", "json load open path"),
        d("d5", "reverse a string", "return s reverse"),
    ]
}

pub const BM25_QUERIES: &[&str] = &[
    "sort list",
    "read file python",
    "sort sort map value",
    "json",
    "a",
    "reverse string in java",
    "zebra",
];

/// Brute-force BM25 over every document. Returns `(doc_id, score)` for the
/// documents sharing at least one term with the query, in rank order.
pub fn brute_force_bm25(docs: &[Document], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let bags: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            format!("{} {}", d.text, d.code)
                .split_whitespace()
                .map(str::to_lowercase)
                .collect()
        })
        .collect();
    let n = docs.len() as f64;
    let avgdl = bags.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: BTreeSet<String> = query.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    for (doc, bag) in docs.iter().zip(&bags) {
        let mut score = 0.0;
        let mut matched = false;
        for t in &terms {
            let tf = bag.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = bags.iter().filter(|bg| bg.contains(t)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5)).ln_1p();
            let dl = bag.len() as f64;
            score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if matched {
            out.push((doc.doc_id.clone(), score));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

// ---------------------------------------------------------------- MRR

/// Search engine that returns a fixed ranking per query.
pub struct ScriptedEngine {
    pub rankings: HashMap<String, Vec<String>>,
    pub docs: HashSet<String>,
}

impl SearchEngine for ScriptedEngine {
    fn search(&self, query: &str, top_n: usize) -> Result<Vec<RankedResult>> {
        let list = self.rankings.get(query).cloned().unwrap_or_default();
        Ok(list
            .into_iter()
            .take(top_n)
            .enumerate()
            .map(|(i, doc_id)| RankedResult {
                doc_id,
                score: 100.0 - i as f64,
            })
            .collect())
    }

    fn num_docs(&self) -> usize {
        self.docs.len()
    }

    fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains(doc_id)
    }
}

pub struct MrrFixture {
    pub engine: ScriptedEngine,
    pub cases: Vec<EvalCase>,
    pub reformulations: HashMap<String, Vec<String>>,
    pub top_n: usize,
    pub use_first: usize,
}

fn ranking(relevant_at: Option<usize>, relevant: &str, len: usize) -> Vec<String> {
    (1..=len)
        .map(|r| {
            if Some(r) == relevant_at {
                relevant.to_string()
            } else {
                format!("noise{r}")
            }
        })
        .collect()
}

/// Ten cases covering hits at various ranks, misses, ranks beyond the
/// cutoff, an ignored fourth reformulation and an empty reformulation list.
pub fn mrr_fixture() -> MrrFixture {
    let top_n = 5;
    // (relevant rank of the original query, ranks of each reformulation)
    let plan: [(Option<usize>, &[Option<usize>]); 10] = [
        (Some(3), &[Some(2), Some(4), None]),
        (None, &[None, Some(1)]),
        (Some(1), &[Some(5), Some(6), Some(3)]),
        (None, &[None, None, None, Some(1)]),
        (Some(2), &[]),
        (None, &[Some(6)]),
        (Some(4), &[Some(4)]),
        (None, &[None, None, Some(5)]),
        (Some(6), &[Some(3), Some(2), Some(2)]),
        (None, &[]),
    ];
    let mut rankings = HashMap::new();
    let mut docs = HashSet::new();
    let mut cases = Vec::new();
    let mut reformulations = HashMap::new();
    for i in 0..20 {
        docs.insert(format!("noise{i}"));
    }
    for (i, (orig, refs)) in plan.iter().enumerate() {
        let query = format!("query {i}");
        let relevant = format!("rel{i}");
        docs.insert(relevant.clone());
        rankings.insert(query.clone(), ranking(*orig, &relevant, 8));
        let mut list = Vec::new();
        for (j, r) in refs.iter().enumerate() {
            let q = format!("query {i} variant {j}");
            rankings.insert(q.clone(), ranking(*r, &relevant, 8));
            list.push(q);
        }
        reformulations.insert(query.clone(), list);
        cases.push(EvalCase {
            query,
            relevant_doc_id: relevant,
        });
    }
    MrrFixture {
        engine: ScriptedEngine { rankings, docs },
        cases,
        reformulations,
        top_n,
        use_first: 3,
    }
}

/// MRR computed directly from the scripted rankings.
pub fn mrr_oracle(f: &MrrFixture) -> f64 {
    let mut total = 0.0;
    for case in &f.cases {
        let refs = &f.reformulations[&case.query];
        let searched: Vec<&String> = if refs.is_empty() {
            vec![&case.query]
        } else {
            refs.iter().take(f.use_first).collect()
        };
        let best = searched
            .iter()
            .filter_map(|q| {
                f.engine.rankings[*q]
                    .iter()
                    .take(f.top_n)
                    .position(|d| *d == case.relevant_doc_id)
            })
            .min();
        if let Some(i) = best {
            total += 1.0 / (i + 1) as f64;
        }
    }
    total / f.cases.len() as f64
}

/// The fixture's MRR worked out by hand.
pub const MRR_FIXTURE_EXPECTED: f64 =
    (1.0 / 2.0 + 1.0 + 1.0 / 3.0 + 0.0 + 1.0 / 2.0 + 0.0 + 1.0 / 4.0 + 1.0 / 5.0 + 1.0 / 2.0 + 0.0) / 10.0;

// ---------------------------------------------------------------- entropy selection

/// Infiller whose output is a pseudo-random function of the masked text:
/// a span of 0 to 4 tokens with random, randomly peaked distributions.
pub struct HashStub {
    pub vocab: Vocabulary,
}

impl HashStub {
    pub fn new(words: usize) -> Self {
        Self {
            vocab: Vocabulary::from_content_tokens((0..words).map(|i| format!("t{i}"))).unwrap(),
        }
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Infiller for HashStub {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn infill(&self, masked: &TokenSequence, m: usize, _mode: DecodeMode) -> Result<SpanPrediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv(&masked.text()));
        let v = self.vocab.size();
        let len = rng.random_range(0..=4usize).min(m);
        let mut span = Vec::new();
        let mut distributions = Vec::new();
        for step in 0..=len {
            let temp = rng.random_range(0.2..5.0);
            let logits: Vec<f64> = (0..v).map(|_| rng.random::<f64>() * temp).collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            if step < len {
                // A small token set so spans often repeat neighbouring words.
                span.push((NUM_RESERVED + rng.random_range(0..4usize)) as u32);
            } else if len < m {
                span.push(SPAN_END);
            }
            distributions.push(p);
        }
        let terminated = span.last() == Some(&SPAN_END);
        if terminated {
            span.pop();
        } else {
            distributions.pop();
        }
        Ok(SpanPrediction {
            span,
            distributions,
            terminated,
        })
    }
}

pub struct OracleChoice {
    pub position: usize,
    pub ig: f64,
    pub reformulated: String,
}

/// Brute-force ENTR: score every insertion point by the mean over content
/// steps of Σ p ln p, drop empty spans, sort by score with earlier
/// positions first on ties, drop repeated strings, keep `k`.
pub fn entr_oracle(infiller: &dyn Infiller, words: &[String], k: usize, m: usize) -> Vec<OracleChoice> {
    let vocab = infiller.vocabulary();
    let mut all = Vec::new();
    for pos in 0..=words.len() {
        let mut masked: Vec<String> = words[..pos].to_vec();
        masked.push(MASK_TOKEN.to_string());
        masked.extend_from_slice(&words[pos..]);
        let pred = infiller
            .infill(&TokenSequence::new(masked), m, DecodeMode::Greedy)
            .unwrap();
        if pred.span.is_empty() {
            continue;
        }
        let steps = &pred.distributions[..pred.span.len()];
        let ig = steps
            .iter()
            .map(|d| d.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / steps.len() as f64;
        let mut out: Vec<String> = words[..pos].to_vec();
        out.extend(pred.span.iter().map(|&id| vocab.token_of(id).unwrap().to_string()));
        out.extend_from_slice(&words[pos..]);
        all.push(OracleChoice {
            position: pos,
            ig,
            reformulated: out.join(" "),
        });
    }
    all.sort_by(|a, b| b.ig.total_cmp(&a.ig).then(a.position.cmp(&b.position)));
    let mut seen = HashSet::new();
    all.retain(|c| seen.insert(c.reformulated.clone()));
    all.truncate(k);
    all
}

// ---------------------------------------------------------------- gradients

pub struct GradientCheck {
    pub checked: usize,
    pub worst_relative_error: f64,
}

/// Compares analytic gradients of the teacher-forced loss with central
/// differences at `coordinates` random parameters of a miniature model
/// whose weights are all drawn from N(0, 0.5).
pub fn gradient_check(coordinates: usize) -> GradientCheck {
    let words = ["sort", "a", "list", "in", "python", "read", "file", "java"];
    let cfg = ModelConfig {
        embed_dim: 8,
        layers: 1,
        heads: 2,
        feedforward_dim: 12,
        max_input_len: 12,
        dropout: 0.0,
        seed: 5,
    };
    let mut model = InfillModel::new(cfg, Vocabulary::from_content_tokens(words).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for p in model.parameters_mut() {
        p.mapv_inplace(|_| normal.sample(&mut rng));
    }
    let corpus = QueryCorpus::from_texts(&[
        "sort a list in python",
        "read a file in java",
        "sort list",
        "read file in python a list",
        "java",
        "how to read a file in python fast",
    ])
    .unwrap();
    let samples: Vec<_> = make_training_pairs(&corpus, &mut ChaCha8Rng::seed_from_u64(3))
        .iter()
        .map(|s| model.encode_sample(s))
        .collect();
    let (_, grads) = model.loss_and_gradients(&samples).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while checked < coordinates {
        attempts += 1;
        assert!(
            attempts < 100 * coordinates,
            "too few coordinates with measurable gradient"
        );
        let t = rng.random_range(0..grads.len());
        let (rows, cols) = grads[t].dim();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let analytic = grads[t][[r, c]];

        let orig = model.parameters()[t][[r, c]];
        model.parameters_mut()[t][[r, c]] = orig + eps;
        let plus = model.loss(&samples).unwrap();
        model.parameters_mut()[t][[r, c]] = orig - eps;
        let minus = model.loss(&samples).unwrap();
        model.parameters_mut()[t][[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * eps);

        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            // Token rows absent from the batch have exactly zero gradient.
            if analytic.abs() > 1e-12 && (analytic - numeric).abs() > 1e-9 {
                worst = f64::INFINITY;
            }
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    GradientCheck {
        checked,
        worst_relative_error: worst,
    }
}
