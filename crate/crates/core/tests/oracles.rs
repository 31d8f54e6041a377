//! Retrieval, evaluation and selection code checked against brute-force
//! oracles.

mod common;

use std::collections::HashMap;

use common::*;
use qexpand_core::corpus::{tokenize, SearchCorpus, TokenSequence};
use qexpand_core::eval::{evaluate, mrr, EvalOptions, FixedReformulator};
use qexpand_core::expander::{expand, ExpanderConfig, Strategy};
use qexpand_core::search::{Bm25Params, SearchEngine, SearchIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn fixture_index(params: Bm25Params) -> SearchIndex {
    SearchIndex::build(&SearchCorpus::new(bm25_fixture()).unwrap(), params).unwrap()
}

#[test]
fn bm25_matches_brute_force() {
    for params in [
        Bm25Params::default(),
        Bm25Params { k1: 2.0, b: 0.3 },
        Bm25Params { k1: 0.5, b: 1.0 },
    ] {
        let index = fixture_index(params);
        for q in BM25_QUERIES {
            let got = index.search(q, 100).unwrap();
            let want = brute_force_bm25(&bm25_fixture(), q, params.k1, params.b);
            assert_eq!(got.len(), want.len(), "query `{q}`");
            for (g, (id, score)) in got.iter().zip(&want) {
                assert_eq!(&g.doc_id, id, "query `{q}`");
                assert!(
                    (g.score - score).abs() <= 1e-9,
                    "query `{q}` doc {id}: {} vs {score}",
                    g.score
                );
            }
        }
    }
}

#[test]
fn bm25_top_n_is_a_prefix_and_scores_do_not_increase() {
    let index = fixture_index(Bm25Params::default());
    for q in BM25_QUERIES {
        let full = index.search(q, 100).unwrap();
        assert!(full.windows(2).all(|w| w[0].score >= w[1].score));
        for n in 1..=5 {
            assert_eq!(index.search(q, n).unwrap(), full[..n.min(full.len())]);
        }
    }
}

#[test]
fn repeating_a_matching_term_in_a_document_raises_its_score() {
    let mut docs = bm25_fixture();
    let base = fixture_index(Bm25Params::default()).search("reverse", 10).unwrap()[0].score;
    docs[4].code.push_str(" reverse");
    let index = SearchIndex::build(&SearchCorpus::new(docs).unwrap(), Bm25Params::default()).unwrap();
    assert!(index.search("reverse", 10).unwrap()[0].score > base);
}

#[test]
fn mrr_harness_matches_oracle() {
    let f = mrr_fixture();
    let reformulator = FixedReformulator::new(f.reformulations.clone(), json!("fixture"));
    let opts = EvalOptions {
        top_n: f.top_n,
        use_first: f.use_first,
    };
    let report = evaluate(&f.engine, Some(&reformulator), &f.cases, opts).unwrap();
    assert_eq!(report.mrr, mrr_oracle(&f));
    assert!((report.mrr - MRR_FIXTURE_EXPECTED).abs() < 1e-15);
    assert_eq!(report.per_query.len(), 10);
    assert_eq!(report.hits(), 7);
}

#[test]
fn mrr_is_non_decreasing_in_use_first() {
    let f = mrr_fixture();
    let reformulator = FixedReformulator::new(f.reformulations.clone(), json!("fixture"));
    let mut prev = 0.0;
    for use_first in 1..=4 {
        let opts = EvalOptions {
            top_n: f.top_n,
            use_first,
        };
        let m = evaluate(&f.engine, Some(&reformulator), &f.cases, opts).unwrap().mrr;
        assert!(m >= prev, "use_first {use_first}: {m} < {prev}");
        prev = m;
    }
}

#[test]
fn mrr_rejects_out_of_range_input() {
    assert!(mrr(&[]).is_err());
    assert!(mrr(&[0.5, 1.5]).is_err());
    assert_eq!(mrr(&[1.0, 0.0, 0.5, 0.5]).unwrap(), 0.5);
}

#[test]
fn empty_reformulation_lists_fall_back_to_the_original_query() {
    let f = mrr_fixture();
    let none = FixedReformulator::new(HashMap::new(), json!("none"));
    let opts = EvalOptions {
        top_n: f.top_n,
        use_first: 3,
    };
    let with_empty = evaluate(&f.engine, Some(&none), &f.cases, opts).unwrap();
    let without = evaluate(&f.engine, None, &f.cases, opts).unwrap();
    assert_eq!(with_empty.mrr, without.mrr);
}

#[test]
fn entr_selection_matches_brute_force_top_k() {
    let stub = HashStub::new(12);
    let words: Vec<String> = stub.vocab.content_tokens().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let q: Vec<String> = (0..n).map(|_| words[rng.random_range(0..4)].clone()).collect();
        let k = rng.random_range(1..=5);
        let m = rng.random_range(1..=10);
        let cfg = ExpanderConfig {
            k,
            m,
            strategy: Strategy::Entr,
            ..Default::default()
        };
        let got = expand(&TokenSequence::new(q.clone()), &stub, &cfg, &mut rng).unwrap();
        let want = entr_oracle(&stub, &q, k, m);
        assert_eq!(
            got.iter().map(|c| c.position).collect::<Vec<_>>(),
            want.iter().map(|c| c.position).collect::<Vec<_>>(),
            "query {q:?}"
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g.ig - w.ig).abs() <= 1e-9);
            assert_eq!(g.reformulated, w.reformulated);
        }
    }
}

#[test]
fn hash_stub_output_is_a_function_of_the_masked_text() {
    use qexpand_core::model::{DecodeMode, Infiller};
    let stub = HashStub::new(6);
    let q = tokenize("t0 [MASK] t1").unwrap();
    let a = stub.infill(&q, 10, DecodeMode::Greedy).unwrap();
    let b = stub.infill(&q, 10, DecodeMode::Greedy).unwrap();
    assert_eq!(a, b);
    for d in &a.distributions {
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
