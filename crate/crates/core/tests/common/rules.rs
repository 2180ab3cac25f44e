//! Randomized checks of the exact rules: labelling, filtering, purification,
//! selection, deltas, DICE and AdvEdge. Each runs [`CASES`] cases from a
//! fixed seed.

use std::collections::BTreeMap;

use graphsieve_core::attack::{budget_for, dice_attack};
use graphsieve_core::edgepred::{
    edge_label, predict_edge, select_important_edges, CandidateMode, EdgePredictorConfig, EdgePredictorModel, MlpParams,
};
use graphsieve_core::embed::EmbeddingMatrix;
use graphsieve_core::instruct::{filter_judgments, JudgedEdge, Polarity};
use graphsieve_core::purify::{adv_edge_metric, purify_graph};
use graphsieve_core::scorer::{RelevanceJudgment, Source};
use graphsieve_core::tag::{apply_delta, edge_diff};
use graphsieve_core::{Edge, EdgeDelta, EdgeSet, TextAttributedGraph};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 1000;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

fn pair(n: usize) -> impl Strategy<Value = Edge> {
    (0..n, 1..n).prop_map(move |(a, off)| Edge::new(a, (a + off) % n))
}

fn edge_set(n: usize, max: usize) -> impl Strategy<Value = EdgeSet> {
    prop::collection::btree_set(pair(n), 0..=max)
}

fn graph(n: usize, edges: EdgeSet, labels: Vec<usize>) -> TextAttributedGraph {
    TextAttributedGraph::new((0..n).map(|i| format!("node {i}")).collect(), labels, edges).unwrap()
}

fn judgment(pair: Edge, score: Option<u8>) -> RelevanceJudgment {
    RelevanceJudgment {
        pair,
        score,
        analysis: "a".into(),
        source: if score.is_some() {
            Source::Custom
        } else {
            Source::Failed
        },
        response: None,
    }
}

/// Perturbed edges together with an optional score for each.
fn scored_graph() -> impl Strategy<Value = (EdgeSet, Vec<RelevanceJudgment>)> {
    edge_set(15, 40).prop_flat_map(|edges| {
        let n = edges.len();
        (
            Just(edges),
            prop::collection::vec(prop::option::weighted(0.85, 1u8..=6), n),
        )
            .prop_map(|(edges, scores)| {
                let js = edges.iter().zip(scores).map(|(&e, s)| judgment(e, s)).collect();
                (edges, js)
            })
    })
}

pub fn label_rule() -> Result<(), String> {
    run(1u8..=6, |score| {
        prop_assert_eq!(edge_label(score), u8::from(score > 4));
        Ok(())
    })
}

pub fn post_filter() -> Result<(), String> {
    let entry = (pair(12), any::<bool>(), prop::option::weighted(0.9, 1u8..=6));
    run(prop::collection::vec(entry, 0..30), |entries| {
        let g = graph(12, EdgeSet::new(), vec![0; 12]);
        let judged: Vec<JudgedEdge> = entries
            .iter()
            .map(|&(p, neg, s)| JudgedEdge {
                pair: p,
                polarity: if neg { Polarity::Negative } else { Polarity::Positive },
                judgment: judgment(p, s),
            })
            .collect();
        let out = filter_judgments(&g, &judged);
        for r in &out.records {
            let answer: serde_json::Value = serde_json::from_str(&r.output).unwrap();
            let score = answer["Relevance Score"].as_u64().unwrap();
            match r.polarity.unwrap() {
                Polarity::Negative => prop_assert!(score <= 3),
                Polarity::Positive => prop_assert!(score >= 4),
            }
        }
        let expected = entries
            .iter()
            .filter(|&&(_, neg, s)| matches!((neg, s), (true, Some(1..=3)) | (false, Some(4..=6))))
            .count();
        let unscored = entries.iter().filter(|e| e.2.is_none()).count();
        prop_assert_eq!(out.records.len(), expected);
        prop_assert_eq!(out.dropped_unscored, unscored);
        prop_assert_eq!(
            out.records.len() + out.dropped_unscored + out.dropped_by_rule,
            entries.len()
        );
        Ok(())
    })
}

pub fn threshold_soundness() -> Result<(), String> {
    run((scored_graph(), 1u8..=6), |((edges, js), beta)| {
        let r = purify_graph(&edges, &js, &EdgeSet::new(), beta).unwrap();
        for j in &js {
            match j.score {
                Some(s) if s <= beta => {
                    prop_assert!(!r.purified_edges.contains(&j.pair));
                    prop_assert!(r.removed.contains(&(j.pair, s)));
                }
                _ => prop_assert!(r.purified_edges.contains(&j.pair)),
            }
        }
        prop_assert_eq!(r.purified_edges.len() + r.removed.len(), edges.len());
        Ok(())
    })
}

pub fn threshold_monotone() -> Result<(), String> {
    run((scored_graph(), 1u8..=6, 1u8..=6), |((edges, js), a, b)| {
        let (lo, hi) = (a.min(b), a.max(b));
        let kept_lo = purify_graph(&edges, &js, &EdgeSet::new(), lo).unwrap().purified_edges;
        let kept_hi = purify_graph(&edges, &js, &EdgeSet::new(), hi).unwrap().purified_edges;
        prop_assert!(kept_hi.is_subset(&kept_lo));
        Ok(())
    })
}

const SEL_MAX_N: usize = 12;
const SEL_DIM: usize = 3;
const SEL_HIDDEN: usize = 5;

pub fn selection_discipline() -> Result<(), String> {
    let values = SEL_MAX_N * SEL_DIM + 2 * SEL_DIM * SEL_HIDDEN + 2 * SEL_HIDDEN;
    let strategy = (
        3usize..=SEL_MAX_N,
        edge_set(SEL_MAX_N, 20),
        prop::collection::vec(-1.5f64..1.5, values),
        0.05f64..0.95,
        1usize..5,
    );
    run(strategy, |(n, edges, vals, gamma, k)| {
        let edges: EdgeSet = edges.into_iter().filter(|e| e.v() < n).collect();
        let mut it = vals.iter().copied();
        let emb = EmbeddingMatrix::new(Array2::from_shape_fn((n, SEL_DIM), |_| it.next().unwrap())).unwrap();
        let mut it = vals[SEL_MAX_N * SEL_DIM..].iter().copied();
        let params = MlpParams {
            w1: Array2::from_shape_fn((2 * SEL_DIM, SEL_HIDDEN), |_| it.next().unwrap()),
            b1: Array1::from_shape_fn(SEL_HIDDEN, |_| it.next().unwrap()),
            w2: Array1::from_shape_fn(SEL_HIDDEN, |_| it.next().unwrap()),
            b2: 0.0,
        };
        let model = EdgePredictorModel {
            params,
            config: EdgePredictorConfig::default(),
            initial_loss: 0.0,
            loss_history: vec![],
        };
        let selected = select_important_edges(&model, &emb, &edges, gamma, k, CandidateMode::Full).unwrap();

        let mut expected = EdgeSet::new();
        for i in 0..n {
            let mut cands: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i && !edges.contains(&Edge::new(i, j)))
                .map(|j| (j, predict_edge(&model, &emb, (i, j)).unwrap()))
                .filter(|c| c.1 > gamma)
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            expected.extend(cands.iter().take(k).map(|&(j, _)| Edge::new(i, j)));
        }
        prop_assert_eq!(&selected, &expected);
        for e in &selected {
            prop_assert!(!e.is_loop() && !edges.contains(e));
            prop_assert!(predict_edge(&model, &emb, (e.u(), e.v())).unwrap() > gamma);
        }
        Ok(())
    })
}

pub fn edge_diff_round_trip() -> Result<(), String> {
    run((edge_set(15, 40), edge_set(15, 40)), |(clean, perturbed)| {
        let g = graph(15, clean.clone(), vec![0; 15]);
        let delta = edge_diff(&g, &perturbed).unwrap();
        prop_assert!(delta.added.is_disjoint(&delta.removed));
        prop_assert_eq!(apply_delta(&clean, &delta, 15).unwrap(), perturbed);
        Ok(())
    })
}

pub fn dice_discipline() -> Result<(), String> {
    let strategy = (
        edge_set(20, 50),
        prop::collection::vec(0usize..3, 20),
        0.05f64..0.6,
        any::<u64>(),
    );
    run(strategy, |(edges, labels, rate, seed)| {
        let Ok(budget) = budget_for(rate, edges.len()) else {
            return Ok(());
        };
        let g = graph(20, edges.clone(), labels.clone());
        // an infeasible budget is reported, not fudged
        let Ok(r) = dice_attack(&g, &labels, rate, seed) else {
            return Ok(());
        };
        prop_assert_eq!(r.delta.len(), budget);
        for e in &r.delta.added {
            prop_assert!(labels[e.u()] != labels[e.v()] && !edges.contains(e));
        }
        for e in &r.delta.removed {
            prop_assert!(labels[e.u()] == labels[e.v()] && edges.contains(e));
        }
        prop_assert_eq!(apply_delta(&edges, &r.delta, 20).unwrap(), r.perturbed_edges);
        Ok(())
    })
}

pub fn adv_edge_intersection() -> Result<(), String> {
    let strategy = (
        edge_set(15, 30),
        edge_set(15, 20),
        prop::collection::vec(1u8..=6, 80),
        1u8..=6,
    );
    run(strategy, |(clean, injected, scores, beta)| {
        let added: EdgeSet = injected.difference(&clean).copied().collect();
        if added.is_empty() {
            return Ok(());
        }
        let truth = EdgeDelta {
            added: added.clone(),
            removed: EdgeSet::new(),
        };
        let perturbed: EdgeSet = clean.union(&added).copied().collect();
        let js: Vec<RelevanceJudgment> = perturbed
            .iter()
            .zip(scores.iter().cycle())
            .map(|(&e, &s)| judgment(e, Some(s)))
            .collect();
        let r = purify_graph(&perturbed, &js, &EdgeSet::new(), beta).unwrap();
        let by_pair: BTreeMap<Edge, u8> = js.iter().map(|j| (j.pair, j.score.unwrap())).collect();
        let survivors = added.iter().filter(|e| by_pair[e] > beta).count();
        let a = adv_edge_metric(&r, &truth).unwrap();
        prop_assert_eq!(a.count, survivors);
        prop_assert_eq!(a.fraction, survivors as f64 / added.len() as f64);
        Ok(())
    })
}

pub type Rule = fn() -> Result<(), String>;

pub const ALL: [(&str, Rule); 8] = [
    ("label rule", label_rule),
    ("post-filter", post_filter),
    ("threshold soundness", threshold_soundness),
    ("threshold monotone in beta", threshold_monotone),
    ("selection discipline", selection_discipline),
    ("edge_diff round trip", edge_diff_round_trip),
    ("DICE label discipline", dice_discipline),
    ("AdvEdge intersection", adv_edge_intersection),
];
