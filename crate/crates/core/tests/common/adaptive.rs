//! The adaptive attack only injects edges the scorer itself rates highly.

use graphsieve_core::attack::{adaptive_attack, ADAPTIVE_MIN_SCORE};
use graphsieve_core::embed::hash_embed;
use graphsieve_core::scorer::{Backend, ScoreCache, Scorer};
use graphsieve_core::{Edge, TextAttributedGraph};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 14] = [
    "graph", "kernel", "protein", "lattice", "signal", "network", "model", "sample", "energy", "cell", "field",
    "vector", "matrix", "gene",
];

/// Texts over a shared vocabulary with labels unrelated to the text, so many
/// cross-label pairs look similar.
fn mixed_graph(seed: u64) -> TextAttributedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 80;
    let texts: Vec<String> = (0..n)
        .map(|_| {
            (0..5)
                .map(|_| *WORDS.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.05) {
                edges.push(Edge::new(i, j));
            }
        }
    }
    TextAttributedGraph::new(texts, labels, edges).unwrap()
}

/// Returns the number of injected edges re-scored.
pub fn rescored_edges_pass() -> Result<usize, String> {
    let mut checked = 0;
    for seed in 0..3 {
        let g = mixed_graph(seed);
        let emb = hash_embed(g.texts(), 256).map_err(|e| e.to_string())?;
        let attacker = Scorer::new(Backend::heuristic(emb.clone()), ScoreCache::in_memory("mixed"));
        let r = adaptive_attack(&g, g.labels(), &attacker, 0.2, seed).map_err(|e| e.to_string())?;
        if r.delta.added.is_empty() || !r.delta.removed.is_empty() {
            return Err(format!(
                "seed {seed}: expected insertions only, got +{} -{}",
                r.delta.added.len(),
                r.delta.removed.len()
            ));
        }
        // a fresh cache, so every pair really goes back to the backend
        let judge = Scorer::new(Backend::heuristic(emb), ScoreCache::in_memory("mixed"));
        let added: Vec<Edge> = r.delta.added.iter().copied().collect();
        let judgments = judge.score_edges(&g, &added).map_err(|e| e.to_string())?;
        if judge.backend_calls() != added.len() {
            return Err("re-scoring was served from a cache".into());
        }
        for j in judgments {
            match j.score {
                Some(s) if s >= ADAPTIVE_MIN_SCORE => {}
                other => return Err(format!("seed {seed}: injected {} re-scored {other:?}", j.pair)),
            }
            let (u, v) = (j.pair.u(), j.pair.v());
            if g.labels()[u] == g.labels()[v] || g.has_edge(u, v) {
                return Err(format!("seed {seed}: {} is not a cross-label non-edge", j.pair));
            }
        }
        checked += added.len();
    }
    Ok(checked)
}
