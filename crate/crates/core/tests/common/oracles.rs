//! Fast paths against brute-force references.

use graphsieve_core::edgepred::{
    select_important_edges, CandidateMode, EdgePredictorConfig, EdgePredictorModel, MlpParams,
};
use graphsieve_core::embed::{build_similarity_index, cosine_similarity, EmbeddingMatrix, Neighbor};
use graphsieve_core::{Edge, EdgeSet};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Gaussian rows with some exact duplicates, so ties occur.
fn embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    let mut v = gaussian(rng, n, d);
    for _ in 0..n / 10 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let row = v.row(a).to_owned();
        v.row_mut(b).assign(&row);
    }
    EmbeddingMatrix::new(v).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> EdgePredictorModel {
    let params = MlpParams {
        w1: gaussian(rng, 2 * d, hidden) * 0.6,
        b1: Array1::from_shape_simple_fn(hidden, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
        w2: Array1::from_shape_simple_fn(hidden, || rng.sample(StandardNormal)),
        b2: 1.0,
    };
    EdgePredictorModel {
        params,
        config: EdgePredictorConfig::default(),
        initial_loss: 0.0,
        loss_history: vec![],
    }
}

/// Restricted mode with a complete index must select exactly what full mode
/// selects. Returns the number of graphs checked.
pub fn restricted_matches_full() -> Result<usize, String> {
    let graphs = 20;
    for g in 0..graphs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + g as u64);
        let n = rng.random_range(5..=100);
        let d = 6;
        let emb = embeddings(&mut rng, n, d);
        let model = random_model(&mut rng, d, 12);
        let mut edges = EdgeSet::new();
        for _ in 0..2 * n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.insert(Edge::new(a, b));
            }
        }
        let index = build_similarity_index(&emb, n - 1).map_err(|e| e.to_string())?;
        for (gamma, k) in [(0.5, 1), (0.7, 3), (0.9, 9), (0.99, 2)] {
            let full = select_important_edges(&model, &emb, &edges, gamma, k, CandidateMode::Full)
                .map_err(|e| e.to_string())?;
            let restricted = select_important_edges(&model, &emb, &edges, gamma, k, CandidateMode::Restricted(&index))
                .map_err(|e| e.to_string())?;
            if full != restricted {
                return Err(format!(
                    "graph {g} (n={n}) gamma {gamma} K {k}: full {} edges, restricted {}",
                    full.len(),
                    restricted.len()
                ));
            }
        }
    }
    Ok(graphs)
}

/// The similarity index against an all-pairs scan. Returns the number of
/// (graph, k_sim) cases checked.
pub fn similarity_index_matches_brute_force() -> Result<usize, String> {
    let mut cases = 0;
    for (g, n) in [2usize, 7, 40, 120, 200].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + g as u64);
        let emb = embeddings(&mut rng, n, 8);
        for k_sim in [1, 5, n - 1, n + 3] {
            let index = build_similarity_index(&emb, k_sim).map_err(|e| e.to_string())?;
            for i in 0..n {
                let mut all: Vec<Neighbor> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| Neighbor {
                        node: j,
                        score: cosine_similarity(emb.row_slice(i), emb.row_slice(j)).unwrap(),
                    })
                    .collect();
                all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
                all.truncate(k_sim);
                if index.neighbors(i) != all.as_slice() {
                    return Err(format!("n={n} k_sim={k_sim}: node {i} neighbours differ"));
                }
            }
            cases += 1;
        }
    }
    Ok(cases)
}
