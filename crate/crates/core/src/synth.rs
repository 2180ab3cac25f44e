//! Two-block stochastic block model with class-templated node texts.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tag::{Edge, EdgeSet, TextAttributedGraph};

/// Disjoint per-class vocabularies. Texts only draw from their own class.
pub const CLASS_VOCABULARY: [&[&str]; 2] = [
    &[
        "quantum", "lattice", "photon", "boson", "spin", "magnet", "neutrino", "crystal", "laser", "thermal",
        "fermion", "orbit",
    ],
    &[
        "genome", "neuron", "virus", "tissue", "mitosis", "hormone", "antibody", "cortex", "organism", "synapse",
        "vaccine", "bacteria",
    ],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Distinct vocabulary words per node text.
    pub words_per_node: usize,
    pub feature_dim: usize,
    /// Per-coordinate class-mean offset of the unit-variance features.
    pub feature_signal: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 200,
            p_in: 0.10,
            p_out: 0.01,
            words_per_node: 8,
            feature_dim: 16,
            feature_signal: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn graph_id(&self) -> String {
        format!("synth-n{}-s{}", self.nodes, self.seed)
    }
}

/// Nodes `0..n/2` form class 0, the rest class 1. Features are attached:
/// `x_i ~ N(±signal·1, I)` with the sign given by the class.
pub fn synth_graph(cfg: &SynthConfig) -> Result<TextAttributedGraph> {
    let vocab_len = CLASS_VOCABULARY.iter().map(|v| v.len()).min().unwrap_or(0);
    if cfg.nodes < 2 {
        return Err(Error::Config("synthetic graph needs at least 2 nodes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_in) || !(0.0..=1.0).contains(&cfg.p_out) {
        return Err(Error::Config("edge probabilities must lie in [0, 1]".into()));
    }
    if cfg.words_per_node == 0 || cfg.words_per_node > vocab_len {
        return Err(Error::Config(format!("words_per_node must lie in 1..={vocab_len}")));
    }
    if cfg.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be positive".into()));
    }
    let n = cfg.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();

    let mut edges = EdgeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random_bool(p) {
                edges.insert(Edge::new(i, j));
            }
        }
    }

    let texts: Vec<String> = labels
        .iter()
        .map(|&c| {
            let words: Vec<&str> = CLASS_VOCABULARY[c]
                .choose_multiple(&mut rng, cfg.words_per_node)
                .copied()
                .collect();
            words.join(" ")
        })
        .collect();

    let features = Array2::from_shape_fn((n, cfg.feature_dim), |(i, _)| {
        let sign = if labels[i] == 0 { -1.0 } else { 1.0 };
        let noise: f64 = rng.sample(StandardNormal);
        sign * cfg.feature_signal + noise
    });
    TextAttributedGraph::new(texts, labels, edges)?.with_features(features)
}
