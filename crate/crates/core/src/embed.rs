//! Node-text embeddings, cosine similarity, and similarity-based candidate
//! generation.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tag::{Edge, EdgeSet, TextAttributedGraph};

pub const DEFAULT_HASH_DIM: usize = 256;

/// Pair enumeration above this size switches to uniform sampling.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 10_000_000;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One embedding row per node. All values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some((idx, v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding entry ({}, {}) is not finite: {v}",
                idx.0, idx.1
            )));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(EmbeddingMatrix { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Row `i` as a contiguous slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        self.values.row(i).to_slice().expect("embedding rows are contiguous")
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    fn norms(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| norm(self.row_slice(i))).collect()
    }

    /// Cosine similarity between two rows.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row_slice(i), self.row_slice(j));
        cosine_from_parts(dot(a, b), norm(a), norm(b))
    }

    /// Writes the `node_id<TAB>v1<TAB>...` format.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, row) in self.values.rows().into_iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push('\t');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut offset = 0usize;
        for (lineno, line) in text.split_inclusive('\n').enumerate() {
            let line_offset = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                offset: line_offset,
                message: format!("line {}: {msg}", lineno + 1),
            };
            let mut fields = line.split('\t');
            let id: usize = fields
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| parse_err(format!("bad node id: {e}")))?;
            if id != rows.len() {
                return Err(parse_err(format!("expected node id {}, found {id}", rows.len())));
            }
            let row = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(parse_err(format!(
                        "row has {} values, expected {}",
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        EmbeddingMatrix::new(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum EmbeddingProvider {
    /// Precomputed embeddings in TSV format.
    File { path: PathBuf },
    /// Token-hashing bag of words, L2-normalized.
    Hash {
        #[serde(default = "default_hash_dim")]
        dim: usize,
    },
}

fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}

impl EmbeddingProvider {
    /// Builds a provider from its id. `file` requires a path.
    pub fn from_id(id: &str, path: Option<PathBuf>, dim: Option<usize>) -> Result<Self> {
        match id {
            "file" => path
                .map(|path| EmbeddingProvider::File { path })
                .ok_or_else(|| Error::Config("embedding provider `file` needs a path".into())),
            "hash" => Ok(EmbeddingProvider::Hash {
                dim: dim.unwrap_or(DEFAULT_HASH_DIM),
            }),
            other => Err(Error::Config(format!("unknown embedding provider `{other}`"))),
        }
    }
}

pub fn embed_texts(graph: &TextAttributedGraph, provider: &EmbeddingProvider) -> Result<EmbeddingMatrix> {
    match provider {
        EmbeddingProvider::Hash { dim } => hash_embed(graph.texts(), *dim),
        EmbeddingProvider::File { path } => {
            let emb = EmbeddingMatrix::load_tsv(path)?;
            if emb.rows() != graph.node_count() {
                return Err(Error::invalid(format!(
                    "{}: {} embedding rows for {} nodes",
                    path.display(),
                    emb.rows(),
                    graph.node_count()
                )));
            }
            Ok(emb)
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn hash_embed<S: AsRef<str>>(texts: &[S], dim: usize) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Config("hash embedding dim must be positive".into()));
    }
    let mut values = Array2::<f64>::zeros((texts.len(), dim));
    for (i, text) in texts.iter().enumerate() {
        let mut row = values.row_mut(i);
        for tok in tokenize(text.as_ref()) {
            row[(fnv1a(tok.as_bytes()) % dim as u64) as usize] += 1.0;
        }
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    EmbeddingMatrix::new(values)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_from_parts(dot(a, b), norm(a), norm(b)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub node: usize,
    pub score: f64,
}

/// Exact top-`k_sim` cosine neighbors of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityIndex {
    k_sim: usize,
    lists: Vec<Vec<Neighbor>>,
}

impl SimilarityIndex {
    pub fn k_sim(&self) -> usize {
        self.k_sim
    }

    pub fn neighbors(&self, node: usize) -> &[Neighbor] {
        &self.lists[node]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Descending by score, then ascending by node.
fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then(a.node.cmp(&b.node))
}

/// Brute-force pairwise scan. Rows are processed in parallel; each row's
/// result does not depend on the others.
pub fn build_similarity_index(emb: &EmbeddingMatrix, k_sim: usize) -> Result<SimilarityIndex> {
    if k_sim == 0 {
        return Err(Error::Config("k_sim must be at least 1".into()));
    }
    let norms = emb.norms();
    let n = emb.rows();
    let lists = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = emb.row_slice(i);
            let mut row: Vec<Neighbor> = (0..n)
                .filter(|&j| j != i)
                .map(|j| Neighbor {
                    node: j,
                    score: cosine_from_parts(dot(a, emb.row_slice(j)), norms[i], norms[j]),
                })
                .collect();
            if row.len() > k_sim {
                row.select_nth_unstable_by(k_sim - 1, neighbor_order);
                row.truncate(k_sim);
            }
            row.sort_by(neighbor_order);
            row
        })
        .collect();
    Ok(SimilarityIndex { k_sim, lists })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// Ascending by similarity, ties by lexicographic pair.
    pub pairs: Vec<(Edge, f64)>,
    /// Fewer than the requested count were available.
    pub partial: bool,
    /// Pairs were drawn from a uniform sample rather than enumerated.
    pub sampled: bool,
}

impl CandidateSet {
    pub fn edges(&self) -> EdgeSet {
        self.pairs.iter().map(|(e, _)| *e).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Scored(f64, Edge);

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `cap` smallest items seen.
struct LowestK {
    cap: usize,
    heap: BinaryHeap<Scored>,
}

impl LowestK {
    fn new(cap: usize) -> Self {
        LowestK {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    fn push(&mut self, item: Scored) {
        if self.heap.len() < self.cap {
            self.heap.push(item);
        } else if self.heap.peek().is_some_and(|top| item < *top) {
            self.heap.pop();
            self.heap.push(item);
        }
    }

    fn merge(mut self, other: LowestK) -> LowestK {
        for item in other.heap {
            self.push(item);
        }
        self
    }
}

/// The `count` non-excluded pairs with the lowest cosine similarity.
///
/// When the number of pairs exceeds [`EXHAUSTIVE_PAIR_LIMIT`], that many pairs
/// are sampled uniformly (with `seed`) and the lowest `count` of the sample
/// are returned instead.
pub fn low_similarity_candidates(
    emb: &EmbeddingMatrix,
    count: usize,
    exclude: &EdgeSet,
    seed: u64,
) -> Result<CandidateSet> {
    if count == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let n = emb.rows();
    let norms = emb.norms();
    let sim = |e: Edge| {
        cosine_from_parts(
            dot(emb.row_slice(e.u()), emb.row_slice(e.v())),
            norms[e.u()],
            norms[e.v()],
        )
    };
    let total_pairs = n * n.saturating_sub(1) / 2;
    let sampled = total_pairs > EXHAUSTIVE_PAIR_LIMIT;

    let lowest = if !sampled {
        (0..n)
            .into_par_iter()
            .fold(
                || LowestK::new(count),
                |mut acc, i| {
                    for j in i + 1..n {
                        let e = Edge::new(i, j);
                        if !exclude.contains(&e) {
                            acc.push(Scored(sim(e), e));
                        }
                    }
                    acc
                },
            )
            .reduce(|| LowestK::new(count), LowestK::merge)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut acc = LowestK::new(count);
        for _ in 0..EXHAUSTIVE_PAIR_LIMIT {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let e = Edge::new(i, j);
            if i == j || exclude.contains(&e) || !seen.insert(e) {
                continue;
            }
            acc.push(Scored(sim(e), e));
        }
        acc
    };

    let mut pairs: Vec<Scored> = lowest.heap.into_vec();
    pairs.sort();
    let partial = pairs.len() < count;
    if partial {
        log::warn!(
            "only {} low-similarity candidate pairs available (requested {count})",
            pairs.len()
        );
    }
    Ok(CandidateSet {
        pairs: pairs.into_iter().map(|Scored(s, e)| (e, s)).collect(),
        partial,
        sampled,
    })
}
