//! Text-attributed graphs, splits, edge deltas and classification accuracy.
//!
//! Every graph is an immutable value. Operations that change structure
//! return a new graph, and edge changes are always expressed as an
//! [`EdgeDelta`] against the graph they apply to.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An unordered node pair stored as `(min, max)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge(usize, usize);

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn u(self) -> usize {
        self.0
    }

    pub fn v(self) -> usize {
        self.1
    }

    pub fn is_loop(self) -> bool {
        self.0 == self.1
    }

    /// The endpoint that is not `node`. Assumes `node` is an endpoint.
    pub fn other(self, node: usize) -> usize {
        if self.0 == node {
            self.1
        } else {
            self.0
        }
    }
}

impl fmt::Debug for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.0, self.1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[usize; 2]>::deserialize(d)?;
        Ok(Edge::new(a, b))
    }
}

pub type EdgeSet = BTreeSet<Edge>;

/// Checks that every edge lies inside `[0, node_count)` and is not a self-loop.
pub fn check_edges<'a>(edges: impl IntoIterator<Item = &'a Edge>, node_count: usize) -> Result<()> {
    for e in edges {
        if e.v() >= node_count {
            return Err(Error::invalid(format!(
                "edge [{},{}]: endpoint {} out of range for {} nodes",
                e.u(),
                e.v(),
                e.v(),
                node_count
            )));
        }
        if e.is_loop() {
            return Err(Error::invalid(format!("self-loop at node {}", e.u())));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAttributedGraph {
    texts: Vec<String>,
    labels: Vec<usize>,
    edges: EdgeSet,
    features: Option<Array2<f64>>,
}

impl TextAttributedGraph {
    pub fn new(texts: Vec<String>, labels: Vec<usize>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::invalid("graph has no nodes"));
        }
        if texts.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} texts but {} labels",
                texts.len(),
                labels.len()
            )));
        }
        let edges: EdgeSet = edges.into_iter().collect();
        check_edges(&edges, texts.len())?;
        Ok(TextAttributedGraph {
            texts,
            labels,
            edges,
            features: None,
        })
    }

    /// Same nodes, different structure.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let edges: EdgeSet = edges.into_iter().collect();
        check_edges(&edges, self.node_count())?;
        Ok(TextAttributedGraph { edges, ..self.clone() })
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.node_count() {
            return Err(Error::invalid(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                self.node_count()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.texts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, node: usize) -> &str {
        &self.texts[node]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f.ncols())
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&Edge::new(a, b))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count()];
        for e in &self.edges {
            deg[e.u()] += 1;
            deg[e.v()] += 1;
        }
        deg
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        adjacency_lists(&self.edges, self.node_count())
    }

    pub fn apply_delta(&self, delta: &EdgeDelta) -> Result<Self> {
        let edges = apply_delta(&self.edges, delta, self.node_count())?;
        Ok(TextAttributedGraph { edges, ..self.clone() })
    }
}

pub fn adjacency_lists(edges: &EdgeSet, node_count: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); node_count];
    for e in edges {
        adj[e.u()].push(e.v());
        adj[e.v()].push(e.u());
    }
    adj
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    text: String,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<[i64; 2]>,
}

/// Byte offset of a serde_json error position (1-based line and column).
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn parse_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub(crate) fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a graph from the `{"nodes":[...],"edges":[...]}` JSON format.
///
/// Node ids must cover `0..n` exactly once. Duplicate edges (in either
/// orientation) collapse to one.
pub fn load_graph(path: &Path) -> Result<TextAttributedGraph> {
    let file: GraphFile = parse_json_file(path)?;
    graph_from_file(file)
}

fn graph_from_file(file: GraphFile) -> Result<TextAttributedGraph> {
    let n = file.nodes.len();
    let mut texts: Vec<Option<String>> = vec![None; n];
    let mut labels = vec![0; n];
    for (k, node) in file.nodes.into_iter().enumerate() {
        if node.id >= n {
            return Err(Error::invalid(format!("node #{k}: id {} outside 0..{n}", node.id)));
        }
        if texts[node.id].is_some() {
            return Err(Error::invalid(format!("node #{k}: duplicate id {}", node.id)));
        }
        texts[node.id] = Some(node.text);
        labels[node.id] = node.label;
    }
    let texts: Vec<String> = texts.into_iter().map(|t| t.unwrap_or_default()).collect();

    let mut edges = EdgeSet::new();
    for (k, &[a, b]) in file.edges.iter().enumerate() {
        let in_range = |x: i64| x >= 0 && (x as usize) < n;
        if !in_range(a) || !in_range(b) {
            return Err(Error::invalid(format!(
                "edge #{k} [{a},{b}]: endpoint out of range for {n} nodes"
            )));
        }
        if a == b {
            return Err(Error::invalid(format!("edge #{k}: self-loop at node {a}")));
        }
        edges.insert(Edge::new(a as usize, b as usize));
    }
    TextAttributedGraph::new(texts, labels, edges)
}

pub fn save_graph(graph: &TextAttributedGraph, path: &Path) -> Result<()> {
    let file = GraphFile {
        nodes: graph
            .texts
            .iter()
            .zip(&graph.labels)
            .enumerate()
            .map(|(id, (text, &label))| NodeRecord {
                id,
                text: text.clone(),
                label,
            })
            .collect(),
        edges: graph.edges.iter().map(|e| [e.u() as i64, e.v() as i64]).collect(),
    };
    write_json_file(path, &file)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMask {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitMask {
    /// Builds a split, checking the sets are non-empty, disjoint and cover `0..node_count`.
    pub fn new(mut train: Vec<usize>, mut val: Vec<usize>, mut test: Vec<usize>, node_count: usize) -> Result<Self> {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let split = SplitMask { train, val, test };
        split.validate(node_count)?;
        Ok(split)
    }

    pub fn validate(&self, node_count: usize) -> Result<()> {
        let mut seen = vec![false; node_count];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if set.is_empty() {
                return Err(Error::invalid(format!("{name} split is empty")));
            }
            for &i in set {
                if i >= node_count {
                    return Err(Error::invalid(format!(
                        "{name} split: node {i} out of range for {node_count} nodes"
                    )));
                }
                if seen[i] {
                    return Err(Error::invalid(format!("{name} split: node {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("node {missing} is in no split")));
        }
        Ok(())
    }

    pub fn load(path: &Path, node_count: usize) -> Result<Self> {
        let split: SplitMask = parse_json_file(path)?;
        SplitMask::new(split.train, split.val, split.test, node_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }
}

/// Uniform (unstratified) 10% / 10% / 80% split. The train and val sizes
/// round half up; test takes the remainder.
pub fn random_split(graph: &TextAttributedGraph, seed: u64) -> Result<SplitMask> {
    let n = graph.node_count();
    if n < 10 {
        return Err(Error::invalid("graph too small to split"));
    }
    let tenth = (n + 5) / 10;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..tenth].to_vec();
    let val = order[tenth..2 * tenth].to_vec();
    let test = order[2 * tenth..].to_vec();
    SplitMask::new(train, val, test, n)
}

/// Added and removed pairs relative to a base edge set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDelta {
    pub added: EdgeSet,
    pub removed: EdgeSet,
}

impl EdgeDelta {
    pub fn len(&self) -> usize {
        self.added.len() + self.removed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }

    /// Checks the delta is applicable to `base`.
    pub fn validate_against(&self, base: &EdgeSet) -> Result<()> {
        if let Some(e) = self.added.intersection(&self.removed).next() {
            return Err(Error::invalid(format!("pair {e:?} is both added and removed")));
        }
        if let Some(e) = self.removed.iter().find(|e| !base.contains(e)) {
            return Err(Error::invalid(format!("removed pair {e:?} is not an edge")));
        }
        if let Some(e) = self.added.iter().find(|e| base.contains(e)) {
            return Err(Error::invalid(format!("added pair {e:?} is already an edge")));
        }
        Ok(())
    }
}

pub fn edge_diff(clean: &TextAttributedGraph, perturbed: &EdgeSet) -> Result<EdgeDelta> {
    check_edges(perturbed, clean.node_count())?;
    Ok(EdgeDelta {
        added: perturbed.difference(clean.edges()).copied().collect(),
        removed: clean.edges().difference(perturbed).copied().collect(),
    })
}

/// `(base \ removed) ∪ added`, after checking the delta fits `base`.
pub fn apply_delta(base: &EdgeSet, delta: &EdgeDelta, node_count: usize) -> Result<EdgeSet> {
    delta.validate_against(base)?;
    check_edges(&delta.added, node_count)?;
    let mut out: EdgeSet = base.difference(&delta.removed).copied().collect();
    out.extend(delta.added.iter().copied());
    Ok(out)
}

/// Fraction of `mask` nodes whose prediction matches the label.
pub fn accuracy(predictions: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("accuracy over an empty mask"));
    }
    let mut correct = 0usize;
    for &i in mask {
        let (Some(p), Some(l)) = (predictions.get(i), labels.get(i)) else {
            return Err(Error::invalid(format!("mask index {i} not covered by predictions")));
        };
        if p == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}
