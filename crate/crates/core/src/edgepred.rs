//! Edge predictor distilled from relevance scores.
//!
//! A one-hidden-layer MLP reads `h_i ‖ h_j` and outputs the probability that
//! the pair is an important edge. Inference averages both orientations so
//! the prediction is symmetric.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{low_similarity_candidates, EmbeddingMatrix, SimilarityIndex};
use crate::error::{Error, Result};
use crate::gnn::Checkpoint;
use crate::optim::{glorot, Adam};
use crate::scorer::RelevanceJudgment;
use crate::tag::{Edge, EdgeSet};

/// Scores strictly above this are labelled important.
pub const LABEL_THRESHOLD: u8 = 4;
pub const DEFAULT_CANDIDATE_COUNT: usize = 4000;
const CHECKPOINT_KIND: &str = "edge_predictor";

pub fn edge_label(score: u8) -> u8 {
    u8::from(score > LABEL_THRESHOLD)
}

/// `(pair, label)` for every scored judgment; unscored ones are skipped.
pub fn derive_edge_labels(judgments: &[RelevanceJudgment]) -> Vec<(Edge, u8)> {
    judgments
        .iter()
        .filter_map(|j| j.score.map(|s| (j.pair, edge_label(s))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub pair: Edge,
    pub label: u8,
    /// Drawn from the low-similarity candidate set rather than scored.
    pub sampled: bool,
}

/// Balances labelled pairs into a training set.
///
/// Missing negatives are drawn (seeded) from the `count_target` lowest
/// similarity pairs outside `exclude_edges` and the labelled pairs. Surplus
/// negatives are subsampled down to the number of positives.
pub fn build_training_set(
    labeled: &[(Edge, u8)],
    emb: &EmbeddingMatrix,
    exclude_edges: &EdgeSet,
    count_target: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mut positives: Vec<Edge> = labeled.iter().filter(|l| l.1 == 1).map(|l| l.0).collect();
    let mut negatives: Vec<Edge> = labeled.iter().filter(|l| l.1 == 0).map(|l| l.0).collect();
    positives.sort_unstable();
    positives.dedup();
    negatives.sort_unstable();
    negatives.dedup();
    negatives.retain(|e| positives.binary_search(e).is_err());
    if positives.is_empty() {
        return Err(Error::invalid("predictor untrainable: no positive pairs"));
    }
    for e in positives.iter().chain(&negatives) {
        if e.v() >= emb.rows() || e.is_loop() {
            return Err(Error::invalid(format!("pair {e} outside the embedding matrix")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match negatives.len().cmp(&positives.len()) {
        Ordering::Greater => {
            negatives.shuffle(&mut rng);
            negatives.truncate(positives.len());
            negatives.sort_unstable();
        }
        Ordering::Less => {
            let need = positives.len() - negatives.len();
            let mut exclude = exclude_edges.clone();
            exclude.extend(positives.iter().copied());
            exclude.extend(negatives.iter().copied());
            let pool = low_similarity_candidates(emb, count_target.max(1), &exclude, seed)?.edges();
            let pool: Vec<Edge> = pool.into_iter().collect();
            if pool.len() < need {
                log::warn!(
                    "candidate set holds {} pairs, {need} needed; training set stays unbalanced",
                    pool.len()
                );
            }
            let mut drawn: Vec<Edge> = pool.choose_multiple(&mut rng, need.min(pool.len())).copied().collect();
            drawn.sort_unstable();
            let mut out = to_pairs(&positives, &negatives);
            out.extend(drawn.into_iter().map(|pair| TrainingPair {
                pair,
                label: 0,
                sampled: true,
            }));
            return Ok(out);
        }
        Ordering::Equal => {}
    }
    Ok(to_pairs(&positives, &negatives))
}

fn to_pairs(positives: &[Edge], negatives: &[Edge]) -> Vec<TrainingPair> {
    positives
        .iter()
        .map(|&pair| TrainingPair {
            pair,
            label: 1,
            sampled: false,
        })
        .chain(negatives.iter().map(|&pair| TrainingPair {
            pair,
            label: 0,
            sampled: false,
        }))
        .collect()
}

/// Feature rows `h_i‖h_j` and `h_j‖h_i` for each pair, with labels.
pub fn feature_rows(pairs: &[TrainingPair], emb: &EmbeddingMatrix) -> (Array2<f64>, Vec<f64>) {
    let d = emb.dim();
    let mut x = Array2::zeros((2 * pairs.len(), 2 * d));
    let mut y = Vec::with_capacity(2 * pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let (a, b) = (emb.row(p.pair.u()), emb.row(p.pair.v()));
        x.slice_mut(s![2 * k, ..d]).assign(&a);
        x.slice_mut(s![2 * k, d..]).assign(&b);
        x.slice_mut(s![2 * k + 1, ..d]).assign(&b);
        x.slice_mut(s![2 * k + 1, d..]).assign(&a);
        y.extend([f64::from(p.label); 2]);
    }
    (x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgePredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub zero_init_output: bool,
    pub candidate_count: usize,
}

impl Default for EdgePredictorConfig {
    fn default() -> Self {
        EdgePredictorConfig {
            hidden: 256,
            epochs: 200,
            batch_size: 512,
            lr: 1e-3,
            seed: 0,
            zero_init_output: false,
            candidate_count: DEFAULT_CANDIDATE_COUNT,
        }
    }
}

/// MLP weights: `x (2d) → ReLU(x·W1 + b1) (hidden) → ·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((input_dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn len(&self) -> usize {
        self.w1.len() + 2 * self.hidden() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `w1` row-major, then `b1`, `w2`, `b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.push(self.b2);
        out
    }

    pub fn from_flat(input_dim: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let mut p = MlpParams::zeros(input_dim, hidden);
        if flat.len() != p.len() {
            return Err(Error::invalid(format!(
                "edge predictor expects {} parameters, got {}",
                p.len(),
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(p.w1.len());
        let (b1, rest) = rest.split_at(hidden);
        let (w2, rest) = rest.split_at(hidden);
        p.w1 = Array2::from_shape_vec((input_dim, hidden), w1.to_vec()).expect("shape checked");
        p.b1 = Array1::from(b1.to_vec());
        p.w2 = Array1::from(w2.to_vec());
        p.b2 = rest[0];
        Ok(p)
    }

    fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of the MLP over fixed rows.
pub struct EdgePredictorObjective<'a> {
    x: &'a Array2<f64>,
    y: &'a [f64],
}

impl<'a> EdgePredictorObjective<'a> {
    pub fn new(x: &'a Array2<f64>, y: &'a [f64]) -> Self {
        assert_eq!(x.nrows(), y.len());
        EdgePredictorObjective { x, y }
    }

    fn logits(p: &MlpParams, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let pre = x.dot(&p.w1) + &p.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let z = hidden.dot(&p.w2) + p.b2;
        (pre, z)
    }

    pub fn loss(&self, p: &MlpParams) -> f64 {
        let (_, z) = Self::logits(p, self.x);
        bce(&z, self.y)
    }

    pub fn loss_and_grad(&self, p: &MlpParams) -> (f64, MlpParams) {
        batch_loss_and_grad(p, self.x, self.y)
    }
}

fn bce(z: &Array1<f64>, y: &[f64]) -> f64 {
    let total: f64 = z.iter().zip(y).map(|(&z, &y)| softplus(z) - y * z).sum();
    total / y.len() as f64
}

fn batch_loss_and_grad(p: &MlpParams, x: &Array2<f64>, y: &[f64]) -> (f64, MlpParams) {
    let (pre, z) = EdgePredictorObjective::logits(p, x);
    let loss = bce(&z, y);
    let m = y.len() as f64;
    let dz: Array1<f64> = z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) / m).collect();
    let hidden = pre.mapv(|v| v.max(0.0));
    let gw2 = hidden.t().dot(&dz);
    let gb2 = dz.sum();
    let mut dh = dz.view().insert_axis(Axis(1)).dot(&p.w2.view().insert_axis(Axis(0)));
    dh.zip_mut_with(&pre, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    let gw1 = x.t().dot(&dh);
    let gb1 = dh.sum_axis(Axis(0));
    (
        loss,
        MlpParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgePredictorModel {
    pub params: MlpParams,
    pub config: EdgePredictorConfig,
    /// Full-data loss before the first update.
    pub initial_loss: f64,
    /// Full-data loss after each epoch.
    pub loss_history: Vec<f64>,
}

impl EdgePredictorModel {
    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(self.initial_loss)
    }

    fn check_dims(&self, emb: &EmbeddingMatrix) -> Result<()> {
        if self.input_dim() != 2 * emb.dim() {
            return Err(Error::invalid(format!(
                "edge predictor takes {}-dim pairs, embeddings are {}-dim",
                self.input_dim(),
                emb.dim()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            dims: vec![self.params.input_dim(), self.params.hidden()],
            seed: self.config.seed,
            config: serde_json::json!({
                "training": self.config,
                "initial_loss": self.initial_loss,
                "loss_history": self.loss_history,
            }),
            params: self.params.to_flat(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims = ck.expect_dims(CHECKPOINT_KIND, 2)?;
        let params = MlpParams::from_flat(dims[0], dims[1], &ck.params)?;
        let field = |k: &str| ck.config.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let bad = |e: serde_json::Error| Error::invalid(format!("edge predictor checkpoint config: {e}"));
        let config: EdgePredictorConfig = serde_json::from_value(field("training")).map_err(bad)?;
        let initial_loss = field("initial_loss").as_f64().unwrap_or(f64::NAN);
        let loss_history: Vec<f64> = serde_json::from_value(field("loss_history")).map_err(bad)?;
        Ok(EdgePredictorModel {
            params,
            config,
            initial_loss,
            loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn train_edge_predictor(
    pairs: &[TrainingPair],
    emb: &EmbeddingMatrix,
    config: &EdgePredictorConfig,
) -> Result<EdgePredictorModel> {
    if config.hidden == 0 || config.batch_size == 0 {
        return Err(Error::Config(
            "edge predictor hidden width and batch size must be positive".into(),
        ));
    }
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::invalid("predictor untrainable: training set needs both labels"));
    }
    let (x, y) = feature_rows(pairs, emb);
    let input_dim = x.ncols();
    let h = config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = MlpParams::zeros(input_dim, h);
    p.w1 = Array2::from_shape_vec((input_dim, h), glorot(&mut rng, input_dim, h, input_dim * h)).expect("shape");
    if !config.zero_init_output {
        p.w2 = Array1::from(glorot(&mut rng, h, 1, h));
    }

    let objective = EdgePredictorObjective::new(&x, &y);
    let initial_loss = objective.loss(&p);
    let mut opt = Adam::new(p.len(), config.lr);
    let mut flat = p.to_flat();
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&r| y[r]).collect();
            let (loss, grad) = batch_loss_and_grad(&p, &xb, &yb);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "edge predictor loss is {loss} at epoch {epoch}"
                )));
            }
            opt.step(&mut flat, &grad.to_flat());
            p = MlpParams::from_flat(input_dim, h, &flat)?;
        }
        let loss = objective.loss(&p);
        if !loss.is_finite() || !p.is_finite() {
            return Err(Error::Numerical(format!("edge predictor diverged at epoch {epoch}")));
        }
        history.push(loss);
    }
    log::debug!(
        "edge predictor: {} rows, loss {initial_loss:.4} -> {:.4}",
        y.len(),
        history.last().copied().unwrap_or(initial_loss)
    );
    Ok(EdgePredictorModel {
        params: p,
        config: config.clone(),
        initial_loss,
        loss_history: history,
    })
}

/// Fraction of training rows classified correctly at threshold 0.5.
pub fn training_accuracy(model: &EdgePredictorModel, pairs: &[TrainingPair], emb: &EmbeddingMatrix) -> f64 {
    let (x, y) = feature_rows(pairs, emb);
    let (_, z) = EdgePredictorObjective::logits(&model.params, &x);
    let hits = z.iter().zip(&y).filter(|(&z, &y)| (z > 0.0) == (y > 0.5)).count();
    hits as f64 / y.len() as f64
}

/// Per-node halves of the first layer: `left[i] = h_i·W1[..d]` and
/// `right[i] = h_i·W1[d..]`, computed row by row so that every caller sees
/// identical values.
struct Projections {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

fn project_row(h: &[f64], w: ndarray::ArrayView2<'_, f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.ncols()];
    for (&hk, wrow) in h.iter().zip(w.rows()) {
        if hk != 0.0 {
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += hk * wv;
            }
        }
    }
    out
}

impl Projections {
    fn for_nodes(p: &MlpParams, emb: &EmbeddingMatrix, nodes: impl Iterator<Item = usize>) -> Self {
        let d = emb.dim();
        let top = p.w1.slice(s![..d, ..]);
        let bottom = p.w1.slice(s![d.., ..]);
        let (left, right) = nodes
            .map(|i| {
                (
                    project_row(emb.row_slice(i), top),
                    project_row(emb.row_slice(i), bottom),
                )
            })
            .unzip();
        Projections { left, right }
    }

    fn logit(&self, p: &MlpParams, a: &[f64], b: &[f64]) -> f64 {
        let mut z = p.b2;
        for k in 0..p.b1.len() {
            let v = a[k] + b[k] + p.b1[k];
            if v > 0.0 {
                z += v * p.w2[k];
            }
        }
        z
    }

    /// Orientation-averaged probability of the pair `(a, b)` given by
    /// indices into this projection table.
    fn prob(&self, p: &MlpParams, a: usize, b: usize) -> f64 {
        let f = sigmoid(self.logit(p, &self.left[a], &self.right[b]));
        let g = sigmoid(self.logit(p, &self.left[b], &self.right[a]));
        clamp_open((f + g) / 2.0)
    }
}

/// Keeps probabilities strictly inside (0, 1) when the logit saturates.
fn clamp_open(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn predict_edge(model: &EdgePredictorModel, emb: &EmbeddingMatrix, pair: (usize, usize)) -> Result<f64> {
    model.check_dims(emb)?;
    let (i, j) = pair;
    if i >= emb.rows() || j >= emb.rows() {
        return Err(Error::invalid(format!("pair ({i}, {j}) outside the embedding matrix")));
    }
    let proj = Projections::for_nodes(&model.params, emb, [i, j].into_iter());
    Ok(proj.prob(&model.params, 0, 1))
}

#[derive(Clone, Copy, Debug)]
pub enum CandidateMode<'a> {
    /// Every non-neighbour of the node.
    Full,
    /// Only the node's similarity-index list, minus current neighbours.
    Restricted(&'a SimilarityIndex),
}

/// Result of one node's candidate scan.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeScan {
    /// Chosen `(j, prob)`, highest probability first.
    pub selected: Vec<(usize, f64)>,
    /// Every candidate with probability above gamma, same order.
    pub passing: Vec<(usize, f64)>,
}

fn check_selection_args(gamma: f64, k: usize) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(())
}

/// Scans every node's candidates. Returns one [`NodeScan`] per node.
pub fn scan_nodes(
    model: &EdgePredictorModel,
    emb: &EmbeddingMatrix,
    perturbed: &EdgeSet,
    gamma: f64,
    k: usize,
    candidates: CandidateMode<'_>,
) -> Result<Vec<NodeScan>> {
    model.check_dims(emb)?;
    check_selection_args(gamma, k)?;
    let n = emb.rows();
    crate::tag::check_edges(perturbed, n)?;
    if let CandidateMode::Restricted(index) = candidates {
        if index.len() != n {
            return Err(Error::invalid(format!(
                "similarity index covers {} nodes, embeddings {n}",
                index.len()
            )));
        }
    }
    let proj = Projections::for_nodes(&model.params, emb, 0..n);
    let p = &model.params;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let eligible = |j: usize| j != i && !perturbed.contains(&Edge::new(i, j));
            let mut passing: Vec<(usize, f64)> = match candidates {
                CandidateMode::Full => (0..n)
                    .filter(|&j| eligible(j))
                    .map(|j| (j, proj.prob(p, i, j)))
                    .filter(|&(_, q)| q > gamma)
                    .collect(),
                CandidateMode::Restricted(index) => index
                    .neighbors(i)
                    .iter()
                    .map(|nb| nb.node)
                    .filter(|&j| eligible(j))
                    .map(|j| (j, proj.prob(p, i, j)))
                    .filter(|&(_, q)| q > gamma)
                    .collect(),
            };
            passing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let selected = passing.iter().take(k).copied().collect();
            NodeScan { selected, passing }
        })
        .collect())
}

/// Union over nodes of the top-`k` non-neighbours whose predicted
/// probability exceeds `gamma`.
pub fn select_important_edges(
    model: &EdgePredictorModel,
    emb: &EmbeddingMatrix,
    perturbed: &EdgeSet,
    gamma: f64,
    k: usize,
    candidates: CandidateMode<'_>,
) -> Result<EdgeSet> {
    let scans = scan_nodes(model, emb, perturbed, gamma, k, candidates)?;
    Ok(scans
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.selected.iter().map(move |&(j, _)| Edge::new(i, j)))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct AddedEdges {
    added: EdgeSet,
}

pub fn save_added_edges(edges: &EdgeSet, path: &Path) -> Result<()> {
    crate::tag::write_json_file(path, &AddedEdges { added: edges.clone() })
}

pub fn load_added_edges(path: &Path, node_count: usize) -> Result<EdgeSet> {
    let a: AddedEdges = crate::tag::parse_json_file(path)?;
    crate::tag::check_edges(&a.added, node_count)?;
    Ok(a.added)
}
