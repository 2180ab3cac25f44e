//! Structure poisoning attacks. Every attack returns the perturbed edge set
//! together with the exact delta against the clean graph.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{self, SurrogateConfig, SurrogateModel};
use crate::scorer::Scorer;
use crate::tag::{apply_delta, Edge, EdgeDelta, EdgeSet, SplitMask, TextAttributedGraph};

/// Smallest relevance score an adaptive insertion must receive.
pub const ADAPTIVE_MIN_SCORE: u8 = 4;
/// Adaptive sampling stops after this many candidates per unit of budget.
pub const ADAPTIVE_SAMPLE_FACTOR: usize = 100;

pub const PGD_DEFAULT_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub attack_name: String,
    pub perturbed_edges: EdgeSet,
    pub delta: EdgeDelta,
    /// Number of realized perturbations.
    pub budget: usize,
    pub target: Option<usize>,
    /// The attack stopped before reaching its requested budget.
    pub partial: bool,
    /// Surrogate margins of the target before and after each greedy step.
    pub margins: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AttackFile {
    attack: String,
    budget: usize,
    added: Vec<Edge>,
    removed: Vec<Edge>,
    target: Option<usize>,
    partial: bool,
}

impl AttackResult {
    fn from_delta(
        name: &str,
        clean: &TextAttributedGraph,
        delta: EdgeDelta,
        target: Option<usize>,
        partial: bool,
    ) -> Result<Self> {
        let perturbed_edges = apply_delta(clean.edges(), &delta, clean.node_count())?;
        Ok(AttackResult {
            attack_name: name.to_owned(),
            perturbed_edges,
            budget: delta.len(),
            delta,
            target,
            partial,
            margins: Vec::new(),
        })
    }

    pub fn perturbed_graph(&self, clean: &TextAttributedGraph) -> Result<TextAttributedGraph> {
        clean.with_edges(self.perturbed_edges.iter().copied())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(AttackFile {
            attack: self.attack_name.clone(),
            budget: self.budget,
            added: self.delta.added.iter().copied().collect(),
            removed: self.delta.removed.iter().copied().collect(),
            target: self.target,
            partial: self.partial,
        })
        .expect("attack result serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tag::write_json_file(path, &self.to_json())
    }

    /// Reads a saved result and re-applies it to `clean`.
    pub fn load(path: &Path, clean: &TextAttributedGraph) -> Result<Self> {
        let file: AttackFile = crate::tag::parse_json_file(path)?;
        let delta = EdgeDelta {
            added: file.added.into_iter().collect(),
            removed: file.removed.into_iter().collect(),
        };
        if delta.len() != file.budget {
            return Err(Error::invalid(format!(
                "{}: budget {} but delta has {} entries",
                path.display(),
                file.budget,
                delta.len()
            )));
        }
        AttackResult::from_delta(&file.attack, clean, delta, file.target, file.partial)
    }
}

/// `round(rate · |E|)`, which must be at least one.
pub fn budget_for(ptb_rate: f64, edge_count: usize) -> Result<usize> {
    if !(ptb_rate.is_finite() && ptb_rate > 0.0) {
        return Err(Error::Attack(format!(
            "perturbation rate must be positive, got {ptb_rate}"
        )));
    }
    let budget = (ptb_rate * edge_count as f64).round() as usize;
    if budget == 0 {
        return Err(Error::Attack(format!(
            "perturbation rate {ptb_rate} on {edge_count} edges gives a zero budget"
        )));
    }
    Ok(budget)
}

fn infeasible() -> Error {
    Error::Attack("attack budget infeasible".into())
}

fn total_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Uniform sampler over cross-label pairs that are not in `current`.
struct CrossLabelSampler<'a> {
    labels: &'a [usize],
    available: usize,
}

impl<'a> CrossLabelSampler<'a> {
    fn new(labels: &'a [usize], current: &EdgeSet) -> Self {
        let mut counts = std::collections::HashMap::<usize, usize>::new();
        for &l in labels {
            *counts.entry(l).or_default() += 1;
        }
        let n = labels.len();
        let same: usize = counts.values().map(|c| c * c).sum();
        let cross_total = (n * n - same) / 2;
        let cross_edges = current.iter().filter(|e| labels[e.u()] != labels[e.v()]).count();
        CrossLabelSampler {
            labels,
            available: cross_total - cross_edges,
        }
    }

    /// Draws one available pair, skipping anything in `current` or `skip`.
    fn draw<R: Rng>(&self, rng: &mut R, current: &EdgeSet, skip: &HashSet<Edge>) -> Option<Edge> {
        let n = self.labels.len();
        let usable = |e: Edge| self.labels[e.u()] != self.labels[e.v()] && !current.contains(&e) && !skip.contains(&e);
        let free = self.available.saturating_sub(skip.len());
        if free == 0 {
            return None;
        }
        // Rejection sampling needs about n²/(2·free) draws; enumerate when that gets large.
        if free.saturating_mul(64) >= n * n {
            loop {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                let e = Edge::new(i, j);
                if i != j && usable(e) {
                    return Some(e);
                }
            }
        }
        let all: Vec<Edge> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| Edge::new(i, j)))
            .filter(|&e| usable(e))
            .collect();
        all.choose(rng).copied()
    }
}

/// Delete-internal, connect-external. Each step deletes a random same-label
/// edge or inserts a random cross-label non-edge with equal probability,
/// falling back to the other move when one is exhausted.
pub fn dice_attack(graph: &TextAttributedGraph, labels: &[usize], ptb_rate: f64, seed: u64) -> Result<AttackResult> {
    if labels.len() != graph.node_count() {
        return Err(Error::invalid("one label per node required"));
    }
    let budget = budget_for(ptb_rate, graph.edge_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = graph.edges().clone();
    let mut internal: Vec<Edge> = current
        .iter()
        .copied()
        .filter(|e| labels[e.u()] == labels[e.v()])
        .collect();
    let mut sampler = CrossLabelSampler::new(labels, &current);
    let no_skip = HashSet::new();
    let mut delta = EdgeDelta::default();

    for _ in 0..budget {
        let can_delete = !internal.is_empty();
        let can_insert = sampler.available > 0;
        let delete = match (can_delete, can_insert) {
            (false, false) => return Err(infeasible()),
            (true, true) => rng.random_bool(0.5),
            (d, _) => d,
        };
        if delete {
            let e = internal.swap_remove(rng.random_range(0..internal.len()));
            current.remove(&e);
            delta.removed.insert(e);
        } else {
            let e = sampler.draw(&mut rng, &current, &no_skip).ok_or_else(infeasible)?;
            current.insert(e);
            sampler.available -= 1;
            delta.added.insert(e);
        }
    }
    AttackResult::from_delta("dice", graph, delta, None, false)
}

/// Flips `budget` distinct uniformly random pairs.
pub fn random_flip_attack(graph: &TextAttributedGraph, ptb_rate: f64, seed: u64) -> Result<AttackResult> {
    let budget = budget_for(ptb_rate, graph.edge_count())?;
    let n = graph.node_count();
    let pairs = total_pairs(n);
    if budget > pairs {
        return Err(infeasible());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Edge> = if budget * 2 <= pairs {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(budget);
        while out.len() < budget {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && seen.insert(Edge::new(i, j)) {
                out.push(Edge::new(i, j));
            }
        }
        out
    } else {
        let mut all: Vec<Edge> = (0..n).flat_map(|i| (i + 1..n).map(move |j| Edge::new(i, j))).collect();
        all.shuffle(&mut rng);
        all.truncate(budget);
        all
    };
    let mut delta = EdgeDelta::default();
    for e in chosen {
        if graph.edges().contains(&e) {
            delta.removed.insert(e);
        } else {
            delta.added.insert(e);
        }
    }
    AttackResult::from_delta("random", graph, delta, None, false)
}

/// Logit of the true class minus the best other logit.
pub fn classification_margin(logits: &[f64], label: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - other
}

/// Mutable neighbor sets for evaluating single-node surrogate logits.
struct LocalGraph {
    adj: Vec<BTreeSet<usize>>,
}

impl LocalGraph {
    fn new(edges: &EdgeSet, n: usize) -> Self {
        let mut adj = vec![BTreeSet::new(); n];
        for e in edges {
            adj[e.u()].insert(e.v());
            adj[e.v()].insert(e.u());
        }
        LocalGraph { adj }
    }

    fn flip(&mut self, a: usize, b: usize) {
        if !self.adj[a].remove(&b) {
            self.adj[a].insert(b);
            self.adj[b].insert(a);
        } else {
            self.adj[b].remove(&a);
        }
    }

    fn inv_sqrt_deg(&self, k: usize) -> f64 {
        1.0 / ((self.adj[k].len() + 1) as f64).sqrt()
    }

    /// Row `t` of `Â²·projected`.
    fn target_logits(&self, t: usize, projected: &Array2<f64>) -> Vec<f64> {
        let c = projected.ncols();
        let mut out = vec![0.0; c];
        let st = self.inv_sqrt_deg(t);
        for k in std::iter::once(t).chain(self.adj[t].iter().copied()) {
            let sk = self.inv_sqrt_deg(k);
            let mut m = vec![0.0; c];
            for l in std::iter::once(k).chain(self.adj[k].iter().copied()) {
                let w = sk * self.inv_sqrt_deg(l);
                for (mv, &p) in m.iter_mut().zip(projected.row(l)) {
                    *mv += w * p;
                }
            }
            let w = st * sk;
            for (o, mv) in out.iter_mut().zip(&m) {
                *o += w * mv;
            }
        }
        out
    }
}

/// Greedy direct attack on `target` against a fixed surrogate. Each step
/// applies the single flip incident to `target` that minimizes its margin.
pub fn targeted_with_surrogate(
    graph: &TextAttributedGraph,
    surrogate: &SurrogateModel,
    features: &Array2<f64>,
    labels: &[usize],
    target: usize,
    n_perturb: usize,
) -> Result<AttackResult> {
    let n = graph.node_count();
    if target >= n {
        return Err(Error::invalid(format!("target {target} out of range for {n} nodes")));
    }
    if n_perturb == 0 {
        return Err(Error::Attack("n_perturb must be at least 1".into()));
    }
    let projected = surrogate.projected(features);
    let label = labels[target];
    let mut local = LocalGraph::new(graph.edges(), n);
    let mut flipped: HashSet<usize> = HashSet::new();
    let mut margins = vec![classification_margin(&local.target_logits(target, &projected), label)];

    for _ in 0..n_perturb {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| j != target && !flipped.contains(&j)) {
            local.flip(target, j);
            let m = classification_margin(&local.target_logits(target, &projected), label);
            local.flip(target, j);
            if best.is_none_or(|(bm, _)| m < bm) {
                best = Some((m, j));
            }
        }
        let Some((margin, j)) = best else {
            if flipped.is_empty() {
                return Err(Error::Attack(format!("no legal flip for target {target}")));
            }
            break;
        };
        local.flip(target, j);
        flipped.insert(j);
        margins.push(margin);
    }

    let mut delta = EdgeDelta::default();
    for &j in &flipped {
        let e = Edge::new(target, j);
        if graph.edges().contains(&e) {
            delta.removed.insert(e);
        } else {
            delta.added.insert(e);
        }
    }
    let partial = flipped.len() < n_perturb;
    let mut result = AttackResult::from_delta("nettack", graph, delta, Some(target), partial)?;
    result.margins = margins;
    Ok(result)
}

/// Nettack-style direct attack on one node using an internally trained
/// linearized surrogate.
pub fn targeted_surrogate_attack(
    graph: &TextAttributedGraph,
    features: &Array2<f64>,
    labels: &[usize],
    split: &SplitMask,
    target: usize,
    n_perturb: usize,
    seed: u64,
) -> Result<AttackResult> {
    if n_perturb == 0 {
        return Err(Error::Attack("n_perturb must be at least 1".into()));
    }
    let config = SurrogateConfig {
        seed,
        ..SurrogateConfig::default()
    };
    let surrogate = gnn::surrogate_fit(graph.edges(), features, labels, split, &config)?;
    targeted_with_surrogate(graph, &surrogate, features, labels, target, n_perturb)
}

/// Euclidean projection onto `{p ∈ [0,1]^m : Σp ≤ budget}`.
pub fn project_budget(p: &mut [f64], budget: f64) {
    for v in p.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let sum: f64 = p.iter().sum();
    if sum <= budget {
        return;
    }
    let mass = |mu: f64, p: &[f64]| p.iter().map(|v| (v - mu).clamp(0.0, 1.0)).sum::<f64>();
    let mut lo = p.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid, p) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    for v in p.iter_mut() {
        *v = (*v - hi).clamp(0.0, 1.0);
    }
}

fn pair_index(n: usize) -> Vec<Edge> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| Edge::new(i, j))).collect()
}

/// First-order structure attack against a fixed surrogate: projected
/// gradient ascent of the training loss over continuous flip variables,
/// then the `budget` largest are flipped.
pub fn pgd_with_surrogate(
    graph: &TextAttributedGraph,
    surrogate: &SurrogateModel,
    features: &Array2<f64>,
    labels: &[usize],
    train: &[usize],
    budget: usize,
    steps: usize,
) -> Result<AttackResult> {
    if steps == 0 {
        return Err(Error::Attack("PGD needs at least one step".into()));
    }
    let n = graph.node_count();
    let pairs = pair_index(n);
    if budget == 0 || budget > pairs.len() {
        return Err(infeasible());
    }
    let projected = surrogate.projected(features);
    let clean = gnn::dense_adjacency(graph.edges(), n);
    let mut p = vec![0.0; pairs.len()];
    let mut effective = clean.clone();

    for step in 1..=steps {
        for (e, &pv) in pairs.iter().zip(&p) {
            let a = clean[[e.u(), e.v()]];
            let v = a + (1.0 - 2.0 * a) * pv;
            effective[[e.u(), e.v()]] = v;
            effective[[e.v(), e.u()]] = v;
        }
        let (loss, grad) = gnn::surrogate_adjacency_gradient(&projected, &effective, labels, train);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("surrogate diverged".into()));
        }
        let lr = 0.1 * budget as f64 / (step as f64).sqrt();
        for (e, pv) in pairs.iter().zip(p.iter_mut()) {
            let a = clean[[e.u(), e.v()]];
            *pv += lr * grad[[e.u(), e.v()]] * (1.0 - 2.0 * a);
        }
        project_budget(&mut p, budget as f64);
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut delta = EdgeDelta::default();
    for &k in &order[..budget] {
        let e = pairs[k];
        if graph.edges().contains(&e) {
            delta.removed.insert(e);
        } else {
            delta.added.insert(e);
        }
    }
    AttackResult::from_delta("pgd", graph, delta, None, false)
}

/// PGD structure attack with a surrogate trained on the clean graph.
/// Also serves requests for Mettack and Minmax.
pub fn pgd_structure_attack(
    graph: &TextAttributedGraph,
    features: &Array2<f64>,
    labels: &[usize],
    split: &SplitMask,
    ptb_rate: f64,
    steps: usize,
    seed: u64,
) -> Result<AttackResult> {
    let budget = budget_for(ptb_rate, graph.edge_count())?;
    let config = SurrogateConfig {
        seed,
        ..SurrogateConfig::default()
    };
    let surrogate = gnn::surrogate_fit(graph.edges(), features, labels, split, &config)?;
    pgd_with_surrogate(graph, &surrogate, features, labels, &split.train, budget, steps)
}

/// Cross-label insertions that the scorer rates at least
/// [`ADAPTIVE_MIN_SCORE`], so they survive purification. Sampling stops
/// after `100 × budget` candidates; the result is then flagged partial.
pub fn adaptive_attack(
    graph: &TextAttributedGraph,
    labels: &[usize],
    scorer: &Scorer,
    ptb_rate: f64,
    seed: u64,
) -> Result<AttackResult> {
    if labels.len() != graph.node_count() {
        return Err(Error::invalid("one label per node required"));
    }
    let budget = budget_for(ptb_rate, graph.edge_count())?;
    let cap = ADAPTIVE_SAMPLE_FACTOR * budget;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = CrossLabelSampler::new(labels, graph.edges());
    let mut tried: HashSet<Edge> = HashSet::new();
    let mut delta = EdgeDelta::default();

    'outer: while delta.added.len() < budget && tried.len() < cap {
        let want = ((budget - delta.added.len()) * 2).max(8).min(cap - tried.len());
        let mut batch = Vec::with_capacity(want);
        for _ in 0..want {
            match sampler.draw(&mut rng, graph.edges(), &tried) {
                Some(e) => {
                    tried.insert(e);
                    batch.push(e);
                }
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        for j in scorer.score_edges(graph, &batch)? {
            if j.score.is_some_and(|s| s >= ADAPTIVE_MIN_SCORE) {
                delta.added.insert(j.pair);
                if delta.added.len() == budget {
                    break 'outer;
                }
            }
        }
    }
    let partial = delta.added.len() < budget;
    if partial {
        log::warn!(
            "adaptive attack found {} of {budget} insertions after {} candidates",
            delta.added.len(),
            tried.len()
        );
    }
    AttackResult::from_delta("adaptive", graph, delta, None, partial)
}
