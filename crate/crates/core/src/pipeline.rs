//! End-to-end robustness harness.
//!
//! Per seed: split, train on the clean graph, attack, train on the attacked
//! graph, score every attacked edge, distil the scores into an edge
//! predictor, then grid-search `(β, γ, K)` on validation accuracy. Test
//! accuracy is computed once, for the selected grid point.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    adaptive_attack, dice_attack, pgd_structure_attack, random_flip_attack, targeted_surrogate_attack, AttackResult,
};
use crate::config::{AttackKind, AttackSpec, CandidateSpec, Dataset, ExperimentConfig};
use crate::edgepred::{
    build_training_set, derive_edge_labels, scan_nodes, train_edge_predictor, CandidateMode, EdgePredictorConfig,
    NodeScan,
};
use crate::embed::{build_similarity_index, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::gnn::{evaluate_gcn, train_gcn, GcnConfig, GcnModel};
use crate::purify::{adv_edge_metric, purify_graph, AdvEdge};
use crate::scorer::{RelevanceJudgment, Scorer};
use crate::tag::{edge_diff, random_split, Edge, EdgeSet, SplitMask, TextAttributedGraph};

/// Nodes above this degree are eligible targets for the targeted attack.
pub const TARGET_MIN_DEGREE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub result: AttackResult,
    /// Nodes the attack aimed at; empty for global attacks.
    pub targets: Vec<usize>,
}

/// Test nodes of degree above [`TARGET_MIN_DEGREE`] in a seeded order,
/// topped up with the highest-degree remaining test nodes.
pub fn pick_targets(graph: &TextAttributedGraph, test: &[usize], count: usize, seed: u64) -> Vec<usize> {
    let deg = graph.degrees();
    let mut eligible: Vec<usize> = test.iter().copied().filter(|&i| deg[i] > TARGET_MIN_DEGREE).collect();
    eligible.sort_unstable();
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    eligible.truncate(count);
    if eligible.len() < count {
        log::warn!(
            "only {} test nodes have degree above {TARGET_MIN_DEGREE}; adding lower-degree targets",
            eligible.len()
        );
        let mut rest: Vec<usize> = test.iter().copied().filter(|i| !eligible.contains(i)).collect();
        rest.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
        eligible.extend(rest.into_iter().take(count - eligible.len()));
    }
    eligible
}

pub fn run_attack(
    spec: &AttackSpec,
    data: &Dataset,
    split: &SplitMask,
    scorer: &Scorer,
    seed: u64,
) -> Result<AttackOutcome> {
    let g = &data.graph;
    let labels = g.labels();
    let x = &data.features;
    let result = match spec.name {
        AttackKind::None => AttackResult {
            attack_name: "none".into(),
            perturbed_edges: g.edges().clone(),
            delta: Default::default(),
            budget: 0,
            target: None,
            partial: false,
            margins: Vec::new(),
        },
        AttackKind::Dice => dice_attack(g, labels, spec.ptb_rate, seed)?,
        AttackKind::Random => random_flip_attack(g, spec.ptb_rate, seed)?,
        AttackKind::Pgd | AttackKind::Mettack | AttackKind::Minmax => {
            if spec.name != AttackKind::Pgd {
                log::info!("attack `{}` runs as the PGD structure attack", spec.name.name());
            }
            let mut r = pgd_structure_attack(g, x, labels, split, spec.ptb_rate, spec.steps, seed)?;
            r.attack_name = spec.name.name().into();
            r
        }
        AttackKind::Adaptive => adaptive_attack(g, labels, scorer, spec.ptb_rate, seed)?,
        AttackKind::Nettack => {
            let targets = pick_targets(g, &split.test, spec.num_targets, seed);
            let mut current = g.clone();
            let mut partial = false;
            for &t in &targets {
                let r = targeted_surrogate_attack(&current, x, labels, split, t, spec.n_perturb, seed)?;
                partial |= r.partial;
                current = r.perturbed_graph(&current)?;
            }
            let delta = edge_diff(g, current.edges())?;
            let result = AttackResult {
                attack_name: "nettack".into(),
                perturbed_edges: current.edges().clone(),
                budget: delta.len(),
                delta,
                target: None,
                partial,
                margins: Vec::new(),
            };
            return Ok(AttackOutcome { result, targets });
        }
    };
    Ok(AttackOutcome {
        result,
        targets: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: u8,
    pub gamma: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEval {
    #[serde(flatten)]
    pub point: GridPoint,
    pub val_accuracy: f64,
    pub removed: usize,
    pub added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub perturbations: usize,
    pub attack_partial: bool,
    /// Size of the evaluation mask (test set, or the attack targets).
    pub eval_nodes: usize,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub purified_accuracy: f64,
    pub selected: GridPoint,
    pub selected_val_accuracy: f64,
    pub adv_edge: Option<AdvEdge>,
    pub removed: usize,
    pub added: usize,
    pub unscored: usize,
    pub predictor_trained: bool,
    pub grid: Vec<GridEval>,
    pub wall_time_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation; absent for a single seed.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clean_accuracy: Option<Stat>,
    pub attacked_accuracy: Option<Stat>,
    pub purified_accuracy: Option<Stat>,
    pub adv_edge_count: Option<Stat>,
    pub adv_edge_fraction: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub graph_id: String,
    pub attack: String,
    pub ptb_rate: Option<f64>,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

impl ExperimentReport {
    fn new(cfg: &ExperimentConfig, graph_id: &str, runs: Vec<SeedRun>) -> Self {
        let col = |f: &dyn Fn(&SeedRun) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
        let summary = Summary {
            clean_accuracy: Stat::of(&col(&|r| Some(r.clean_accuracy))),
            attacked_accuracy: Stat::of(&col(&|r| Some(r.attacked_accuracy))),
            purified_accuracy: Stat::of(&col(&|r| Some(r.purified_accuracy))),
            adv_edge_count: Stat::of(&col(&|r| r.adv_edge.map(|a| a.count as f64))),
            adv_edge_fraction: Stat::of(&col(&|r| r.adv_edge.map(|a| a.fraction))),
        };
        let uses_rate = !matches!(cfg.attack.name, AttackKind::None | AttackKind::Nettack);
        ExperimentReport {
            name: cfg.name.clone(),
            graph_id: graph_id.to_owned(),
            attack: cfg.attack.name.name().into(),
            ptb_rate: uses_rate.then_some(cfg.attack.ptb_rate),
            runs,
            summary,
        }
    }

    /// The same report with wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for run in &mut r.runs {
            run.wall_time_ms = 0;
        }
        r
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::tag::write_json_file(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        crate::tag::parse_json_file(path)
    }

    /// One row per seed followed by `mean` and `std` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let err = |e| Error::io(format!("writing {}", path.display()), e);
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let rate = self.ptb_rate.map(|r| r.to_string()).unwrap_or_default();
        writeln!(
            w,
            "attack,ptb_rate,seed,beta,gamma,k,clean_acc,attacked_acc,purified_acc,adv_edge_count,adv_edge_fraction,removed,added,wall_time_ms"
        )
        .map_err(err)?;
        for r in &self.runs {
            let (count, frac) = r
                .adv_edge
                .map(|a| (a.count.to_string(), format!("{:.4}", a.fraction)))
                .unwrap_or_default();
            writeln!(
                w,
                "{},{rate},{},{},{},{},{:.4},{:.4},{:.4},{count},{frac},{},{},{}",
                self.attack,
                r.seed,
                r.selected.beta,
                r.selected.gamma,
                r.selected.k,
                r.clean_accuracy,
                r.attacked_accuracy,
                r.purified_accuracy,
                r.removed,
                r.added,
                r.wall_time_ms
            )
            .map_err(err)?;
        }
        let s = &self.summary;
        let cell = |st: &Option<Stat>, std: bool| -> String {
            match (st, std) {
                (Some(st), false) => format!("{:.4}", st.mean),
                (Some(Stat { std: Some(sd), .. }), true) => format!("{sd:.4}"),
                _ => String::new(),
            }
        };
        for (label, std) in [("mean", false), ("std", true)] {
            writeln!(
                w,
                "{},{rate},{label},,,,{},{},{},{},{},,,",
                self.attack,
                cell(&s.clean_accuracy, std),
                cell(&s.attacked_accuracy, std),
                cell(&s.purified_accuracy, std),
                cell(&s.adv_edge_count, std),
                cell(&s.adv_edge_fraction, std)
            )
            .map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

/// Grid-point order: β outermost, then γ, then K, as listed in the config.
pub fn grid_points(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let g = &cfg.grids;
    g.beta
        .iter()
        .flat_map(|&beta| {
            g.gamma
                .iter()
                .flat_map(move |&gamma| g.k.iter().map(move |&k| GridPoint { beta, gamma, k }))
        })
        .collect()
}

/// Every node's candidates above the smallest γ, ordered by probability.
/// Slicing a prefix yields the selection for any larger γ and smaller K.
struct AdditionTable {
    scans: Vec<NodeScan>,
}

impl AdditionTable {
    fn empty(n: usize) -> Self {
        AdditionTable {
            scans: vec![NodeScan::default(); n],
        }
    }

    fn select(&self, gamma: f64, k: usize) -> EdgeSet {
        let mut out = EdgeSet::new();
        for (i, scan) in self.scans.iter().enumerate() {
            for &(j, _) in scan.passing.iter().take_while(|p| p.1 > gamma).take(k) {
                out.insert(Edge::new(i, j));
            }
        }
        out
    }
}

fn predictor_additions(
    cfg: &ExperimentConfig,
    emb: &EmbeddingMatrix,
    perturbed: &EdgeSet,
    judgments: &[RelevanceJudgment],
    seed: u64,
) -> Result<Option<AdditionTable>> {
    let labeled = derive_edge_labels(judgments);
    let pairs = match build_training_set(&labeled, emb, perturbed, cfg.edge_predictor.candidate_count, seed) {
        Ok(p) => p,
        Err(Error::Validation(msg)) if msg.contains("untrainable") => {
            log::warn!("seed {seed}: {msg}; no edges will be added");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    if !pairs.iter().any(|p| p.label == 0) {
        log::warn!("seed {seed}: no negative pairs available; no edges will be added");
        return Ok(None);
    }
    let pcfg = EdgePredictorConfig {
        seed,
        ..cfg.edge_predictor.clone()
    };
    let model = train_edge_predictor(&pairs, emb, &pcfg)?;
    let gamma_min = cfg.grids.gamma.iter().copied().fold(f64::INFINITY, f64::min);
    let k_max = cfg.grids.k.iter().copied().max().unwrap_or(1);
    let index;
    let mode = match cfg.candidates {
        CandidateSpec::Full => CandidateMode::Full,
        CandidateSpec::Restricted { k_sim } => {
            index = build_similarity_index(emb, k_sim)?;
            CandidateMode::Restricted(&index)
        }
    };
    let scans = scan_nodes(&model, emb, perturbed, gamma_min, k_max, mode)?;
    Ok(Some(AdditionTable { scans }))
}

fn train_eval(
    edges: &EdgeSet,
    x: &Array2<f64>,
    labels: &[usize],
    split: &SplitMask,
    gnn: &GcnConfig,
) -> Result<GcnModel> {
    train_gcn(edges, x, labels, split, gnn)
}

/// Runs one seed of the experiment.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, scorer: &Scorer, seed: u64) -> Result<SeedRun> {
    let started = Instant::now();
    let g = &data.graph;
    let labels = g.labels();
    let x = &data.features;
    let split = random_split(g, seed)?;
    let gnn = GcnConfig {
        seed,
        ..cfg.gnn.clone()
    };

    let attack = run_attack(&cfg.attack, data, &split, scorer, seed)?;
    let eval_mask: &[usize] = if attack.targets.is_empty() {
        &split.test
    } else {
        &attack.targets
    };
    let perturbed = &attack.result.perturbed_edges;

    let clean_model = train_eval(g.edges(), x, labels, &split, &gnn)?;
    let clean_accuracy = evaluate_gcn(&clean_model, g.edges(), x, labels, eval_mask)?;
    let attacked_model = train_eval(perturbed, x, labels, &split, &gnn)?;
    let attacked_accuracy = evaluate_gcn(&attacked_model, perturbed, x, labels, eval_mask)?;

    let attacked_graph = g.with_edges(perturbed.iter().copied())?;
    let edges: Vec<Edge> = perturbed.iter().copied().collect();
    let judgments = scorer.score_edges(&attacked_graph, &edges)?;

    let additions = predictor_additions(cfg, &data.embeddings, perturbed, &judgments, seed)?;
    let predictor_trained = additions.is_some();
    let additions = additions.unwrap_or_else(|| AdditionTable::empty(g.node_count()));

    let points = grid_points(cfg);
    let mut reports = Vec::with_capacity(points.len());
    let mut distinct: BTreeMap<EdgeSet, usize> = BTreeMap::new();
    let mut structures: Vec<EdgeSet> = Vec::new();
    for p in &points {
        let add = additions.select(p.gamma, p.k);
        let report = purify_graph(perturbed, &judgments, &add, p.beta)?;
        let slot = *distinct.entry(report.purified_edges.clone()).or_insert_with(|| {
            structures.push(report.purified_edges.clone());
            structures.len() - 1
        });
        reports.push((report, slot));
    }
    let models: Vec<GcnModel> = structures
        .par_iter()
        .map(|edges| train_eval(edges, x, labels, &split, &gnn))
        .collect::<Result<_>>()?;

    let grid: Vec<GridEval> = points
        .iter()
        .zip(&reports)
        .map(|(p, (r, slot))| GridEval {
            point: *p,
            val_accuracy: models[*slot].best_val_accuracy,
            removed: r.removed.len(),
            added: r.added.len(),
        })
        .collect();
    // first strictly best wins, so ties keep grid order
    let best = grid
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if e.val_accuracy > grid[b].val_accuracy { i } else { b });
    let (report, slot) = &reports[best];
    let purified_accuracy = evaluate_gcn(&models[*slot], &report.purified_edges, x, labels, eval_mask)?;
    let adv_edge = if attack.result.delta.added.is_empty() {
        None
    } else {
        Some(adv_edge_metric(report, &attack.result.delta)?)
    };
    log::info!(
        "seed {seed}: clean {clean_accuracy:.4} attacked {attacked_accuracy:.4} purified {purified_accuracy:.4} \
         (beta {} gamma {} K {})",
        grid[best].point.beta,
        grid[best].point.gamma,
        grid[best].point.k
    );
    Ok(SeedRun {
        seed,
        perturbations: attack.result.budget,
        attack_partial: attack.result.partial,
        eval_nodes: eval_mask.len(),
        clean_accuracy,
        attacked_accuracy,
        purified_accuracy,
        selected: grid[best].point,
        selected_val_accuracy: grid[best].val_accuracy,
        adv_edge,
        removed: report.removed.len(),
        added: report.added.len(),
        unscored: report.unscored_preserved.len(),
        predictor_trained,
        grid,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

/// Runs seeds `cfg.seed .. cfg.seed + seeds` in order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    scorer: &Scorer,
    seeds: usize,
) -> Result<ExperimentReport> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    cfg.validate()?;
    let runs = (0..seeds as u64)
        .map(|i| run_seed(cfg, data, scorer, cfg.seed + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(cfg, &data.graph_id, runs))
}
