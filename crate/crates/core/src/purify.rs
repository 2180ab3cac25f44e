//! Threshold purification of a perturbed structure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::RelevanceJudgment;
use crate::tag::{Edge, EdgeDelta, EdgeSet};

pub const MIN_BETA: u8 = 1;
pub const MAX_BETA: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvEdge {
    pub count: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurificationReport {
    pub beta: u8,
    pub purified_edges: EdgeSet,
    /// Edges dropped by score, with the score that dropped them.
    pub removed: Vec<(Edge, u8)>,
    pub added: EdgeSet,
    /// Edges kept only because they have no score.
    pub unscored_preserved: Vec<Edge>,
    #[serde(default)]
    pub adv_edge: Option<AdvEdge>,
}

impl PurificationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tag::write_json_file(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::tag::parse_json_file(path)
    }

    /// One `i,j,score` line per removed edge, with a header.
    pub fn write_removal_csv(&self, path: &Path) -> Result<()> {
        let err = |e| Error::io(format!("writing {}", path.display()), e);
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "i,j,score").map_err(err)?;
        for (e, s) in &self.removed {
            writeln!(w, "{},{},{s}", e.u(), e.v()).map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

pub fn check_beta(beta: u8) -> Result<()> {
    if !(MIN_BETA..=MAX_BETA).contains(&beta) {
        return Err(Error::Config(format!(
            "beta must lie in {MIN_BETA}..={MAX_BETA}, got {beta}"
        )));
    }
    Ok(())
}

/// Keeps edges scored above `beta` and unscored edges, then adds `e_add`.
pub fn purify_graph(
    perturbed: &EdgeSet,
    judgments: &[RelevanceJudgment],
    e_add: &EdgeSet,
    beta: u8,
) -> Result<PurificationReport> {
    check_beta(beta)?;
    let mut scores: BTreeMap<Edge, Option<u8>> = BTreeMap::new();
    for j in judgments {
        if !perturbed.contains(&j.pair) {
            return Err(Error::invalid(format!(
                "judgment for {} which is not an edge of the graph",
                j.pair
            )));
        }
        // a scored verdict wins over a failed one for the same pair
        let slot = scores.entry(j.pair).or_insert(None);
        if slot.is_none() {
            *slot = j.score;
        }
    }
    if let Some(e) = e_add.iter().find(|e| perturbed.contains(e)) {
        return Err(Error::invalid(format!("edge {e} to add is already present")));
    }
    if let Some(e) = e_add.iter().find(|e| e.is_loop()) {
        return Err(Error::invalid(format!("edge {e} to add is a self-loop")));
    }

    let mut purified = EdgeSet::new();
    let mut removed = Vec::new();
    let mut unscored = Vec::new();
    for &e in perturbed {
        match scores.get(&e).copied().flatten() {
            Some(s) if s <= beta => removed.push((e, s)),
            Some(_) => {
                purified.insert(e);
            }
            None => {
                unscored.push(e);
                purified.insert(e);
            }
        }
    }
    if !unscored.is_empty() {
        log::warn!("{} edges have no score and are kept", unscored.len());
    }
    purified.extend(e_add.iter().copied());
    Ok(PurificationReport {
        beta,
        purified_edges: purified,
        removed,
        added: e_add.clone(),
        unscored_preserved: unscored,
        adv_edge: None,
    })
}

/// Number and fraction of attack-injected edges still present.
pub fn adv_edge_metric(report: &PurificationReport, truth: &EdgeDelta) -> Result<AdvEdge> {
    if truth.added.is_empty() {
        return Err(Error::invalid("attack injected no edges; AdvEdge is undefined"));
    }
    let count = truth.added.intersection(&report.purified_edges).count();
    Ok(AdvEdge {
        count,
        fraction: count as f64 / truth.added.len() as f64,
    })
}
