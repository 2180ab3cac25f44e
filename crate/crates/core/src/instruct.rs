//! Instruction-tuning dataset construction from attack deltas.
//!
//! Attack-added edges form the negative (malicious) query set, attack-removed
//! edges the positive (important) set, topped up with clean edges until the
//! two are balanced. Scored queries pass a polarity filter before export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{render_prompt, RelevanceJudgment, Scorer};
use crate::tag::{Edge, EdgeDelta, EdgeSet, TextAttributedGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Scores a judgment must have to survive the post-processing filter.
    pub fn accepts(self, score: u8) -> bool {
        match self {
            Polarity::Negative => (1..=3).contains(&score),
            Polarity::Positive => (4..=6).contains(&score),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryEdgeSet {
    pub negatives: EdgeSet,
    pub positives: EdgeSet,
}

impl QueryEdgeSet {
    pub fn all(&self) -> EdgeSet {
        self.negatives.union(&self.positives).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.negatives.len() + self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_query_edges(clean: &TextAttributedGraph, deltas: &[EdgeDelta], balance_seed: u64) -> Result<QueryEdgeSet> {
    let mut query = QueryEdgeSet::default();
    for delta in deltas {
        delta.validate_against(clean.edges())?;
        query.negatives.extend(delta.added.iter().copied());
        query.positives.extend(delta.removed.iter().copied());
    }
    if query.positives.len() < query.negatives.len() {
        let mut spare: Vec<Edge> = clean
            .edges()
            .iter()
            .copied()
            .filter(|e| !query.positives.contains(e))
            .collect();
        spare.shuffle(&mut ChaCha8Rng::seed_from_u64(balance_seed));
        let need = query.negatives.len() - query.positives.len();
        query.positives.extend(spare.into_iter().take(need));
    }
    Ok(query)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JudgedEdge {
    pub pair: Edge,
    pub polarity: Polarity,
    pub judgment: RelevanceJudgment,
}

/// Scores every query edge, negatives first, each group in pair order.
pub fn collect_judgments(
    graph: &TextAttributedGraph,
    query: &QueryEdgeSet,
    scorer: &Scorer,
) -> Result<Vec<JudgedEdge>> {
    let tagged: Vec<(Edge, Polarity)> = query
        .negatives
        .iter()
        .map(|&e| (e, Polarity::Negative))
        .chain(query.positives.iter().map(|&e| (e, Polarity::Positive)))
        .collect();
    let pairs: Vec<Edge> = tagged.iter().map(|t| t.0).collect();
    let judgments = scorer.score_edges(graph, &pairs)?;
    Ok(tagged
        .into_iter()
        .zip(judgments)
        .map(|((pair, polarity), judgment)| JudgedEdge {
            pair,
            polarity,
            judgment,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    #[serde(skip)]
    pub pair: Option<Edge>,
    #[serde(skip)]
    pub polarity: Option<Polarity>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub records: Vec<InstructionRecord>,
    pub dropped_unscored: usize,
    pub dropped_by_rule: usize,
}

/// Keeps negatives scored 1–3 and positives scored 4–6. Unscored
/// judgments are dropped.
pub fn filter_judgments(graph: &TextAttributedGraph, judged: &[JudgedEdge]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for j in judged {
        let (Some(score), Some(response)) = (j.judgment.score, j.judgment.response_text()) else {
            out.dropped_unscored += 1;
            continue;
        };
        if !j.polarity.accepts(score) {
            out.dropped_by_rule += 1;
            continue;
        }
        let prompt = render_prompt(graph.text(j.pair.u()), graph.text(j.pair.v()));
        out.records.push(InstructionRecord {
            instruction: prompt.system,
            input: prompt.user,
            output: response,
            pair: Some(j.pair),
            polarity: Some(j.polarity),
        });
    }
    if out.dropped_unscored > 0 {
        log::warn!("{} unscored judgments left out of the dataset", out.dropped_unscored);
    }
    out
}

/// Writes one `{"instruction","input","output"}` object per line and
/// returns the number written.
pub fn export_instruction_dataset(records: &[InstructionRecord], path: &Path) -> Result<usize> {
    if records.is_empty() {
        log::warn!("exporting an empty instruction dataset to {}", path.display());
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(records.len())
}

pub fn load_instruction_dataset(path: &Path) -> Result<Vec<InstructionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: start + e.column().saturating_sub(1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub negatives: usize,
    pub positives: usize,
    pub queried: usize,
    pub dropped_unscored: usize,
    pub dropped_by_filter: usize,
    pub kept_negatives: usize,
    pub kept_positives: usize,
    pub exported: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub graph_id: String,
    pub attacks: Vec<serde_json::Value>,
    pub counts: DatasetCounts,
}

impl DatasetManifest {
    pub fn new(graph_id: &str, attacks: Vec<serde_json::Value>, query: &QueryEdgeSet, outcome: &FilterOutcome) -> Self {
        let kept = |p| outcome.records.iter().filter(|r| r.polarity == Some(p)).count();
        DatasetManifest {
            graph_id: graph_id.to_owned(),
            attacks,
            counts: DatasetCounts {
                negatives: query.negatives.len(),
                positives: query.positives.len(),
                queried: query.len(),
                dropped_unscored: outcome.dropped_unscored,
                dropped_by_filter: outcome.dropped_by_rule,
                kept_negatives: kept(Polarity::Negative),
                kept_positives: kept(Polarity::Positive),
                exported: outcome.records.len(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tag::write_json_file(path, self)
    }
}
