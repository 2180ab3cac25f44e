//! JSON experiment configuration and dataset/scorer assembly.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::edgepred::EdgePredictorConfig;
use crate::embed::{embed_texts, EmbeddingMatrix, EmbeddingProvider, DEFAULT_HASH_DIM};
use crate::error::{Error, Result};
use crate::gnn::GcnConfig;
use crate::purify::check_beta;
use crate::scorer::{Backend, RemoteJudge, RetryPolicy, ScoreCache, Scorer, API_KEY_ENV, DEFAULT_MAX_IN_FLIGHT};
use crate::synth::{synth_graph, SynthConfig};
use crate::tag::{load_graph, TextAttributedGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// A graph file in the node/edge JSON format.
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Features attached to the dataset, else the text embeddings.
    #[default]
    Auto,
    Embeddings,
    /// A TSV matrix in the embedding file format.
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Dice,
    Random,
    Pgd,
    Mettack,
    Minmax,
    Nettack,
    Adaptive,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Dice => "dice",
            AttackKind::Random => "random",
            AttackKind::Pgd => "pgd",
            AttackKind::Mettack => "mettack",
            AttackKind::Minmax => "minmax",
            AttackKind::Nettack => "nettack",
            AttackKind::Adaptive => "adaptive",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown attack `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub name: AttackKind,
    /// Budget as a fraction of the clean edge count.
    pub ptb_rate: f64,
    /// Flips per target for `nettack`.
    pub n_perturb: usize,
    /// Number of target nodes for `nettack`.
    pub num_targets: usize,
    /// Iterations for the gradient attacks.
    pub steps: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            name: AttackKind::Dice,
            ptb_rate: 0.2,
            n_perturb: 1,
            num_targets: 10,
            steps: crate::attack::PGD_DEFAULT_STEPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Replay,
    Heuristic,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "replay" => Ok(BackendKind::Replay),
            "heuristic" => Ok(BackendKind::Heuristic),
            other => Err(Error::Config(format!("unknown scorer backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSpec {
    pub backend: BackendKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// JSONL score cache; in-memory when absent.
    pub cache: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec {
            backend: BackendKind::Heuristic,
            base_url: None,
            model: None,
            cache: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout_secs: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub beta: Vec<u8>,
    pub gamma: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            beta: vec![2, 3, 4],
            gamma: vec![0.91, 0.93, 0.95, 0.97, 0.99],
            k: vec![1, 3, 5, 7, 9],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum CandidateSpec {
    #[default]
    Full,
    Restricted {
        k_sim: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionSpec {
    /// Attacks whose deltas form the query set; the main attack when empty.
    pub attacks: Vec<AttackSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default = "default_embeddings")]
    pub embeddings: EmbeddingProvider,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub candidates: CandidateSpec,
    #[serde(default)]
    pub edge_predictor: EdgePredictorConfig,
    #[serde(default)]
    pub gnn: GcnConfig,
    #[serde(default)]
    pub instructions: InstructionSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_embeddings() -> EmbeddingProvider {
    EmbeddingProvider::Hash { dim: DEFAULT_HASH_DIM }
}

impl ExperimentConfig {
    pub fn synth(synth: SynthConfig) -> Self {
        ExperimentConfig {
            name: default_name(),
            dataset: DatasetSpec::Synth(synth),
            embeddings: default_embeddings(),
            features: FeatureSpec::default(),
            attack: AttackSpec::default(),
            scorer: ScorerSpec::default(),
            grids: Grids::default(),
            candidates: CandidateSpec::default(),
            edge_predictor: EdgePredictorConfig::default(),
            gnn: GcnConfig::default(),
            instructions: InstructionSpec::default(),
            seed: 0,
        }
    }

    /// Parses and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = crate::tag::parse_json_file(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tag::write_json_file(path, self)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSpec::Path(p) = &mut self.dataset {
            fix(p);
        }
        if let EmbeddingProvider::File { path } = &mut self.embeddings {
            fix(path);
        }
        if let FeatureSpec::File { path } = &mut self.features {
            fix(path);
        }
        if let Some(p) = &mut self.scorer.cache {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grids;
        if g.beta.is_empty() || g.gamma.is_empty() || g.k.is_empty() {
            return Err(Error::Config("hyperparameter grids must be non-empty".into()));
        }
        for &b in &g.beta {
            check_beta(b)?;
        }
        if let Some(x) = g.gamma.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(Error::Config(format!("gamma grid value {x} outside (0, 1)")));
        }
        if g.k.contains(&0) {
            return Err(Error::Config("K grid values must be at least 1".into()));
        }
        if let CandidateSpec::Restricted { k_sim: 0 } = self.candidates {
            return Err(Error::Config("k_sim must be at least 1".into()));
        }
        for a in std::iter::once(&self.attack).chain(&self.instructions.attacks) {
            let uses_rate = !matches!(a.name, AttackKind::None | AttackKind::Nettack);
            if uses_rate && !(a.ptb_rate > 0.0 && a.ptb_rate <= 1.0) {
                return Err(Error::Config(format!("ptb_rate {} outside (0, 1]", a.ptb_rate)));
            }
            if a.name == AttackKind::Nettack && (a.n_perturb == 0 || a.num_targets == 0) {
                return Err(Error::Config(
                    "nettack needs n_perturb and num_targets of at least 1".into(),
                ));
            }
        }
        if self.scorer.backend == BackendKind::Remote && (self.scorer.base_url.is_none() || self.scorer.model.is_none())
        {
            return Err(Error::Config("remote scorer needs base_url and model".into()));
        }
        Ok(())
    }

    /// Identifier of the graph that score caches are keyed to.
    pub fn graph_id(&self) -> String {
        match &self.dataset {
            DatasetSpec::Synth(s) => s.graph_id(),
            DatasetSpec::Path(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".into()),
        }
    }
}

/// A loaded graph with its text embeddings and GCN input features.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: TextAttributedGraph,
    pub embeddings: EmbeddingMatrix,
    pub features: Array2<f64>,
    pub graph_id: String,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let graph = match &cfg.dataset {
        DatasetSpec::Path(p) => load_graph(p)?,
        DatasetSpec::Synth(s) => synth_graph(s)?,
    };
    let embeddings = embed_texts(&graph, &cfg.embeddings)?;
    let features = match &cfg.features {
        FeatureSpec::Auto => graph.features().cloned().unwrap_or_else(|| embeddings.values().clone()),
        FeatureSpec::Embeddings => embeddings.values().clone(),
        FeatureSpec::File { path } => {
            let m = EmbeddingMatrix::load_tsv(path)?;
            if m.rows() != graph.node_count() {
                return Err(Error::invalid(format!(
                    "{}: {} feature rows for {} nodes",
                    path.display(),
                    m.rows(),
                    graph.node_count()
                )));
            }
            m.into_values()
        }
    };
    Ok(Dataset {
        graph,
        embeddings,
        features,
        graph_id: cfg.graph_id(),
    })
}

/// Builds the scorer described by `spec`. `backend` overrides the
/// configured backend kind.
pub fn build_scorer(
    spec: &ScorerSpec,
    graph_id: &str,
    embeddings: &EmbeddingMatrix,
    backend: Option<BackendKind>,
) -> Result<Scorer> {
    let cache = match &spec.cache {
        Some(p) => ScoreCache::open(p, graph_id)?,
        None => ScoreCache::in_memory(graph_id),
    };
    let backend = match backend.unwrap_or(spec.backend) {
        BackendKind::Heuristic => Backend::heuristic(embeddings.clone()),
        BackendKind::Replay => Backend::Replay,
        BackendKind::Remote => {
            let (Some(url), Some(model)) = (&spec.base_url, &spec.model) else {
                return Err(Error::Config("remote scorer needs base_url and model".into()));
            };
            Backend::Live(Box::new(RemoteJudge::with_options(
                url,
                model,
                std::env::var(API_KEY_ENV).ok(),
                RetryPolicy::default(),
                Duration::from_secs(spec.timeout_secs),
            )?))
        }
    };
    Ok(Scorer::new(backend, cache).with_max_in_flight(spec.max_in_flight))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"dataset": {"synth": {}}}"#).unwrap();
        assert_eq!(cfg.grids.gamma, vec![0.91, 0.93, 0.95, 0.97, 0.99]);
        assert_eq!(cfg.grids.k, vec![1, 3, 5, 7, 9]);
        assert_eq!(cfg.grids.beta, vec![2, 3, 4]);
        assert_eq!(cfg.gnn.hidden, 16);
        assert_eq!(cfg.edge_predictor.hidden, 256);
        assert_eq!(cfg.scorer.backend, BackendKind::Heuristic);
        assert_eq!(cfg.embeddings, EmbeddingProvider::Hash { dim: 256 });
        cfg.validate().unwrap();
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"{
            "name": "cora-dice",
            "dataset": {"path": "cora.json"},
            "embeddings": {"provider": "file", "path": "cora.tsv"},
            "features": {"source": "embeddings"},
            "attack": {"name": "nettack", "n_perturb": 2, "num_targets": 5},
            "scorer": {"backend": "remote", "base_url": "http://localhost:8000", "model": "m", "cache": "scores.jsonl"},
            "grids": {"beta": [1, 2], "gamma": [0.95], "k": [3]},
            "candidates": {"mode": "restricted", "k_sim": 20},
            "seed": 4
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.candidates, CandidateSpec::Restricted { k_sim: 20 });
        assert_eq!(cfg.attack.name, AttackKind::Nettack);
        assert_eq!(cfg.graph_id(), "cora");
        let back: ExperimentConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"dataset": {"path": "g.json"}, "scorer": {"cache": "s.jsonl"}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset, DatasetSpec::Path(dir.path().join("g.json")));
        assert_eq!(cfg.scorer.cache, Some(dir.path().join("s.jsonl")));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            r#"{"dataset": {"synth": {}}, "grids": {"beta": []}}"#,
            r#"{"dataset": {"synth": {}}, "grids": {"beta": [7]}}"#,
            r#"{"dataset": {"synth": {}}, "grids": {"gamma": [1.0]}}"#,
            r#"{"dataset": {"synth": {}}, "grids": {"k": [0]}}"#,
            r#"{"dataset": {"synth": {}}, "attack": {"ptb_rate": 0.0}}"#,
            r#"{"dataset": {"synth": {}}, "scorer": {"backend": "remote"}}"#,
        ];
        for text in bad {
            let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
        }
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dataset": {"synth": {}}, "sede": 1}"#).is_err());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("DICE".parse::<AttackKind>().unwrap(), AttackKind::Dice);
        assert!("fgsm".parse::<AttackKind>().is_err());
        assert_eq!("replay".parse::<BackendKind>().unwrap(), BackendKind::Replay);
    }

    #[test]
    fn synth_dataset_uses_attached_features() {
        let cfg = ExperimentConfig::synth(SynthConfig::default());
        let d = load_dataset(&cfg).unwrap();
        assert_eq!(d.features.ncols(), 16);
        assert_eq!(d.embeddings.dim(), 256);
        let cfg = ExperimentConfig {
            features: FeatureSpec::Embeddings,
            ..cfg
        };
        assert_eq!(load_dataset(&cfg).unwrap().features.ncols(), 256);
    }
}
