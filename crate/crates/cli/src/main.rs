use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use graphsieve_core::attack::AttackResult;
use graphsieve_core::config::{build_scorer, load_dataset, BackendKind, Dataset, ExperimentConfig};
use graphsieve_core::edgepred::{
    build_training_set, derive_edge_labels, save_added_edges, select_important_edges, train_edge_predictor,
    CandidateMode, EdgePredictorModel,
};
use graphsieve_core::embed::build_similarity_index;
use graphsieve_core::gnn::{evaluate_gcn, train_gcn, Checkpoint, GcnModel};
use graphsieve_core::instruct::{
    build_query_edges, collect_judgments, export_instruction_dataset, filter_judgments, DatasetManifest,
};
use graphsieve_core::pipeline::{run_attack, run_experiment};
use graphsieve_core::purify::{adv_edge_metric, purify_graph, PurificationReport};
use graphsieve_core::scorer::{load_judgments, save_judgments, Scorer, Source};
use graphsieve_core::tag::{random_split, save_graph, EdgeSet, SplitMask};
use graphsieve_core::{config::CandidateSpec, Error};

#[derive(Parser, Debug)]
#[command(
    name = "graphsieve",
    version,
    about = "Purify poisoned text-attributed graphs with an edge-relevance scorer"
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Number of seeds for `pipeline` and `build-instructions`.
    #[arg(long, global = true, default_value_t = 10)]
    seeds: usize,
    /// Directory for stage artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the configured scorer backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Remote,
    Replay,
    Heuristic,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Remote => BackendKind::Remote,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Heuristic => BackendKind::Heuristic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Structure {
    Clean,
    Attacked,
    Purified,
}

impl Structure {
    fn name(self) -> &'static str {
        match self {
            Structure::Clean => "clean",
            Structure::Attacked => "attacked",
            Structure::Purified => "purified",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the graph and run the configured attack.
    Attack,
    /// Attack, score the query edges and export the instruction dataset.
    BuildInstructions,
    /// Score every edge of the attacked graph.
    ScoreEdges,
    /// Train the edge predictor on the edge scores.
    TrainEdgePredictor,
    /// Remove low-scored edges and add predicted ones.
    Purify {
        #[arg(long)]
        beta: u8,
        /// Probability threshold for added edges; no edges are added without it.
        #[arg(long, requires = "k")]
        gamma: Option<f64>,
        /// Additions per node.
        #[arg(long, requires = "gamma")]
        k: Option<usize>,
    },
    /// Train a GCN on one of the stage structures.
    TrainGnn {
        #[arg(long, value_enum, default_value = "purified")]
        structure: Structure,
    },
    /// Test accuracy of a trained GCN.
    Evaluate {
        #[arg(long, value_enum, default_value = "purified")]
        structure: Structure,
    },
    /// Full attack, purification and evaluation over several seeds.
    Pipeline,
}

/// A stage input that another subcommand should have produced.
#[derive(Debug)]
struct MissingArtifact {
    path: PathBuf,
    producer: &'static str,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing {}; run `graphsieve {}` first",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

/// Live scoring gave up on some pairs.
#[derive(Debug)]
struct RemoteFailures(usize);

impl fmt::Display for RemoteFailures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "remote backend failed to score {} pairs", self.0)
    }
}

impl std::error::Error for RemoteFailures {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_REMOTE: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<RemoteFailures>() {
            return EXIT_REMOTE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Remote(_) => EXIT_REMOTE,
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

struct Stage {
    cfg: ExperimentConfig,
    data: Dataset,
    out: PathBuf,
    backend: Option<BackendKind>,
    seeds: usize,
}

impl Stage {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(MissingArtifact { path, producer }.into());
        }
        Ok(path)
    }

    fn scorer(&self) -> Result<Scorer> {
        Ok(build_scorer(
            &self.cfg.scorer,
            &self.data.graph_id,
            &self.data.embeddings,
            self.backend,
        )?)
    }

    fn split(&self) -> Result<SplitMask> {
        let path = self.require("split.json", "attack")?;
        Ok(SplitMask::load(&path, self.data.graph.node_count())?)
    }

    fn attack_result(&self) -> Result<AttackResult> {
        let path = self.require("attack.json", "attack")?;
        Ok(AttackResult::load(&path, &self.data.graph)?)
    }

    fn structure(&self, s: Structure) -> Result<EdgeSet> {
        Ok(match s {
            Structure::Clean => self.data.graph.edges().clone(),
            Structure::Attacked => self.attack_result()?.perturbed_edges,
            Structure::Purified => {
                let path = self.require("purification.json", "purify")?;
                PurificationReport::load(&path)?.purified_edges
            }
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(config) = cli.config else {
        return Err(Error::Config("--config is required".into()).into());
    };
    // an unreadable or malformed --config file is a usage error
    let cfg =
        ExperimentConfig::load(&config).map_err(|e| Error::Config(format!("loading {}: {e}", config.display())))?;
    let data = load_dataset(&cfg)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let stage = Stage {
        cfg,
        data,
        out: cli.out_dir,
        backend: cli.backend.map(Into::into),
        seeds: cli.seeds,
    };
    match cli.command {
        Command::Attack => attack(&stage),
        Command::BuildInstructions => build_instructions(&stage),
        Command::ScoreEdges => score_edges(&stage),
        Command::TrainEdgePredictor => train_predictor(&stage),
        Command::Purify { beta, gamma, k } => purify(&stage, beta, gamma.zip(k)),
        Command::TrainGnn { structure } => train_gnn(&stage, structure),
        Command::Evaluate { structure } => evaluate(&stage, structure),
        Command::Pipeline => pipeline(&stage),
    }
}

fn attack(s: &Stage) -> Result<()> {
    let split = random_split(&s.data.graph, s.cfg.seed)?;
    let scorer = s.scorer()?;
    let outcome = run_attack(&s.cfg.attack, &s.data, &split, &scorer, s.cfg.seed)?;
    split.save(&s.path("split.json"))?;
    outcome.result.save(&s.path("attack.json"))?;
    save_graph(
        &outcome.result.perturbed_graph(&s.data.graph)?,
        &s.path("attacked_graph.json"),
    )?;
    println!(
        "{}: {} added, {} removed{}",
        outcome.result.attack_name,
        outcome.result.delta.added.len(),
        outcome.result.delta.removed.len(),
        if outcome.result.partial { " (partial)" } else { "" }
    );
    Ok(())
}

fn build_instructions(s: &Stage) -> Result<()> {
    let specs = if s.cfg.instructions.attacks.is_empty() {
        vec![s.cfg.attack.clone()]
    } else {
        s.cfg.instructions.attacks.clone()
    };
    let scorer = s.scorer()?;
    let mut deltas = Vec::new();
    let mut runs = Vec::new();
    for i in 0..s.seeds as u64 {
        let seed = s.cfg.seed + i;
        let split = random_split(&s.data.graph, seed)?;
        for spec in &specs {
            let r = run_attack(spec, &s.data, &split, &scorer, seed)?.result;
            runs.push(serde_json::json!({
                "attack": r.attack_name,
                "seed": seed,
                "added": r.delta.added.len(),
                "removed": r.delta.removed.len(),
            }));
            deltas.push(r.delta);
        }
    }
    let query = build_query_edges(&s.data.graph, &deltas, s.cfg.seed)?;
    let judged = collect_judgments(&s.data.graph, &query, &scorer)?;
    let outcome = filter_judgments(&s.data.graph, &judged);
    let n = export_instruction_dataset(&outcome.records, &s.path("instructions.jsonl"))?;
    DatasetManifest::new(&s.data.graph_id, runs, &query, &outcome).save(&s.path("instructions_manifest.json"))?;
    println!("{n} instruction records from {} query edges", query.len());
    Ok(())
}

fn score_edges(s: &Stage) -> Result<()> {
    let result = s.attack_result()?;
    let graph = result.perturbed_graph(&s.data.graph)?;
    let scorer = s.scorer()?;
    let pairs: Vec<_> = result.perturbed_edges.iter().copied().collect();
    let judgments = scorer.score_edges(&graph, &pairs)?;
    save_judgments(&judgments, &s.path("scores.jsonl"))?;
    let failed = judgments.iter().filter(|j| j.source == Source::Failed).count();
    println!("{} edges scored, {failed} failed", judgments.len() - failed);
    if failed > 0 {
        return Err(RemoteFailures(failed).into());
    }
    Ok(())
}

fn train_predictor(s: &Stage) -> Result<()> {
    let result = s.attack_result()?;
    let judgments = load_judgments(&s.require("scores.jsonl", "score-edges")?)?;
    let labeled = derive_edge_labels(&judgments);
    let cfg = &s.cfg.edge_predictor;
    let pairs = build_training_set(
        &labeled,
        &s.data.embeddings,
        &result.perturbed_edges,
        cfg.candidate_count,
        s.cfg.seed,
    )?;
    let model = train_edge_predictor(&pairs, &s.data.embeddings, cfg)?;
    model.save(&s.path("edge_predictor.json"))?;
    println!(
        "{} training pairs, loss {:.4} -> {:.4}",
        pairs.len(),
        model.initial_loss,
        model.final_loss()
    );
    Ok(())
}

fn purify(s: &Stage, beta: u8, addition: Option<(f64, usize)>) -> Result<()> {
    if !s.cfg.grids.beta.contains(&beta) {
        return Err(Error::Config(format!("beta outside configured grid {:?}", s.cfg.grids.beta)).into());
    }
    let result = s.attack_result()?;
    let judgments = load_judgments(&s.require("scores.jsonl", "score-edges")?)?;
    let added = match addition {
        None => EdgeSet::new(),
        Some((gamma, k)) => {
            let model = EdgePredictorModel::load(&s.require("edge_predictor.json", "train-edge-predictor")?)?;
            let emb = &s.data.embeddings;
            match s.cfg.candidates {
                CandidateSpec::Full => {
                    select_important_edges(&model, emb, &result.perturbed_edges, gamma, k, CandidateMode::Full)?
                }
                CandidateSpec::Restricted { k_sim } => {
                    let index = build_similarity_index(emb, k_sim)?;
                    let mode = CandidateMode::Restricted(&index);
                    select_important_edges(&model, emb, &result.perturbed_edges, gamma, k, mode)?
                }
            }
        }
    };
    let mut report = purify_graph(&result.perturbed_edges, &judgments, &added, beta)?;
    if !result.delta.added.is_empty() {
        report.adv_edge = Some(adv_edge_metric(&report, &result.delta)?);
    }
    report.save(&s.path("purification.json"))?;
    report.write_removal_csv(&s.path("removed.csv"))?;
    save_added_edges(&report.added, &s.path("added.json"))?;
    let adv = report
        .adv_edge
        .map(|a| format!(", {} attack edges remain ({:.2}%)", a.count, 100.0 * a.fraction))
        .unwrap_or_default();
    println!(
        "{} removed, {} added, {} unscored kept{adv}",
        report.removed.len(),
        report.added.len(),
        report.unscored_preserved.len()
    );
    Ok(())
}

fn checkpoint_name(structure: Structure) -> String {
    format!("gcn_{}.json", structure.name())
}

fn train_gnn(s: &Stage, structure: Structure) -> Result<()> {
    let split = s.split()?;
    let edges = s.structure(structure)?;
    let g = &s.data.graph;
    let gnn = graphsieve_core::gnn::GcnConfig {
        seed: s.cfg.seed,
        ..s.cfg.gnn.clone()
    };
    let model = train_gcn(&edges, &s.data.features, g.labels(), &split, &gnn)?;
    model.to_checkpoint().save(&s.path(&checkpoint_name(structure)))?;
    println!(
        "{}: best validation accuracy {:.4} at epoch {}",
        structure.name(),
        model.best_val_accuracy,
        model.best_epoch
    );
    Ok(())
}

fn evaluate(s: &Stage, structure: Structure) -> Result<()> {
    let split = s.split()?;
    let edges = s.structure(structure)?;
    let ck = Checkpoint::load(&s.require(&checkpoint_name(structure), "train-gnn")?)?;
    let model = GcnModel::from_checkpoint(&ck)?;
    let acc = evaluate_gcn(&model, &edges, &s.data.features, s.data.graph.labels(), &split.test)?;
    let out = serde_json::json!({ "structure": structure.name(), "test_accuracy": acc });
    write_json(&s.path(&format!("eval_{}.json", structure.name())), &out)?;
    println!("{out}");
    Ok(())
}

fn pipeline(s: &Stage) -> Result<()> {
    let scorer = s.scorer()?;
    let report = run_experiment(&s.cfg, &s.data, &scorer, s.seeds)?;
    report.save_json(&s.path("report.json"))?;
    report.save_csv(&s.path("report.csv"))?;
    let fmt_stat = |st: Option<graphsieve_core::pipeline::Stat>| match st {
        Some(st) => match st.std {
            Some(sd) => format!("{:.2}±{:.2}", 100.0 * st.mean, 100.0 * sd),
            None => format!("{:.2}", 100.0 * st.mean),
        },
        None => "-".into(),
    };
    let sm = &report.summary;
    println!(
        "{} over {} seeds: clean {} attacked {} purified {}",
        report.attack,
        report.runs.len(),
        fmt_stat(sm.clean_accuracy),
        fmt_stat(sm.attacked_accuracy),
        fmt_stat(sm.purified_accuracy)
    );
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
