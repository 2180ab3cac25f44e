//! Byte-level reproducibility: prompts, instruction files and reports.

use std::path::PathBuf;

use graphsieve_core::config::{load_dataset, ExperimentConfig};
use graphsieve_core::embed::EmbeddingProvider;
use graphsieve_core::instruct::{export_instruction_dataset, load_instruction_dataset, InstructionRecord};
use graphsieve_core::pipeline::run_experiment;
use graphsieve_core::scorer::{render_prompt, response_json, Backend, ScoreCache, Scorer};
use graphsieve_core::synth::SynthConfig;

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn prompt_goldens() -> Result<(), String> {
    let p = render_prompt("Quantum spin lattice.", "Neuron cortex synapse.");
    if p.system != golden("system_prompt.txt") {
        return Err("system prompt differs from golden".into());
    }
    if p.user != golden("user_prompt.txt") {
        return Err(format!("user prompt differs from golden: {:?}", p.user));
    }
    let empty = render_prompt("", "");
    if empty.user != golden("user_prompt_empty.txt") || empty.system != p.system {
        return Err(format!("empty-text prompt differs from golden: {:?}", empty.user));
    }
    if render_prompt("Quantum spin lattice.", "Neuron cortex synapse.") != p {
        return Err("rendering is not deterministic".into());
    }
    Ok(())
}

pub fn instruction_round_trip() -> Result<(), String> {
    let texts = [
        ("plain", "text"),
        ("quotes \" and \\ backslashes", "tabs\tand\nnewlines"),
        ("unicode → ü 漢字 🚀", ""),
        ("{\"json-looking\": 1}", "control \u{1} char"),
    ];
    let records: Vec<InstructionRecord> = texts
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let p = render_prompt(a, b);
            InstructionRecord {
                instruction: p.system,
                input: p.user,
                output: response_json((i % 6 + 1) as u8, &format!("analysis {a}")),
                pair: None,
                polarity: None,
            }
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = dir.path().join("a.jsonl");
    let second = dir.path().join("b.jsonl");
    let written = export_instruction_dataset(&records, &first).map_err(|e| e.to_string())?;
    if written != records.len() {
        return Err(format!("wrote {written} of {} records", records.len()));
    }
    let loaded = load_instruction_dataset(&first).map_err(|e| e.to_string())?;
    if loaded != records {
        return Err("records changed in the round trip".into());
    }
    export_instruction_dataset(&loaded, &second).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    if a != b {
        return Err("re-export is not byte-identical".into());
    }
    if a.iter().filter(|&&c| c == b'\n').count() != records.len() {
        return Err("expected one line per record".into());
    }
    Ok(())
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synth(SynthConfig {
        nodes: 60,
        p_in: 0.2,
        p_out: 0.02,
        ..SynthConfig::default()
    });
    cfg.embeddings = EmbeddingProvider::Hash { dim: 64 };
    cfg.attack.ptb_rate = 0.3;
    cfg.grids.beta = vec![2, 3];
    cfg.grids.gamma = vec![0.95, 0.99];
    cfg.grids.k = vec![1, 3];
    cfg.edge_predictor.hidden = 16;
    cfg.edge_predictor.epochs = 20;
    cfg.gnn.epochs = 50;
    cfg
}

/// A cold run fills a cache file; a replay-only run from that file must
/// produce the same report, byte for byte once timings are dropped.
pub fn warm_cache_reproducible() -> Result<(), String> {
    let cfg = small_config();
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("scores.jsonl");

    let cold = Scorer::new(
        Backend::heuristic(data.embeddings.clone()),
        ScoreCache::open(&cache_path, &data.graph_id).map_err(|e| e.to_string())?,
    );
    let first = run_experiment(&cfg, &data, &cold, 2).map_err(|e| e.to_string())?;
    drop(cold);

    let warm = Scorer::new(
        Backend::Replay,
        ScoreCache::open(&cache_path, &data.graph_id).map_err(|e| e.to_string())?,
    );
    let second = run_experiment(&cfg, &data, &warm, 2).map_err(|e| e.to_string())?;
    if warm.backend_calls() != 0 {
        return Err(format!("warm run made {} backend calls", warm.backend_calls()));
    }
    let a = serde_json::to_string_pretty(&first.without_timing()).unwrap();
    let b = serde_json::to_string_pretty(&second.without_timing()).unwrap();
    if a != b {
        return Err("warm-cache report differs from the cold run".into());
    }
    Ok(())
}
