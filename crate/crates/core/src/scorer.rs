//! Edge-relevance scoring.
//!
//! A [`Scorer`] pairs a backend with an append-only [`ScoreCache`]. Cache
//! hits never reach the backend. Live backends implement [`Judge`]; the
//! replay backend serves the cache only and fails on any miss.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, JudgmentError, Result};
use crate::tag::{check_edges, Edge, TextAttributedGraph};

pub const SYSTEM_PROMPT: &str = "In the context of graph neural networks, attackers manipulate models by adding irrelevant edges or removing relevant ones, leading to incorrect predictions. Your role is crucial in defending against such attacks by evaluating the relevance between pairs of nodes, which will help in identifying and removing the irrelevant edges to mitigate the impact of adversarial attacks on graph-based models. Given textual information about two nodes, analyze the relevance of these two nodes. Provide a concise analysis(approximately 100 words) and assign an integer relevance score from 1 to 6, where 1 indicates completely irrelevant and 6 indicates directly relevant. Your response should be formatted in JSON, with two keys: \"Analysis\" for your written analysis and \"Relevance Score\" for your numerical evaluation.";

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevancePrompt {
    pub system: String,
    pub user: String,
}

pub fn render_prompt(text_i: &str, text_j: &str) -> RelevancePrompt {
    RelevancePrompt {
        system: SYSTEM_PROMPT.to_owned(),
        user: format!("Node v1\u{2192}{{{text_i}}}.\n\nNode v2\u{2192}{{{text_j}}}."),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedJudgment {
    pub score: u8,
    pub analysis: String,
}

/// Reads the first JSON object in `raw`, tolerating prose and code fences
/// around it.
pub fn parse_judgment(raw: &str) -> Result<ParsedJudgment, JudgmentError> {
    let object = first_json_object(raw).ok_or(JudgmentError::NoJsonObject)?;
    let analysis = match object.get("Analysis") {
        None => return Err(JudgmentError::MissingKey("Analysis")),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(JudgmentError::AnalysisNotString),
    };
    let score = match object.get("Relevance Score") {
        None => return Err(JudgmentError::MissingKey("Relevance Score")),
        Some(v) => integer_score(v)?,
    };
    if !(i64::from(MIN_SCORE)..=i64::from(MAX_SCORE)).contains(&score) {
        return Err(JudgmentError::ScoreOutOfRange(score));
    }
    Ok(ParsedJudgment {
        score: score as u8,
        analysis,
    })
}

fn integer_score(v: &Value) -> Result<i64, JudgmentError> {
    let not_int = || JudgmentError::ScoreNotInteger(v.to_string());
    match v {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(i)
            } else {
                let f = n.as_f64().ok_or_else(not_int)?;
                if f.fract() == 0.0 && f.abs() < 1e15 {
                    Ok(f as i64)
                } else {
                    Err(not_int())
                }
            }
        }
        Value::String(s) => s.trim().parse::<i64>().map_err(|_| not_int()),
        _ => Err(not_int()),
    }
}

fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// The canonical response text for a score and analysis.
pub fn response_json(score: u8, analysis: &str) -> String {
    serde_json::json!({ "Analysis": analysis, "Relevance Score": score }).to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Remote,
    Heuristic,
    /// A caller-supplied [`Judge`].
    Custom,
    /// A live backend gave up; the judgment carries no score.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub pair: Edge,
    /// `None` only for failed judgments.
    pub score: Option<u8>,
    pub analysis: String,
    pub source: Source,
    /// Verbatim backend answer, when one was received in this process.
    pub response: Option<String>,
}

impl RelevanceJudgment {
    pub fn is_scored(&self) -> bool {
        self.score.is_some()
    }

    /// The backend's answer, or a canonical rendering for cache-served
    /// judgments.
    pub fn response_text(&self) -> Option<String> {
        let score = self.score?;
        Some(
            self.response
                .clone()
                .unwrap_or_else(|| response_json(score, &self.analysis)),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    i: usize,
    j: usize,
    score: u8,
    analysis: String,
    source: Source,
}

struct CacheInner {
    map: HashMap<Edge, RelevanceJudgment>,
    file: Option<File>,
}

/// Append-only store of judgments for one graph, optionally backed by a
/// JSONL file. Existing entries are never overwritten.
pub struct ScoreCache {
    graph_id: String,
    path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

impl ScoreCache {
    pub fn in_memory(graph_id: impl Into<String>) -> Self {
        ScoreCache {
            graph_id: graph_id.into(),
            path: None,
            inner: Mutex::new(CacheInner {
                map: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Loads `path` if it exists and appends new judgments to it.
    pub fn open(path: &Path, graph_id: impl Into<String>) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let mut offset = 0;
            for line in text.split_inclusive('\n') {
                let line_offset = offset;
                offset += line.len();
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    offset: line_offset + e.column().saturating_sub(1),
                    message: e.to_string(),
                })?;
                if rec.i == rec.j || !(MIN_SCORE..=MAX_SCORE).contains(&rec.score) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        offset: line_offset,
                        message: format!("invalid cache record ({},{}) score {}", rec.i, rec.j, rec.score),
                    });
                }
                let pair = Edge::new(rec.i, rec.j);
                map.entry(pair).or_insert(RelevanceJudgment {
                    pair,
                    score: Some(rec.score),
                    analysis: rec.analysis,
                    source: rec.source,
                    response: None,
                });
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(ScoreCache {
            graph_id: graph_id.into(),
            path: Some(path.to_path_buf()),
            inner: Mutex::new(CacheInner { map, file: Some(file) }),
        })
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, pair: Edge) -> Option<RelevanceJudgment> {
        self.inner.lock().expect("cache lock").map.get(&pair).cloned()
    }

    /// Stores a scored judgment unless the pair is already present.
    /// Returns whether it was written.
    pub fn insert(&self, judgment: &RelevanceJudgment) -> Result<bool> {
        let Some(score) = judgment.score else {
            return Ok(false);
        };
        let mut inner = self.inner.lock().expect("cache lock");
        if inner.map.contains_key(&judgment.pair) {
            return Ok(false);
        }
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                i: judgment.pair.u(),
                j: judgment.pair.v(),
                score,
                analysis: judgment.analysis.clone(),
                source: judgment.source,
            })
            .expect("cache line serializes");
            writeln!(file, "{line}").map_err(|e| Error::io("appending to score cache", e))?;
        }
        inner.map.insert(judgment.pair, judgment.clone());
        Ok(true)
    }
}

/// Outcome of asking a live backend about one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Scored {
        score: u8,
        analysis: String,
        response: String,
    },
    Failed {
        reason: String,
    },
}

/// A live scoring backend.
pub trait Judge: Send + Sync {
    fn source(&self) -> Source;

    fn judge(&self, graph: &TextAttributedGraph, pair: Edge) -> Result<Verdict>;
}

/// Cosine bin used by the offline heuristic backend.
pub fn heuristic_bin(cosine: f64) -> u8 {
    match cosine {
        c if c < 0.05 => 1,
        c if c < 0.15 => 2,
        c if c < 0.30 => 3,
        c if c < 0.55 => 4,
        c if c < 0.80 => 5,
        _ => 6,
    }
}

pub const HEURISTIC_ANALYSIS: &str = "heuristic cosine bin";

pub fn heuristic_score(emb: &EmbeddingMatrix, pair: Edge) -> Result<RelevanceJudgment> {
    if pair.v() >= emb.rows() {
        return Err(Error::invalid(format!(
            "pair {pair:?} outside embedding rows ({})",
            emb.rows()
        )));
    }
    let score = heuristic_bin(emb.similarity(pair.u(), pair.v()));
    Ok(RelevanceJudgment {
        pair,
        score: Some(score),
        analysis: HEURISTIC_ANALYSIS.into(),
        source: Source::Heuristic,
        response: Some(response_json(score, HEURISTIC_ANALYSIS)),
    })
}

/// Scores pairs by the cosine similarity of their embeddings.
pub struct HeuristicJudge {
    emb: EmbeddingMatrix,
}

impl HeuristicJudge {
    pub fn new(emb: EmbeddingMatrix) -> Self {
        HeuristicJudge { emb }
    }
}

impl Judge for HeuristicJudge {
    fn source(&self) -> Source {
        Source::Heuristic
    }

    fn judge(&self, _graph: &TextAttributedGraph, pair: Edge) -> Result<Verdict> {
        let j = heuristic_score(&self.emb, pair)?;
        Ok(Verdict::Scored {
            score: j.score.expect("heuristic always scores"),
            analysis: j.analysis,
            response: j.response.expect("heuristic always responds"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

pub const API_KEY_ENV: &str = "GS_API_KEY";

/// OpenAI-compatible chat-completions backend.
pub struct RemoteJudge {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl RemoteJudge {
    /// Reads the API key from `GS_API_KEY` when set.
    pub fn new(base_url: &str, model: &str) -> Result<Self> {
        Self::with_options(
            base_url,
            model,
            std::env::var(API_KEY_ENV).ok(),
            RetryPolicy::default(),
            Duration::from_secs(120),
        )
    }

    pub fn with_options(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Remote(format!("building HTTP client: {e}")))?;
        Ok(RemoteJudge {
            client,
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_owned(),
            api_key,
            retry,
        })
    }

    pub fn request_body(&self, prompt: &RelevancePrompt) -> Value {
        serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        })
    }

    /// One request. `Err` carries whether the failure is worth retrying.
    fn attempt(&self, body: &Value) -> std::result::Result<Verdict, (bool, String)> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, format!("transport: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, format!("HTTP {status}")));
        }
        let payload: Value = resp.json().map_err(|e| (true, format!("bad response body: {e}")))?;
        let content = payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or((true, "response has no choices[0].message.content".to_string()))?;
        let parsed = parse_judgment(content).map_err(|e| (true, format!("unparseable answer: {e}")))?;
        Ok(Verdict::Scored {
            score: parsed.score,
            analysis: parsed.analysis,
            response: content.to_owned(),
        })
    }
}

impl Judge for RemoteJudge {
    fn source(&self) -> Source {
        Source::Remote
    }

    fn judge(&self, graph: &TextAttributedGraph, pair: Edge) -> Result<Verdict> {
        let prompt = render_prompt(graph.text(pair.u()), graph.text(pair.v()));
        let body = self.request_body(&prompt);
        let mut delay = self.retry.base_delay;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err((retryable, reason)) => {
                    if !retryable || attempt >= self.retry.max_retries {
                        log::warn!("pair {pair:?}: giving up after {} attempt(s): {reason}", attempt + 1);
                        return Ok(Verdict::Failed { reason });
                    }
                    log::debug!("pair {pair:?}: {reason}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

pub enum Backend {
    /// Cache only; any miss is an error.
    Replay,
    Live(Box<dyn Judge>),
}

impl Backend {
    pub fn heuristic(emb: EmbeddingMatrix) -> Self {
        Backend::Live(Box::new(HeuristicJudge::new(emb)))
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

pub struct Scorer {
    backend: Backend,
    cache: ScoreCache,
    max_in_flight: usize,
    backend_calls: AtomicUsize,
}

impl Scorer {
    pub fn new(backend: Backend, cache: ScoreCache) -> Self {
        Scorer {
            backend,
            cache,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    /// Number of pairs sent to the live backend so far.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    /// Judgments for `pairs`, in input order.
    pub fn score_edges(&self, graph: &TextAttributedGraph, pairs: &[Edge]) -> Result<Vec<RelevanceJudgment>> {
        check_edges(pairs, graph.node_count())?;
        let mut known: HashMap<Edge, RelevanceJudgment> = HashMap::new();
        let mut misses: Vec<Edge> = Vec::new();
        for &pair in pairs {
            if known.contains_key(&pair) || misses.contains(&pair) {
                continue;
            }
            match self.cache.get(pair) {
                Some(j) => {
                    known.insert(pair, j);
                }
                None => misses.push(pair),
            }
        }

        match &self.backend {
            Backend::Replay if !misses.is_empty() => return Err(Error::ReplayMiss(misses)),
            Backend::Replay => {}
            Backend::Live(judge) => {
                let verdicts = self.dispatch(judge.as_ref(), graph, &misses);
                for (pair, verdict) in misses.iter().zip(verdicts) {
                    let judgment = match verdict? {
                        Verdict::Scored {
                            score,
                            analysis,
                            response,
                        } => RelevanceJudgment {
                            pair: *pair,
                            score: Some(score),
                            analysis,
                            source: judge.source(),
                            response: Some(response),
                        },
                        Verdict::Failed { reason } => {
                            log::warn!("pair {pair:?} left unscored (kept): {reason}");
                            RelevanceJudgment {
                                pair: *pair,
                                score: None,
                                analysis: reason,
                                source: Source::Failed,
                                response: None,
                            }
                        }
                    };
                    self.cache.insert(&judgment)?;
                    known.insert(*pair, judgment);
                }
            }
        }
        Ok(pairs.iter().map(|p| known[p].clone()).collect())
    }

    /// Runs the judge over `pairs` with bounded parallelism; results are
    /// returned in input order.
    fn dispatch(&self, judge: &dyn Judge, graph: &TextAttributedGraph, pairs: &[Edge]) -> Vec<Result<Verdict>> {
        let slots: Vec<Mutex<Option<Result<Verdict>>>> = pairs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(pairs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    if k >= pairs.len() {
                        break;
                    }
                    self.backend_calls.fetch_add(1, Ordering::Relaxed);
                    let verdict = judge.judge(graph, pairs[k]);
                    *slots[k].lock().expect("slot lock") = Some(verdict);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct JudgmentLine {
    i: usize,
    j: usize,
    score: Option<u8>,
    analysis: String,
    source: Source,
}

/// Writes judgments as JSONL, one `{"i","j","score","analysis","source"}`
/// object per line; failed judgments carry `"score": null`.
pub fn save_judgments(judgments: &[RelevanceJudgment], path: &Path) -> Result<()> {
    let mut text = String::new();
    for j in judgments {
        let line = JudgmentLine {
            i: j.pair.u(),
            j: j.pair.v(),
            score: j.score,
            analysis: j.analysis.clone(),
            source: j.source,
        };
        text.push_str(&serde_json::to_string(&line).expect("judgment serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_judgments(path: &Path) -> Result<Vec<RelevanceJudgment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let rec: JudgmentLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: start + e.column().saturating_sub(1),
            message: e.to_string(),
        })?;
        if rec.i == rec.j || rec.score.is_some_and(|s| !(MIN_SCORE..=MAX_SCORE).contains(&s)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: start,
                message: format!("invalid judgment record ({},{})", rec.i, rec.j),
            });
        }
        out.push(RelevanceJudgment {
            pair: Edge::new(rec.i, rec.j),
            score: rec.score,
            analysis: rec.analysis,
            source: rec.source,
            response: None,
        });
    }
    Ok(out)
}
