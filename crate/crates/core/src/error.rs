use std::path::PathBuf;

use crate::tag::Edge;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Attack(String),

    #[error("{0}")]
    Numerical(String),

    #[error("replay cache has no judgment for {} pair(s): {}", .0.len(), format_pairs(.0))]
    ReplayMiss(Vec<Edge>),

    #[error("remote backend: {0}")]
    Remote(String),

    #[error(transparent)]
    Judgment(#[from] JudgmentError),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

/// Failure to read a relevance judgment out of a model response.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JudgmentError {
    #[error("no JSON object found in response")]
    NoJsonObject,
    #[error("missing key \"{0}\"")]
    MissingKey(&'static str),
    #[error("\"Analysis\" is not a string")]
    AnalysisNotString,
    #[error("score is not an integer: {0}")]
    ScoreNotInteger(String),
    #[error("score out of range: {0}")]
    ScoreOutOfRange(i64),
}

fn format_pairs(pairs: &[Edge]) -> String {
    const SHOWN: usize = 20;
    let mut out = pairs
        .iter()
        .take(SHOWN)
        .map(|e| format!("({},{})", e.u(), e.v()))
        .collect::<Vec<_>>()
        .join(", ");
    if pairs.len() > SHOWN {
        out.push_str(&format!(", ... ({} more)", pairs.len() - SHOWN));
    }
    out
}
