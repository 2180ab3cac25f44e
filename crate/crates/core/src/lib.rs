//! Purification of adversarially poisoned text-attributed graphs.
//!
//! Every edge of a possibly-poisoned graph is rated for relevance by a
//! language-model scorer. Low-rated edges are removed, and a lightweight
//! edge predictor distilled from the scorer's verdicts adds back missing
//! edges. A GCN trained on the result measures how much robustness was
//! recovered.

pub mod attack;
pub mod config;
pub mod edgepred;
pub mod embed;
pub mod error;
pub mod gnn;
pub mod instruct;
pub mod optim;
pub mod pipeline;
pub mod purify;
pub mod scorer;
pub mod synth;
pub mod tag;

pub use error::{Error, JudgmentError, Result};
pub use tag::{Edge, EdgeDelta, EdgeSet, SplitMask, TextAttributedGraph};
