//! Checks shared by the per-topic test targets and the acceptance runner.
#![allow(dead_code)]

pub mod adaptive;
pub mod golden;
pub mod gradients;
pub mod oracles;
pub mod parser;
pub mod rules;
