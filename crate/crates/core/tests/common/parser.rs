//! Judgment parsing over well-formed and fuzzed answers.

use std::panic::{catch_unwind, AssertUnwindSafe};

use graphsieve_core::scorer::parse_judgment;
use graphsieve_core::JudgmentError;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FUZZ_CASES: usize = 10_000;

/// Three answers in the shape a chat model gives, expected to parse to 1, 6, 6.
pub const WELL_FORMED: [(&str, u8); 3] = [
    (
        r#"{"Analysis": "One node covers crystal lattice physics and the other covers vaccine trials; the topics share no methods or vocabulary.", "Relevance Score": 1}"#,
        1,
    ),
    (
        "Here is my evaluation.\n```json\n{\n  \"Analysis\": \"Both nodes study synaptic signalling in the cortex and cite the same experimental setup.\",\n  \"Relevance Score\": 6\n}\n```",
        6,
    ),
    (
        r#"{"Analysis": "Both describe boson spin models on a lattice.", "Relevance Score": "6"}"#,
        6,
    ),
];

pub fn well_formed() -> Result<(), String> {
    for (raw, expected) in WELL_FORMED {
        match parse_judgment(raw) {
            Ok(j) if j.score == expected && !j.analysis.is_empty() => {}
            other => return Err(format!("expected score {expected}, got {other:?}")),
        }
    }
    Ok(())
}

const PIECES: [&str; 16] = [
    "{",
    "}",
    "\"",
    ":",
    ",",
    "Analysis",
    "Relevance Score",
    "```json",
    "```",
    "\n",
    " ",
    "6",
    "-1",
    "null",
    "[",
    "é→",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..60);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.6) {
                PIECES.choose(rng).unwrap().to_string()
            } else {
                char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?').to_string()
            }
        })
        .collect()
}

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.random_range(1..6) {
        if chars.is_empty() {
            break;
        }
        let at = rng.random_range(0..chars.len());
        match rng.random_range(0..4) {
            0 => {
                chars.remove(at);
            }
            1 => chars.insert(at, *['{', '}', '"', ':', ',', '\\'].choose(rng).unwrap()),
            2 => chars.truncate(at),
            _ => chars[at] = char::from_u32(rng.random_range(32..127)).unwrap(),
        }
    }
    chars.into_iter().collect()
}

/// A score value in JSON form and whether it should be accepted.
fn score_value(rng: &mut ChaCha8Rng) -> (String, Option<u8>) {
    let v: i64 = rng.random_range(-3..10);
    let ok = (1..=6).contains(&v).then_some(v as u8);
    match rng.random_range(0..6) {
        0 => (v.to_string(), ok),
        1 => (format!("\"{v}\""), ok),
        2 => (format!("{v}.0"), ok),
        3 => (format!("{v}.5"), None),
        4 => (
            (*["null", "true", "[6]", "{}", "\"six\"", "1e400"].choose(rng).unwrap()).to_string(),
            None,
        ),
        _ => (format!("{}", v + 1_000_000_000_000), None),
    }
}

fn structured(rng: &mut ChaCha8Rng) -> (String, Option<u8>) {
    let (score, expected) = score_value(rng);
    let body = format!("{{\"Analysis\": \"a\", \"Relevance Score\": {score}}}");
    let prefix = ["", "Sure. ", "```json\n", "Answer: {not json} "].choose(rng).unwrap();
    (format!("{prefix}{body}"), expected)
}

/// Returns the number of inputs that parsed.
pub fn fuzz() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut parsed = 0;
    for case in 0..FUZZ_CASES {
        let (input, expected) = match case % 3 {
            0 => (random_text(&mut rng), None),
            1 => {
                let base = WELL_FORMED.choose(&mut rng).unwrap().0;
                (mutate(&mut rng, base), None)
            }
            _ => {
                let (s, e) = structured(&mut rng);
                (s, Some(e))
            }
        };
        let result = catch_unwind(AssertUnwindSafe(|| parse_judgment(&input)))
            .map_err(|_| format!("parser panicked on {input:?}"))?;
        match (&result, expected) {
            (Ok(j), _) if !(1..=6).contains(&j.score) => {
                return Err(format!("score {} accepted from {input:?}", j.score));
            }
            (Ok(j), Some(Some(s))) if j.score != s => {
                return Err(format!("{input:?} parsed to {} instead of {s}", j.score));
            }
            (Ok(_), Some(None)) => return Err(format!("{input:?} should have been rejected")),
            (Err(_), Some(Some(s))) => return Err(format!("{input:?} should parse to {s}: {result:?}")),
            _ => {}
        }
        let result: Result<_, JudgmentError> = result;
        parsed += usize::from(result.is_ok());
    }
    Ok(parsed)
}
