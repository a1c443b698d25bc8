//! Parsing of LLM answers against the answer-format footer, with a salvage
//! pass for sloppy responses, and the response-consistency statistic.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TaskSpec;

const LABEL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub prediction: f64,
    pub probability: Option<f64>,
    pub explanation: Option<String>,
    /// True when the answer followed the required format exactly.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("no prediction found in response")]
    NoPredictionFound,
    #[error("prediction {0} is not a binary label")]
    InvalidLabel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub total: usize,
    pub strict: usize,
    pub rate: f64,
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

fn parse_decimal(token: &str) -> Option<f64> {
    let m = number_re().find(token)?;
    if m.start() != 0 || m.end() != token.len() {
        return None;
    }
    token.parse().ok()
}

fn snap_label(v: f64) -> Option<f64> {
    if (v - 0.0).abs() <= LABEL_TOLERANCE {
        Some(0.0)
    } else if (v - 1.0).abs() <= LABEL_TOLERANCE {
        Some(1.0)
    } else {
        None
    }
}

/// Strips markdown list/heading/emphasis markers from the start of a line.
fn clean_line(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '-' | '#' | '>' | '_' | '`'))
        .trim_end()
}

fn clean_value(v: &str) -> &str {
    v.trim()
        .trim_matches(|c: char| matches!(c, '*' | '`' | '_'))
        .trim()
        .trim_end_matches(['.', ',', ';'])
}

#[derive(Clone, Copy, PartialEq)]
enum Key {
    Prediction,
    Probability,
    Explanation,
}

fn split_key(line: &str) -> Option<(Key, &str)> {
    let cleaned = clean_line(line);
    let (head, rest) = cleaned.split_once(':')?;
    let key = match head.trim().to_ascii_lowercase().as_str() {
        "prediction" => Key::Prediction,
        "probability" => Key::Probability,
        "explanation" => Key::Explanation,
        _ => return None,
    };
    Some((key, rest))
}

enum StrictFailure {
    Format,
    Label(f64),
}

fn parse_strict(text: &str, task: TaskSpec) -> Result<ParsedAnswer, StrictFailure> {
    let mut predictions = Vec::new();
    let mut probabilities = Vec::new();
    let mut explanation: Option<String> = None;
    let mut in_explanation = false;

    for line in text.lines() {
        match split_key(line) {
            Some((Key::Prediction, v)) => {
                in_explanation = false;
                predictions.push(clean_value(v).to_string());
            }
            Some((Key::Probability, v)) => {
                in_explanation = false;
                probabilities.push(clean_value(v).to_string());
            }
            Some((Key::Explanation, v)) => {
                if explanation.is_some() {
                    return Err(StrictFailure::Format);
                }
                in_explanation = true;
                explanation = Some(v.trim().to_string());
            }
            None if in_explanation && !line.trim().is_empty() => {
                let e = explanation.get_or_insert_with(String::new);
                if !e.is_empty() {
                    e.push('\n');
                }
                e.push_str(line.trim());
            }
            None => {}
        }
    }

    let [raw] = predictions.as_slice() else {
        return Err(StrictFailure::Format);
    };
    let mut prediction = parse_decimal(raw).ok_or(StrictFailure::Format)?;
    if task.is_classification() {
        prediction = snap_label(prediction).ok_or(StrictFailure::Label(prediction))?;
    }
    let probability = match probabilities.as_slice() {
        [] => None,
        [p] => Some(
            parse_decimal(p)
                .filter(|p| (0.0..=1.0).contains(p))
                .ok_or(StrictFailure::Format)?,
        ),
        _ => return Err(StrictFailure::Format),
    };
    Ok(ParsedAnswer {
        prediction,
        probability,
        explanation: explanation.filter(|e| !e.is_empty()),
        strict: true,
    })
}

/// Numbers in `text` not glued to surrounding words, in order.
fn standalone_numbers(text: &str) -> impl Iterator<Item = f64> + '_ {
    let bytes = text.as_bytes();
    number_re().find_iter(text).filter_map(move |m| {
        let before = m.start().checked_sub(1).map(|i| bytes[i]);
        let after = bytes.get(m.end()).copied();
        let after2 = bytes.get(m.end() + 1).copied();
        let glued_before = before.is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.');
        let glued_after = after.is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_')
            || (after == Some(b'.') && after2.is_some_and(|b| b.is_ascii_digit()));
        if glued_before || glued_after {
            None
        } else {
            m.as_str().parse::<f64>().ok().filter(|v| v.is_finite())
        }
    })
}

fn salvage(text: &str, task: TaskSpec) -> Option<f64> {
    let mut numbers = standalone_numbers(text);
    if task.is_classification() {
        numbers.find_map(snap_label)
    } else {
        numbers.next()
    }
}

/// Parses a response; never panics.
pub fn parse_response(text: &str, task: TaskSpec) -> Result<ParsedAnswer, ParseError> {
    let failure = match parse_strict(text, task) {
        Ok(answer) if answer.prediction.is_finite() => return Ok(answer),
        Ok(_) => StrictFailure::Format,
        Err(f) => f,
    };
    match salvage(text, task) {
        Some(prediction) => Ok(ParsedAnswer {
            prediction,
            probability: None,
            explanation: None,
            strict: false,
        }),
        None => Err(match failure {
            StrictFailure::Label(v) => ParseError::InvalidLabel(v),
            StrictFailure::Format => ParseError::NoPredictionFound,
        }),
    }
}

pub fn consistency_rate<'a, I>(answers: I) -> ConsistencyStats
where
    I: IntoIterator<Item = &'a Result<ParsedAnswer, ParseError>>,
{
    let mut stats = ConsistencyStats::default();
    for a in answers {
        stats.total += 1;
        if matches!(a, Ok(p) if p.strict) {
            stats.strict += 1;
        }
    }
    stats.rate = if stats.total == 0 {
        0.0
    } else {
        stats.strict as f64 / stats.total as f64
    };
    stats
}

/// Renders a number for an answer: four decimals, or more when four would
/// not round-trip.
pub fn format_answer_number(v: f64) -> String {
    let fixed = format!("{v:.4}");
    if fixed.parse::<f64>().ok() == Some(v) {
        fixed
    } else {
        format!("{v}")
    }
}

/// Renders an answer in the footer grammar.
pub fn render_answer(task: TaskSpec, prediction: f64, probability: Option<f64>, explanation: Option<&str>) -> String {
    let mut out = if task.is_classification() {
        format!("Prediction: {}", if prediction >= 0.5 { 1 } else { 0 })
    } else {
        format!("Prediction: {}", format_answer_number(prediction))
    };
    if let Some(p) = probability {
        out.push_str(&format!("\nProbability: {}", format_answer_number(p)));
    }
    if let Some(e) = explanation {
        out.push_str(&format!("\nExplanation: {e}"));
    }
    out
}
