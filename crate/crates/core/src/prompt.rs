//! Prompt rendering for the corrector, self-correction and predictor prompts.
//!
//! The wording lives in the constants below and is versioned by
//! [`TEMPLATE_VERSION`]; any edit to it must bump the version.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{MoleculeRecord, TaskSpec};
use crate::knowledge::{RetrievedContext, ScoredEntry};

pub const TEMPLATE_VERSION: u32 = 1;
pub const DEFAULT_TOKEN_BUDGET: usize = 3000;

const CORRECTOR_INSTRUCTION: &str = "Instruction: You are an expert chemist acting as a corrector for a machine learning model that predicts {task}. \
You are given molecules from the training data with their true labels, and molecules from the validation data with their true labels and the model's predictions, which show where the model tends to make mistakes. \
Use this contextual knowledge to refine the model's prediction for the query molecule.";
const TRAIN_HEADER: &str = "Context from training data:";
const VALID_HEADER: &str = "Context from validation data:";
const CORRECTOR_QUESTION: &str = "Question: The model predicts {pred} for the molecule with SMILES: {smiles}. \
Drawing on the provided contextual knowledge, give your refined prediction for this molecule.";

const SELF_CORRECTION_INSTRUCTION: &str =
    "Instruction: You previously proposed a correction to a machine learning model's prediction. \
Review your correction carefully and check whether it is an error.";
const SELF_CORRECTION_QUESTION: &str = "Question: Your correction substantially changes the model's prediction. \
Either confirm your correction or revise it.";

const PREDICTOR_INSTRUCTION: &str = "Instruction: You are an expert chemist. Predict {task} from its SMILES string.";
const FEW_SHOT_HEADER: &str = "Examples:";
const PREDICTOR_QUESTION: &str = "Question: What is your prediction for this molecule?";
const EXPLAIN_REQUEST: &str = "Also provide an explanation for your prediction.";

const FOOTER_HEAD: &str = "Answer strictly in the following format:";
const FOOTER_CLASS_PREDICTION: &str = "Prediction: <0 or 1>";
const FOOTER_REG_PREDICTION: &str = "Prediction: <number>";
const FOOTER_PROBABILITY: &str = "Probability: <number between 0 and 1>";
const FOOTER_EXPLANATION: &str = "Explanation: <one short paragraph>";

fn task_phrase(task: TaskSpec) -> &'static str {
    if task.is_classification() {
        "whether a molecule has a binary property (label 1) or not (label 0)"
    } else {
        "a real-valued property of a molecule"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum PromptKind {
    Corrector,
    SelfCorrection,
    Ip,
    Ipd,
    Ie,
    Ied,
    FewShot(usize),
}

impl PromptKind {
    pub fn is_zero_shot(&self) -> bool {
        matches!(
            self,
            PromptKind::Ip | PromptKind::Ipd | PromptKind::Ie | PromptKind::Ied
        )
    }

    pub fn needs_description(&self) -> bool {
        matches!(self, PromptKind::Ipd | PromptKind::Ied)
    }

    pub fn wants_explanation(&self) -> bool {
        matches!(
            self,
            PromptKind::Ie | PromptKind::Ied | PromptKind::Corrector | PromptKind::SelfCorrection
        )
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptKind::Corrector => f.write_str("corrector"),
            PromptKind::SelfCorrection => f.write_str("self-correction"),
            PromptKind::Ip => f.write_str("ip"),
            PromptKind::Ipd => f.write_str("ipd"),
            PromptKind::Ie => f.write_str("ie"),
            PromptKind::Ied => f.write_str("ied"),
            PromptKind::FewShot(k) => write!(f, "fs-{k}"),
        }
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "ip" => PromptKind::Ip,
            "ipd" => PromptKind::Ipd,
            "ie" => PromptKind::Ie,
            "ied" => PromptKind::Ied,
            "corrector" => PromptKind::Corrector,
            "self-correction" => PromptKind::SelfCorrection,
            other => match other.strip_prefix("fs-").or_else(|| other.strip_prefix("fs")) {
                Some(k) => PromptKind::FewShot(
                    k.parse()
                        .ok()
                        .filter(|&k| k >= 1)
                        .ok_or_else(|| Error::Config(format!("bad few-shot count in {s:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown prompt kind {s:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub text: String,
    pub token_estimate: usize,
    pub context_ids: Vec<String>,
}

impl PromptBundle {
    fn new(kind: PromptKind, text: String, context_ids: Vec<String>) -> Self {
        Self {
            kind,
            token_estimate: estimate_tokens(&text),
            text,
            context_ids,
        }
    }
}

/// Rough token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Label or target value as shown in prompts.
pub fn format_value(task: TaskSpec, value: f64) -> String {
    if task.is_classification() {
        format!("{}", if value >= 0.5 { 1 } else { 0 })
    } else {
        format!("{value:.4}")
    }
}

/// Model prediction as shown in prompts: a probability or a regression value.
pub fn format_prediction(value: f64) -> String {
    format!("{value:.4}")
}

/// The answer-format block closing every prompt.
pub fn answer_footer(task: TaskSpec, explanation: bool) -> String {
    let mut lines = vec![FOOTER_HEAD];
    if task.is_classification() {
        lines.push(FOOTER_CLASS_PREDICTION);
        lines.push(FOOTER_PROBABILITY);
    } else {
        lines.push(FOOTER_REG_PREDICTION);
    }
    if explanation {
        lines.push(FOOTER_EXPLANATION);
    }
    lines.join("\n")
}

fn primary_phrase(task: TaskSpec, primary: f64) -> String {
    if task.is_classification() {
        format!(
            "label {} (probability {})",
            format_value(task, primary),
            format_prediction(primary)
        )
    } else {
        format_prediction(primary)
    }
}

fn render_corrector(task: TaskSpec, smiles: &str, primary: f64, entries: &[&ScoredEntry<'_>]) -> String {
    let mut out = CORRECTOR_INSTRUCTION.replace("{task}", task_phrase(task));
    out.push_str("\n\n");
    out.push_str(TRAIN_HEADER);
    let train = entries.iter().filter(|s| s.entry.primary_prediction.is_none());
    for (i, s) in train.enumerate() {
        out.push_str(&format!(
            "\n{}. SMILES: {} ; Label: {}",
            i + 1,
            s.entry.smiles,
            format_value(task, s.entry.label)
        ));
    }
    out.push_str("\n\n");
    out.push_str(VALID_HEADER);
    let valid = entries
        .iter()
        .filter_map(|s| s.entry.primary_prediction.map(|p| (s, p)));
    for (i, (s, p)) in valid.enumerate() {
        out.push_str(&format!(
            "\n{}. SMILES: {} ; Label: {} ; Model prediction: {}",
            i + 1,
            s.entry.smiles,
            format_value(task, s.entry.label),
            format_prediction(p)
        ));
    }
    out.push_str("\n\n");
    out.push_str(
        &CORRECTOR_QUESTION
            .replace("{pred}", &primary_phrase(task, primary))
            .replace("{smiles}", smiles),
    );
    out.push_str("\n\n");
    out.push_str(&answer_footer(task, true));
    out
}

/// Renders the corrector prompt. Context entries are dropped from the lowest
/// rank upward until the token estimate fits `budget`.
pub fn build_corrector_prompt(
    query: &MoleculeRecord,
    primary: f64,
    ctx: &RetrievedContext<'_>,
    task: TaskSpec,
    budget: usize,
) -> Result<PromptBundle> {
    let mut entries = ctx.ranked();
    loop {
        let text = render_corrector(task, &query.smiles, primary, &entries);
        let tokens = estimate_tokens(&text);
        if tokens <= budget {
            // train lines first, then valid lines, each in rank order
            let ids = entries
                .iter()
                .filter(|s| s.entry.primary_prediction.is_none())
                .chain(entries.iter().filter(|s| s.entry.primary_prediction.is_some()))
                .map(|s| s.entry.id.clone())
                .collect();
            return Ok(PromptBundle::new(PromptKind::Corrector, text, ids));
        }
        if entries.pop().is_none() {
            return Err(Error::BudgetTooSmall { budget, needed: tokens });
        }
    }
}

pub fn build_self_correction_prompt(
    query: &MoleculeRecord,
    task: TaskSpec,
    primary: f64,
    proposed: f64,
    prior_explanation: Option<&str>,
) -> PromptBundle {
    let mut out = String::from(SELF_CORRECTION_INSTRUCTION);
    out.push_str(&format!("\n\nMolecule SMILES: {}", query.smiles));
    out.push_str(&format!("\nModel prediction: {}", primary_phrase(task, primary)));
    let proposed_text = if task.is_classification() {
        format!("label {}", format_value(task, proposed))
    } else {
        format_prediction(proposed)
    };
    out.push_str(&format!("\nYour proposed correction: {proposed_text}"));
    if let Some(e) = prior_explanation.map(str::trim).filter(|e| !e.is_empty()) {
        out.push_str(&format!("\nYour previous explanation: {e}"));
    }
    out.push_str("\n\n");
    out.push_str(SELF_CORRECTION_QUESTION);
    out.push_str("\n\n");
    out.push_str(&answer_footer(task, true));
    PromptBundle::new(PromptKind::SelfCorrection, out, Vec::new())
}

/// One labelled few-shot example.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub smiles: &'a str,
    pub label: f64,
    pub id: &'a str,
}

pub fn build_predictor_prompt(
    kind: PromptKind,
    query: &MoleculeRecord,
    examples: &[Shot<'_>],
    task: TaskSpec,
) -> Result<PromptBundle> {
    let mut out = PREDICTOR_INSTRUCTION.replace("{task}", task_phrase(task));
    let mut ids = Vec::new();
    match kind {
        PromptKind::FewShot(k) => {
            if examples.len() != k {
                return Err(Error::WrongExampleCount {
                    expected: k,
                    found: examples.len(),
                });
            }
            out.push_str("\n\n");
            out.push_str(FEW_SHOT_HEADER);
            for (i, ex) in examples.iter().enumerate() {
                out.push_str(&format!(
                    "\n{}. SMILES: {} ; Label: {}",
                    i + 1,
                    ex.smiles,
                    format_value(task, ex.label)
                ));
                ids.push(ex.id.to_string());
            }
        }
        k if k.is_zero_shot() => {}
        other => {
            return Err(Error::Config(format!("{other} is not a predictor prompt")));
        }
    }
    out.push_str(&format!("\n\nMolecule SMILES: {}", query.smiles));
    if kind.needs_description() {
        let d = query
            .description()
            .ok_or_else(|| Error::MissingDescription(query.id.clone()))?;
        out.push_str(&format!("\nDescription: {d}"));
    }
    out.push_str("\n\n");
    out.push_str(PREDICTOR_QUESTION);
    if kind.wants_explanation() {
        out.push(' ');
        out.push_str(EXPLAIN_REQUEST);
    }
    out.push_str("\n\n");
    out.push_str(&answer_footer(task, kind.wants_explanation()));
    Ok(PromptBundle::new(kind, out, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;
    use crate::ingest::Split;
    use crate::knowledge::{KnowledgeEntry, Source};

    fn query(desc: Option<&str>) -> MoleculeRecord {
        MoleculeRecord {
            id: "q".into(),
            smiles: "CCO".into(),
            description: desc.map(Into::into),
            split: Split::Test,
            label: None,
        }
    }

    fn entry(id: &str, source: Source, label: f64) -> KnowledgeEntry {
        KnowledgeEntry {
            id: id.into(),
            smiles: format!("C{id}"),
            description: Some("never shown".into()),
            label,
            primary_prediction: (source == Source::Valid).then_some(1.5),
            source,
            embedding: EmbeddingVector::zeros(8),
        }
    }

    fn ctx<'a>(entries: &'a [KnowledgeEntry]) -> RetrievedContext<'a> {
        let mut c = RetrievedContext::default();
        for (rank, e) in entries.iter().enumerate() {
            let s = ScoredEntry {
                entry: e,
                rank,
                similarity: 1.0 - rank as f64 / 100.0,
            };
            match e.source {
                Source::Train => c.train_entries.push(s),
                Source::Valid => c.valid_entries.push(s),
            }
        }
        c
    }

    #[test]
    fn footer_is_exact() {
        assert_eq!(
            answer_footer(TaskSpec::classification(), true),
            "Answer strictly in the following format:\nPrediction: <0 or 1>\nProbability: <number between 0 and 1>\nExplanation: <one short paragraph>"
        );
        assert_eq!(
            answer_footer(TaskSpec::regression(), false),
            "Answer strictly in the following format:\nPrediction: <number>"
        );
    }

    #[test]
    fn corrector_layout() {
        let entries = [entry("t", Source::Train, 2.0), entry("v", Source::Valid, 1.0)];
        let c = ctx(&entries);
        let p = build_corrector_prompt(&query(None), 1.2345, &c, TaskSpec::regression(), 3000).unwrap();
        let t = &p.text;
        let pos = |needle: &str| t.find(needle).unwrap_or_else(|| panic!("missing {needle:?}"));
        assert!(pos("Instruction:") < pos(TRAIN_HEADER));
        assert!(pos(TRAIN_HEADER) < pos("1. SMILES: Ct ; Label: 2.0000"));
        assert!(pos(VALID_HEADER) < pos("1. SMILES: Cv ; Label: 1.0000 ; Model prediction: 1.5000"));
        assert!(pos(VALID_HEADER) < pos("Question:"));
        assert!(pos("Question:") < pos("The model predicts 1.2345 for the molecule with SMILES: CCO."));
        assert!(pos("Question:") < pos(FOOTER_HEAD));
        assert!(t.ends_with(FOOTER_EXPLANATION));
        assert!(!t.contains("never shown"));
        assert_eq!(p.context_ids, vec!["t", "v"]);
        assert_eq!(p.token_estimate, t.len().div_ceil(4));
    }

    #[test]
    fn corrector_empty_context() {
        let p = build_corrector_prompt(
            &query(None),
            0.7,
            &RetrievedContext::default(),
            TaskSpec::classification(),
            3000,
        )
        .unwrap();
        assert!(p.text.contains(TRAIN_HEADER) && p.text.contains(VALID_HEADER));
        assert!(!p.text.contains("1. SMILES"));
        assert!(p.text.contains("label 1 (probability 0.7000)"));
    }

    #[test]
    fn corrector_budget_truncation() {
        let entries: Vec<_> = (0..50)
            .map(|i| {
                entry(
                    &format!("{i:02}"),
                    if i % 3 == 0 { Source::Valid } else { Source::Train },
                    1.0,
                )
            })
            .collect();
        let c = ctx(&entries);
        let p = build_corrector_prompt(&query(None), 1.0, &c, TaskSpec::regression(), 200).unwrap();
        assert!(p.token_estimate <= 200);
        // Oracle: the kept entries are exactly the longest rank prefix that fits.
        let kept = p.context_ids.len();
        let ranked = c.ranked();
        let fits =
            |n: usize| estimate_tokens(&render_corrector(TaskSpec::regression(), "CCO", 1.0, &ranked[..n])) <= 200;
        assert!(fits(kept));
        assert!(!fits(kept + 1));
        let mut expected: Vec<_> = ranked[..kept].iter().map(|s| s.entry.id.clone()).collect();
        expected.sort_by_key(|id| {
            (
                entries.iter().find(|e| &e.id == id).unwrap().source == Source::Valid,
                id.clone(),
            )
        });
        assert_eq!(p.context_ids, expected);

        assert!(matches!(
            build_corrector_prompt(&query(None), 1.0, &c, TaskSpec::regression(), 10),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn self_correction_values() {
        let p = build_self_correction_prompt(&query(None), TaskSpec::classification(), 1.0, 0.0, Some("ring"));
        assert!(p.text.contains("Model prediction: label 1"));
        assert!(p.text.contains("Your proposed correction: label 0"));
        assert!(p.text.contains("Your previous explanation: ring"));
        assert!(p.text.contains("confirm your correction or revise it"));

        let r = build_self_correction_prompt(&query(None), TaskSpec::regression(), 2.0, 2.6, None);
        assert!(r.text.contains("Model prediction: 2.0000"));
        assert!(r.text.contains("Your proposed correction: 2.6000"));
        assert!(!r.text.contains("previous explanation"));
        let empty = build_self_correction_prompt(&query(None), TaskSpec::regression(), 2.0, 2.6, Some("  "));
        assert_eq!(empty.text, r.text);
    }

    #[test]
    fn predictor_kinds() {
        let cls = TaskSpec::classification();
        let ip = build_predictor_prompt(PromptKind::Ip, &query(Some("desc")), &[], cls).unwrap();
        assert!(!ip.text.contains("Description:"));
        assert!(!ip.text.contains("Explanation"));
        assert!(ip.text.contains(FOOTER_PROBABILITY));
        assert!(ip.context_ids.is_empty());

        let ied = build_predictor_prompt(PromptKind::Ied, &query(Some("a small alcohol")), &[], cls).unwrap();
        assert!(ied.text.contains("Description: a small alcohol"));
        assert!(ied.text.contains(EXPLAIN_REQUEST));
        assert!(ied.text.ends_with(FOOTER_EXPLANATION));

        assert!(matches!(
            build_predictor_prompt(PromptKind::Ipd, &query(None), &[], cls),
            Err(Error::MissingDescription(_))
        ));

        let reg = build_predictor_prompt(PromptKind::Ie, &query(None), &[], TaskSpec::regression()).unwrap();
        assert!(!reg.text.contains("Probability"));
    }

    #[test]
    fn few_shot_lines() {
        let shots: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| Shot {
                smiles: "CC",
                label: 1.0,
                id,
            })
            .collect();
        let p =
            build_predictor_prompt(PromptKind::FewShot(3), &query(None), &shots, TaskSpec::classification()).unwrap();
        let lines = p.text.lines().filter(|l| l.contains(". SMILES: ")).count();
        assert_eq!(lines, 3);
        assert_eq!(p.context_ids, vec!["a", "b", "c"]);
        assert!(matches!(
            build_predictor_prompt(PromptKind::FewShot(2), &query(None), &shots, TaskSpec::classification()),
            Err(Error::WrongExampleCount { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("fs-3".parse::<PromptKind>().unwrap(), PromptKind::FewShot(3));
        assert_eq!("IED".parse::<PromptKind>().unwrap(), PromptKind::Ied);
        assert!("fs-0".parse::<PromptKind>().is_err());
        assert_eq!(PromptKind::FewShot(10).to_string(), "fs-10");
    }
}
