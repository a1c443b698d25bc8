//! Metrics (ROC-AUC, RMSE), baseline-vs-corrected reports and ablation sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::correct::{CorrectionOutcome, Corrector, FinalSource, RunConfig, RunSummary};
use crate::embed::{Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::ingest::{DatasetBundle, Metric, PredictionSet, Split, TaskSpec};
use crate::knowledge::{build_database, KnowledgeDatabase, RetrievalStrategy};
use crate::llmclient::LlmClient;
use crate::parse::ConsistencyStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

/// ROC-AUC as the Mann-Whitney statistic: the fraction of positive/negative
/// pairs ordered correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<MetricValue> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &y)| (s, y >= 0.5)).collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the Mann-Whitney U, kept integral: each positive scores 2 per
    // lower negative and 1 per tied negative.
    let mut doubled_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let group = &pairs[i..j];
        let pos = group.iter().filter(|p| p.1).count() as u128;
        let neg = group.len() as u128 - pos;
        doubled_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    let value = doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(MetricValue {
        metric: Metric::RocAuc,
        value,
        n: scores.len(),
    })
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<MetricValue> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(MetricValue {
        metric: Metric::Rmse,
        value: (sse / preds.len() as f64).sqrt(),
        n: preds.len(),
    })
}

pub fn score(task: TaskSpec, preds: &[f64], truths: &[f64]) -> Result<MetricValue> {
    match task.metric() {
        Metric::RocAuc => roc_auc(preds, truths),
        Metric::Rmse => rmse(preds, truths),
    }
}

/// Signed relative change in percent, rounded half away from zero to one
/// decimal.
pub fn improvement_pct(old: f64, new: f64) -> Result<f64> {
    if old == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    let pct = 100.0 * (new - old) / old;
    Ok((pct * 10.0).round() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub baseline: MetricValue,
    pub corrected: MetricValue,
    pub improvement_pct: f64,
    pub consistency: ConsistencyStats,
    pub fallbacks: usize,
    pub self_corrections: usize,
    /// How the corrected classification scores were obtained.
    pub scores_from_probability: usize,
    pub scores_from_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub task: TaskSpec,
    pub config: RunConfig,
    pub splits: Vec<SplitReport>,
}

/// Scores a split's outcomes against its labels. Needs every label.
pub fn evaluate_split(
    bundle: &DatasetBundle,
    split: Split,
    outcomes: &[CorrectionOutcome],
    config: &RunConfig,
) -> Result<SplitReport> {
    let records: Vec<_> = bundle.split(split).collect();
    if records.len() != outcomes.len() {
        return Err(Error::LengthMismatch(records.len(), outcomes.len()));
    }
    let mut truths = Vec::with_capacity(records.len());
    for (r, o) in records.iter().zip(outcomes) {
        if r.id != o.id {
            return Err(Error::Config(format!("outcome {:?} out of dataset order", o.id)));
        }
        truths.push(r.label.ok_or_else(|| Error::MissingLabel(r.id.clone()))?);
    }
    let primary: Vec<f64> = outcomes.iter().map(|o| o.primary).collect();
    let corrected: Vec<f64> = outcomes.iter().map(|o| o.final_prediction).collect();
    let baseline = score(bundle.task, &primary, &truths)?;
    let corrected = score(bundle.task, &corrected, &truths)?;
    let summary = RunSummary::new(split, outcomes, config);
    let count = |s: FinalSource| outcomes.iter().filter(|o| o.final_source == s).count();
    Ok(SplitReport {
        split,
        improvement_pct: improvement_pct(baseline.value, corrected.value)?,
        baseline,
        corrected,
        consistency: summary.consistency,
        fallbacks: summary.fallbacks,
        self_corrections: summary.self_corrections,
        scores_from_probability: count(FinalSource::Probability),
        scores_from_label: count(FinalSource::Label),
    })
}

fn signed_pct(p: f64) -> String {
    if p.is_sign_negative() {
        format!("-{:.1}%", p.abs())
    } else {
        format!("+{p:.1}%")
    }
}

impl EvalReport {
    /// Plain-text table: one column per split, value over improvement.
    pub fn to_table(&self) -> String {
        let metric = self.task.metric();
        let arrow = if metric == Metric::RocAuc {
            "higher is better"
        } else {
            "lower is better"
        };
        let mut out = format!("{} ({metric}, {arrow})\n", self.label);
        let width = 10;
        let _ = write!(out, "{:<12}", "");
        for s in &self.splits {
            let _ = write!(out, "| {:>width$} ", s.split.as_str());
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "baseline");
        for s in &self.splits {
            let _ = write!(out, "| {:>width$.4} ", s.baseline.value);
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "corrected");
        for s in &self.splits {
            let _ = write!(out, "| {:>width$.4} ", s.corrected.value);
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "");
        for s in &self.splits {
            let _ = write!(out, "| {:>width$} ", signed_pct(s.improvement_pct));
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    KSweep(Vec<usize>),
    StrategySweep,
    EmbedderSweep(Vec<EmbedderConfig>),
    SelfCorrectionToggle,
}

/// Everything an ablation point needs besides its configuration.
pub struct AblationInputs<'a> {
    pub bundle: &'a DatasetBundle,
    pub val_predictions: &'a PredictionSet,
    pub split: Split,
    pub split_predictions: &'a PredictionSet,
    pub llm: &'a LlmClient,
    pub embedder: EmbedderConfig,
    pub include_description: bool,
    /// Reused for every point that does not change the embedder.
    pub database: Option<&'a KnowledgeDatabase>,
}

fn run_point(
    inputs: &AblationInputs<'_>,
    label: String,
    cfg: RunConfig,
    embedder_cfg: &EmbedderConfig,
    db: Option<&KnowledgeDatabase>,
) -> Result<EvalReport> {
    let embedder = Embedder::new(embedder_cfg.clone())?;
    let owned;
    let db = match db {
        Some(db) => db,
        None => {
            owned = build_database(
                inputs.bundle,
                inputs.val_predictions,
                &embedder,
                inputs.include_description,
            )?;
            &owned
        }
    };
    let corrector = Corrector::new(db, &embedder, inputs.llm, &cfg)?;
    let results = corrector.correct_split(inputs.bundle, inputs.split, inputs.split_predictions)?;
    let outcomes: Vec<_> = results.into_iter().map(|r| r.outcome).collect();
    let report = evaluate_split(inputs.bundle, inputs.split, &outcomes, &cfg)?;
    Ok(EvalReport {
        label,
        task: inputs.bundle.task,
        config: cfg,
        splits: vec![report],
    })
}

/// One report per axis point, in axis order; everything else held at `base`.
pub fn run_ablation(axis: &AblationAxis, base: &RunConfig, inputs: &AblationInputs<'_>) -> Result<Vec<EvalReport>> {
    let points: Vec<(String, RunConfig, Option<EmbedderConfig>)> = match axis {
        AblationAxis::KSweep(ks) => ks
            .iter()
            .map(|&k| (format!("k={k}"), RunConfig { k, ..base.clone() }, None))
            .collect(),
        AblationAxis::StrategySweep => [
            RetrievalStrategy::TopK,
            RetrievalStrategy::Jump,
            RetrievalStrategy::Random { seed: base.seed },
        ]
        .into_iter()
        .map(|s| {
            (
                format!("strategy={}", s.name()),
                RunConfig {
                    strategy: s,
                    ..base.clone()
                },
                None,
            )
        })
        .collect(),
        AblationAxis::EmbedderSweep(cfgs) => cfgs
            .iter()
            .map(|c| {
                let label = match c.known_dim() {
                    Some(d) => format!("embedder={} dim={d}", c.backend_id()),
                    None => format!("embedder={}", c.backend_id()),
                };
                (label, base.clone(), Some(c.clone()))
            })
            .collect(),
        AblationAxis::SelfCorrectionToggle => [true, false]
            .into_iter()
            .map(|on| {
                (
                    format!("self_correction={}", if on { "on" } else { "off" }),
                    RunConfig {
                        self_correction: on,
                        ..base.clone()
                    },
                    None,
                )
            })
            .collect(),
    };
    points
        .into_iter()
        .map(|(label, cfg, embedder)| match embedder {
            Some(e) => run_point(inputs, label, cfg, &e, None),
            None => run_point(inputs, label, cfg, &inputs.embedder, inputs.database),
        })
        .collect()
}
