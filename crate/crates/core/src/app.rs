//! Command implementations behind the `llm-corrector` binary.

use std::path::Path;

use serde::Serialize;

use crate::config::AppConfig;
use crate::correct::{outcomes_jsonl, CorrectionOutcome, Corrector, RunSummary};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_split, run_ablation, score, AblationAxis, AblationInputs, EvalReport, MetricValue};
use crate::ingest::{load_molecules, load_predictions, DatasetBundle, PredictionSet, Split};
use crate::knowledge::{build_database, load_database, retrieve_from, save_database, Source, METADATA_FILE};
use crate::llmclient::{AuditLog, AuditRecord, LlmClient, QueryMeta};
use crate::parse::{consistency_rate, parse_response, ConsistencyStats, ParseError, ParsedAnswer};
use crate::prompt::{build_predictor_prompt, PromptKind, Shot};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    /// Some queries fell back or failed.
    Partial = 1,
    /// Configuration or input error.
    Failure = 2,
}

impl Status {
    fn from_outcomes(outcomes: &[CorrectionOutcome]) -> Self {
        if outcomes.iter().any(|o| o.fallback_used || o.error.is_some()) {
            Status::Partial
        } else {
            Status::Success
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

fn load_split_predictions(cfg: &AppConfig, bundle: &DatasetBundle, split: Split) -> Result<PredictionSet> {
    load_predictions(cfg.predictions_path(split)?, bundle, split)
}

pub fn cmd_build_db(cfg: &AppConfig, force: bool) -> Result<Status> {
    let embedder_cfg = cfg.embedder_config()?;
    if !force && cfg.database_dir.join(METADATA_FILE).exists() {
        let existing = load_database(&cfg.database_dir)?;
        if let Some(dim) = embedder_cfg.known_dim().filter(|&d| d != existing.dim()) {
            return Err(Error::DimMismatch {
                left: existing.dim(),
                right: dim,
            });
        }
    }
    let bundle = load_molecules(&cfg.dataset, cfg.task)?;
    let val = load_predictions(&cfg.valid_predictions, &bundle, Split::Valid)?;
    let embedder = Embedder::new(embedder_cfg)?;
    let db = build_database(&bundle, &val, &embedder, cfg.include_description)?;
    save_database(&db, &cfg.database_dir)?;
    println!(
        "built knowledge database at {}: {} entries ({} train, {} valid), dim {}, embedder {}",
        cfg.database_dir.display(),
        db.len(),
        db.count(Source::Train),
        db.count(Source::Valid),
        db.dim(),
        db.fingerprint().backend
    );
    Ok(Status::Success)
}

pub fn cmd_correct(cfg: &AppConfig, split: Split) -> Result<Status> {
    let run = cfg.run_config()?;
    let bundle = load_molecules(&cfg.dataset, cfg.task)?;
    let predictions = load_split_predictions(cfg, &bundle, split)?;
    let db = load_database(&cfg.database_dir)?;
    if db.task() != cfg.task {
        return Err(Error::Config("database task differs from configured task".into()));
    }
    let embedder = Embedder::new(cfg.embedder_config()?)?;
    let llm = LlmClient::new(cfg.llm_config()?)?;
    let corrector = Corrector::new(&db, &embedder, &llm, &run)?;

    let results = corrector.correct_split(&bundle, split, &predictions)?;
    let outcomes: Vec<CorrectionOutcome> = results.iter().map(|r| r.outcome.clone()).collect();

    let out = &cfg.output_dir;
    write_file(&out.join(format!("outcomes-{split}.jsonl")), outcomes_jsonl(&outcomes))?;
    let summary = RunSummary::new(split, &outcomes, &run);
    write_json(&out.join(format!("summary-{split}.json")), &summary)?;
    if cfg.audit_log {
        let path = out.join(format!("audit-{split}.jsonl"));
        write_file(&path, "")?;
        let log = AuditLog::open(&path)?;
        let records: Vec<AuditRecord> = results.into_iter().flat_map(|r| r.audit).collect();
        log.append(&records).map_err(|e| Error::io(&path, e))?;
    }

    println!(
        "corrected {} {split} molecules: {} self-corrections, {} fallbacks, {} errors, consistency {:.3}",
        summary.queries, summary.self_corrections, summary.fallbacks, summary.errors, summary.consistency.rate
    );
    if bundle.has_labels(split) && !outcomes.is_empty() {
        let report = EvalReport {
            label: format!("correction on {split}"),
            task: bundle.task,
            config: run.clone(),
            splits: vec![evaluate_split(&bundle, split, &outcomes, &run)?],
        };
        write_json(&out.join(format!("report-{split}.json")), &report)?;
        let table = report.to_table();
        write_file(&out.join(format!("report-{split}.txt")), &table)?;
        print!("{table}");
    }
    Ok(Status::from_outcomes(&outcomes))
}

#[derive(Debug, Clone, Serialize)]
struct PredictorLine {
    id: String,
    prediction: f64,
    answer: Option<ParsedAnswer>,
    parse_error: Option<ParseError>,
    error: Option<String>,
    examples: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct PredictorSummary {
    kind: PromptKind,
    split: Split,
    queries: usize,
    failures: usize,
    consistency: ConsistencyStats,
    metric: Option<MetricValue>,
}

/// Asks the LLM to predict properties directly with a predictor prompt.
pub fn cmd_predict(cfg: &AppConfig, kind: PromptKind, split: Split) -> Result<Status> {
    if matches!(kind, PromptKind::Corrector | PromptKind::SelfCorrection) {
        return Err(Error::Config(format!("{kind} is not a predictor prompt")));
    }
    let bundle = load_molecules(&cfg.dataset, cfg.task)?;
    let task = bundle.task;
    let records: Vec<_> = bundle.split(split).collect();
    if kind.needs_description() {
        if let Some(r) = records.iter().find(|r| r.description().is_none()) {
            return Err(Error::MissingDescription(r.id.clone()));
        }
    }
    // Primary predictions are optional here: they only feed the echo mock
    // and the fallback value.
    let primaries = match split {
        Split::Train => None,
        s => cfg
            .predictions_path(s)
            .ok()
            .filter(|p| p.exists())
            .map(|_| load_split_predictions(cfg, &bundle, s))
            .transpose()?,
    };
    let train_labels: Vec<f64> = bundle.split(Split::Train).filter_map(|r| r.label).collect();
    let fallback_value = if train_labels.is_empty() {
        0.0
    } else {
        train_labels.iter().sum::<f64>() / train_labels.len() as f64
    };

    let embedder = Embedder::new(cfg.embedder_config()?)?;
    let db = match kind {
        PromptKind::FewShot(k) => {
            if k > bundle.count(Split::Train) {
                return Err(Error::Config(format!(
                    "few-shot k={k} exceeds the {} training molecules",
                    bundle.count(Split::Train)
                )));
            }
            Some(load_database(&cfg.database_dir)?)
        }
        _ => None,
    };
    let llm = LlmClient::new(cfg.llm_config()?)?;
    let strategy = cfg.retrieval_strategy()?;

    let predict_one = |r: &crate::ingest::MoleculeRecord| -> Result<(PredictorLine, Option<AuditRecord>)> {
        let primary = primaries.as_ref().and_then(|p| p.get(&r.id));
        let exclude = (r.split != Split::Test).then_some(r.id.as_str());
        let shots_ctx = match (&db, kind) {
            (Some(db), PromptKind::FewShot(k)) => {
                let q = embedder.embed_molecule(r, db.fingerprint().include_description)?;
                Some(retrieve_from(db, &q, k, strategy, exclude, Some(Source::Train))?)
            }
            _ => None,
        };
        let shots: Vec<Shot> = shots_ctx
            .iter()
            .flat_map(|c| c.ranked())
            .map(|s| Shot {
                smiles: &s.entry.smiles,
                label: s.entry.label,
                id: &s.entry.id,
            })
            .collect();
        let prompt = build_predictor_prompt(kind, r, &shots, task)?;
        let meta = QueryMeta {
            id: r.id.clone(),
            task,
            primary,
            truth: r.label,
        };
        let mut line = PredictorLine {
            id: r.id.clone(),
            prediction: primary.unwrap_or(fallback_value),
            answer: None,
            parse_error: None,
            error: None,
            examples: prompt.context_ids.clone(),
        };
        match llm.complete(&prompt, &meta) {
            Ok(x) => {
                let audit = AuditRecord::new(&r.id, &x, exclude);
                match parse_response(&x.response_text, task) {
                    Ok(a) => {
                        line.prediction = match a.probability {
                            Some(p) if task.is_classification() => p,
                            _ => a.prediction,
                        };
                        line.answer = Some(a);
                    }
                    Err(e) => line.parse_error = Some(e),
                }
                Ok((line, Some(audit)))
            }
            Err(e) => {
                line.error = Some(e.to_string());
                Ok((line, None))
            }
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<(PredictorLine, Option<AuditRecord>)> = pool.install(|| {
        use rayon::prelude::*;
        records.par_iter().map(|r| predict_one(r)).collect::<Result<_>>()
    })?;

    let parsed: Vec<std::result::Result<ParsedAnswer, ParseError>> = results
        .iter()
        .filter_map(|(l, _)| match (&l.answer, &l.parse_error) {
            (Some(a), _) => Some(Ok(a.clone())),
            (None, Some(e)) => Some(Err(e.clone())),
            _ => None,
        })
        .collect();
    let failures = results.iter().filter(|(l, _)| l.answer.is_none()).count();
    let metric = if bundle.has_labels(split) && !records.is_empty() {
        let preds: Vec<f64> = results.iter().map(|(l, _)| l.prediction).collect();
        let truths: Vec<f64> = records.iter().filter_map(|r| r.label).collect();
        Some(score(task, &preds, &truths)?)
    } else {
        None
    };
    let summary = PredictorSummary {
        kind,
        split,
        queries: results.len(),
        failures,
        consistency: consistency_rate(&parsed),
        metric,
    };

    let out = &cfg.output_dir;
    let mut text = String::new();
    for (l, _) in &results {
        text.push_str(&serde_json::to_string(l).expect("line serializes"));
        text.push('\n');
    }
    write_file(&out.join(format!("predictions-{kind}-{split}.jsonl")), text)?;
    write_json(&out.join(format!("predict-summary-{kind}-{split}.json")), &summary)?;
    if cfg.audit_log {
        let path = out.join(format!("audit-{kind}-{split}.jsonl"));
        write_file(&path, "")?;
        let records: Vec<AuditRecord> = results.iter().filter_map(|(_, a)| a.clone()).collect();
        AuditLog::open(&path)?
            .append(&records)
            .map_err(|e| Error::io(&path, e))?;
    }
    match summary.metric {
        Some(m) => println!(
            "{kind} on {split}: {} = {:.4}, consistency {:.3}, {} failures",
            m.metric, m.value, summary.consistency.rate, failures
        ),
        None => println!(
            "{kind} on {split}: consistency {:.3}, {failures} failures",
            summary.consistency.rate
        ),
    }
    Ok(if failures > 0 { Status::Partial } else { Status::Success })
}

pub fn cmd_ablate(cfg: &AppConfig, axis_name: &str, split: Split) -> Result<Status> {
    let axis = match axis_name {
        "k" => AblationAxis::KSweep(cfg.ablate_k.clone()),
        "strategy" => AblationAxis::StrategySweep,
        "embedder" => AblationAxis::EmbedderSweep(cfg.ablation_embedders()?),
        "self-correction" => AblationAxis::SelfCorrectionToggle,
        other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
    };
    let run = cfg.run_config()?;
    let bundle = load_molecules(&cfg.dataset, cfg.task)?;
    let val = load_predictions(&cfg.valid_predictions, &bundle, Split::Valid)?;
    let split_preds = load_split_predictions(cfg, &bundle, split)?;
    let llm = LlmClient::new(cfg.llm_config()?)?;
    let embedder_cfg = cfg.embedder_config()?;
    let embedder = Embedder::new(embedder_cfg.clone())?;
    let db = build_database(&bundle, &val, &embedder, cfg.include_description)?;
    let inputs = AblationInputs {
        bundle: &bundle,
        val_predictions: &val,
        split,
        split_predictions: &split_preds,
        llm: &llm,
        embedder: embedder_cfg,
        include_description: cfg.include_description,
        database: Some(&db),
    };
    let reports = run_ablation(&axis, &run, &inputs)?;
    let mut table = String::new();
    for (i, r) in reports.iter().enumerate() {
        write_json(&cfg.output_dir.join(format!("ablation-{axis_name}-{i}.json")), r)?;
        table.push_str(&r.to_table());
        table.push('\n');
    }
    write_file(&cfg.output_dir.join(format!("ablation-{axis_name}.txt")), &table)?;
    print!("{table}");
    let partial = reports.iter().flat_map(|r| &r.splits).any(|s| s.fallbacks > 0);
    Ok(if partial { Status::Partial } else { Status::Success })
}
