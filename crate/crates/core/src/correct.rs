//! The correction loop: for each query molecule, retrieve context, ask the
//! LLM to refine the model's prediction, and re-check large changes with a
//! self-correction pass.

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::hashing::query_seed;
use crate::ingest::{DatasetBundle, MoleculeRecord, PredictionSet, Split, TaskSpec};
use crate::knowledge::{retrieve, KnowledgeDatabase, RetrievalStrategy, RetrievedContext};
use crate::llmclient::{AuditRecord, LlmClient, QueryMeta};
use crate::parse::{consistency_rate, parse_response, ConsistencyStats, ParseError, ParsedAnswer};
use crate::prompt::{build_corrector_prompt, build_self_correction_prompt, DEFAULT_TOKEN_BUDGET};

const ZERO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub strategy: RetrievalStrategy,
    pub self_correction: bool,
    pub regression_trigger_fraction: f64,
    pub token_budget: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 10,
            strategy: RetrievalStrategy::TopK,
            self_correction: true,
            regression_trigger_fraction: 0.20,
            token_budget: DEFAULT_TOKEN_BUDGET,
            seed: 0,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.regression_trigger_fraction.is_nan() || self.regression_trigger_fraction <= 0.0 {
            return Err(Error::Config("trigger fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Whether a proposed correction departs far enough from the primary
/// prediction to warrant a self-correction pass.
pub fn should_self_correct(task: TaskSpec, primary: f64, proposed: f64, cfg: &RunConfig) -> bool {
    if task.is_classification() {
        let primary_label = if primary >= 0.5 { 1.0 } else { 0.0 };
        let proposed_label = if proposed >= 0.5 { 1.0 } else { 0.0 };
        primary_label != proposed_label
    } else if primary.abs() < ZERO_EPS {
        proposed.abs() >= ZERO_EPS
    } else {
        (proposed - primary).abs() > cfg.regression_trigger_fraction * primary.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalSource {
    /// Fallback to the primary prediction.
    Primary,
    Probability,
    Label,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub id: String,
    pub primary: f64,
    pub initial: Option<ParsedAnswer>,
    pub parse_error: Option<ParseError>,
    pub self_correction_invoked: bool,
    pub self_correction: Option<ParsedAnswer>,
    #[serde(rename = "final")]
    pub final_prediction: f64,
    pub final_source: FinalSource,
    pub fallback_used: bool,
    pub context_ids: Vec<String>,
    pub error: Option<String>,
}

/// Outcome plus the audit trail of LLM exchanges behind it.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub outcome: CorrectionOutcome,
    pub audit: Vec<AuditRecord>,
}

/// Value recorded as the refined prediction for a parsed answer.
fn resolve(task: TaskSpec, answer: &ParsedAnswer) -> (f64, FinalSource) {
    if task.is_classification() {
        match answer.probability {
            Some(p) => (p, FinalSource::Probability),
            None => (answer.prediction, FinalSource::Label),
        }
    } else {
        (answer.prediction, FinalSource::Value)
    }
}

pub struct Corrector<'a> {
    db: &'a KnowledgeDatabase,
    embedder: &'a Embedder,
    llm: &'a LlmClient,
    cfg: &'a RunConfig,
}

impl<'a> Corrector<'a> {
    pub fn new(
        db: &'a KnowledgeDatabase,
        embedder: &'a Embedder,
        llm: &'a LlmClient,
        cfg: &'a RunConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let configured = embedder.config().backend_id();
        let fp = db.fingerprint();
        if configured != fp.backend {
            return Err(Error::FingerprintMismatch {
                database: fp.backend.clone(),
                configured,
            });
        }
        if let Some(dim) = embedder.config().known_dim().filter(|&d| d != fp.dim) {
            return Err(Error::DimMismatch {
                left: fp.dim,
                right: dim,
            });
        }
        Ok(Self { db, embedder, llm, cfg })
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    fn strategy_for(&self, id: &str) -> RetrievalStrategy {
        match self.cfg.strategy {
            RetrievalStrategy::Random { seed } => RetrievalStrategy::Random {
                seed: query_seed(seed, id),
            },
            other => other,
        }
    }

    /// Retrieval step alone; validation queries never see their own entry.
    pub fn retrieve_for(&self, record: &MoleculeRecord) -> Result<RetrievedContext<'a>> {
        let query = self
            .embedder
            .embed_molecule(record, self.db.fingerprint().include_description)?;
        let exclude = (record.split == Split::Valid).then_some(record.id.as_str());
        match retrieve(self.db, &query, self.cfg.k, self.strategy_for(&record.id), exclude) {
            Err(Error::EmptyPool) => Ok(RetrievedContext::default()),
            other => other,
        }
    }

    pub fn correct_one(&self, record: &MoleculeRecord, primary: f64) -> QueryResult {
        let task = self.db.task();
        let exclude = (record.split == Split::Valid).then_some(record.id.as_str());
        let mut outcome = CorrectionOutcome {
            id: record.id.clone(),
            primary,
            initial: None,
            parse_error: None,
            self_correction_invoked: false,
            self_correction: None,
            final_prediction: primary,
            final_source: FinalSource::Primary,
            fallback_used: true,
            context_ids: Vec::new(),
            error: None,
        };
        let mut audit = Vec::new();
        let meta = QueryMeta {
            id: record.id.clone(),
            task,
            primary: Some(primary),
            truth: record.label,
        };

        let exchange = self.retrieve_for(record).and_then(|ctx| {
            let prompt = build_corrector_prompt(record, primary, &ctx, task, self.cfg.token_budget)?;
            outcome.context_ids = prompt.context_ids.clone();
            self.llm.complete(&prompt, &meta)
        });
        let exchange = match exchange {
            Ok(x) => x,
            Err(e) => {
                outcome.error = Some(e.to_string());
                return QueryResult { outcome, audit };
            }
        };
        audit.push(AuditRecord::new(&record.id, &exchange, exclude));

        let initial = match parse_response(&exchange.response_text, task) {
            Ok(a) => a,
            Err(e) => {
                outcome.parse_error = Some(e);
                return QueryResult { outcome, audit };
            }
        };
        let (value, source) = resolve(task, &initial);
        outcome.fallback_used = false;
        outcome.final_prediction = value;
        outcome.final_source = source;

        if self.cfg.self_correction && should_self_correct(task, primary, initial.prediction, self.cfg) {
            outcome.self_correction_invoked = true;
            let prompt = build_self_correction_prompt(
                record,
                task,
                primary,
                initial.prediction,
                initial.explanation.as_deref(),
            );
            match self.llm.complete(&prompt, &meta) {
                Ok(x) => {
                    audit.push(AuditRecord::new(&record.id, &x, exclude));
                    // an unparseable second answer keeps the first correction
                    if let Ok(revised) = parse_response(&x.response_text, task) {
                        let (value, source) = resolve(task, &revised);
                        outcome.final_prediction = value;
                        outcome.final_source = source;
                        outcome.self_correction = Some(revised);
                    }
                }
                Err(e) => outcome.error = Some(e.to_string()),
            }
        }
        outcome.initial = Some(initial);
        QueryResult { outcome, audit }
    }

    /// Corrects every molecule of `split`, in dataset order, using up to
    /// `cfg.jobs` worker threads.
    pub fn correct_split(
        &self,
        bundle: &DatasetBundle,
        split: Split,
        predictions: &PredictionSet,
    ) -> Result<Vec<QueryResult>> {
        use rayon::prelude::*;

        if split == Split::Train {
            return Err(Error::Config("corrections run on valid or test splits".into()));
        }
        let queries: Vec<(&MoleculeRecord, f64)> = bundle
            .split(split)
            .map(|r| {
                predictions
                    .get(&r.id)
                    .map(|p| (r, p))
                    .ok_or_else(|| Error::MissingPrediction(r.id.clone()))
            })
            .collect::<Result<_>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.jobs.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(pool.install(|| queries.par_iter().map(|(r, p)| self.correct_one(r, *p)).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub split: Split,
    pub queries: usize,
    pub fallbacks: usize,
    pub self_corrections: usize,
    pub errors: usize,
    pub consistency: ConsistencyStats,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new(split: Split, outcomes: &[CorrectionOutcome], config: &RunConfig) -> Self {
        let parsed: Vec<std::result::Result<ParsedAnswer, ParseError>> = outcomes
            .iter()
            .filter_map(|o| match (&o.initial, &o.parse_error) {
                (Some(a), _) => Some(Ok(a.clone())),
                (None, Some(e)) => Some(Err(e.clone())),
                (None, None) => None,
            })
            .collect();
        Self {
            split,
            queries: outcomes.len(),
            fallbacks: outcomes.iter().filter(|o| o.fallback_used).count(),
            self_corrections: outcomes.iter().filter(|o| o.self_correction_invoked).count(),
            errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
            consistency: consistency_rate(&parsed),
            config: config.clone(),
        }
    }
}

/// Serializes outcomes as JSON lines.
pub fn outcomes_jsonl(outcomes: &[CorrectionOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&serde_json::to_string(o).expect("outcome serializes"));
        out.push('\n');
    }
    out
}
