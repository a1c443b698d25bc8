//! Application configuration: a `key = value` file whose keys are the
//! [`AppConfig`] field names, with command-line overrides applied on top.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::correct::RunConfig;
use crate::embed::{EmbedderConfig, RemoteEmbedderConfig, DEFAULT_DIM, DEFAULT_NGRAM};
use crate::error::{Error, Result};
use crate::ingest::{Split, TaskSpec};
use crate::knowledge::RetrievalStrategy;
use crate::llmclient::{LlmBackendConfig, RemoteChatConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub task: TaskSpec,
    pub dataset: PathBuf,
    pub valid_predictions: PathBuf,
    pub test_predictions: Option<PathBuf>,
    pub database_dir: PathBuf,
    pub output_dir: PathBuf,

    pub k: usize,
    pub strategy: String,
    pub seed: u64,
    pub self_correction: bool,
    pub regression_trigger_fraction: f64,
    pub token_budget: usize,
    pub jobs: usize,

    pub embedder: String,
    pub embed_dim: usize,
    pub embed_ngram: usize,
    pub include_description: bool,
    pub embed_endpoint: String,
    pub embed_model: String,
    pub embed_key_env: String,
    pub embed_response_path: String,

    pub backend: String,
    pub noise_p: f64,
    pub scripted_responses: Option<PathBuf>,
    pub llm_endpoint: String,
    pub llm_model: String,
    pub llm_key_env: String,
    pub llm_response_path: String,
    pub temperature: Option<f64>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,

    pub audit_log: bool,
    pub ablate_k: Vec<usize>,
    pub ablate_embedders: Vec<String>,
}

impl Default for AppConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            task: TaskSpec::classification(),
            dataset: PathBuf::from("molecules.csv"),
            valid_predictions: PathBuf::from("valid_predictions.jsonl"),
            test_predictions: None,
            database_dir: PathBuf::from("knowledge_db"),
            output_dir: PathBuf::from("out"),
            k: run.k,
            strategy: "topk".into(),
            seed: run.seed,
            self_correction: run.self_correction,
            regression_trigger_fraction: run.regression_trigger_fraction,
            token_budget: run.token_budget,
            jobs: 1,
            embedder: "local-hash".into(),
            embed_dim: DEFAULT_DIM,
            embed_ngram: DEFAULT_NGRAM,
            include_description: false,
            embed_endpoint: String::new(),
            embed_model: String::new(),
            embed_key_env: "EMBEDDING_API_KEY".into(),
            embed_response_path: "data[*].embedding".into(),
            backend: "echo".into(),
            noise_p: 0.5,
            scripted_responses: None,
            llm_endpoint: String::new(),
            llm_model: String::new(),
            llm_key_env: "LLM_API_KEY".into(),
            llm_response_path: "choices[0].message.content".into(),
            temperature: None,
            timeout_secs: 60,
            max_in_flight: 4,
            audit_log: false,
            ablate_k: vec![1, 10, 30],
            ablate_embedders: vec![
                "local-hash:64:3".into(),
                "local-hash:256:3".into(),
                "local-hash:1024:3".into(),
            ],
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl AppConfig {
    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "dataset" => self.dataset = v.into(),
            "valid_predictions" => self.valid_predictions = v.into(),
            "test_predictions" => self.test_predictions = optional_path(v),
            "database_dir" => self.database_dir = v.into(),
            "output_dir" => self.output_dir = v.into(),
            "k" => self.k = parse_num(key, v)?,
            "strategy" => self.strategy = v.to_ascii_lowercase(),
            "seed" => self.seed = parse_num(key, v)?,
            "self_correction" => self.self_correction = parse_bool(key, v)?,
            "regression_trigger_fraction" => self.regression_trigger_fraction = parse_num(key, v)?,
            "token_budget" => self.token_budget = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "embedder" => self.embedder = v.to_ascii_lowercase(),
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "embed_ngram" => self.embed_ngram = parse_num(key, v)?,
            "include_description" => self.include_description = parse_bool(key, v)?,
            "embed_endpoint" => self.embed_endpoint = v.into(),
            "embed_model" => self.embed_model = v.into(),
            "embed_key_env" => self.embed_key_env = v.into(),
            "embed_response_path" => self.embed_response_path = v.into(),
            "backend" => self.backend = v.to_ascii_lowercase(),
            "noise_p" => self.noise_p = parse_num(key, v)?,
            "scripted_responses" => self.scripted_responses = optional_path(v),
            "llm_endpoint" => self.llm_endpoint = v.into(),
            "llm_model" => self.llm_model = v.into(),
            "llm_key_env" => self.llm_key_env = v.into(),
            "llm_response_path" => self.llm_response_path = v.into(),
            "temperature" => self.temperature = if v.is_empty() { None } else { Some(parse_num(key, v)?) },
            "timeout_secs" => self.timeout_secs = parse_num(key, v)?,
            "max_in_flight" => self.max_in_flight = parse_num(key, v)?,
            "audit_log" => self.audit_log = parse_bool(key, v)?,
            "ablate_k" => self.ablate_k = v.split(',').map(|x| parse_num(key, x.trim())).collect::<Result<_>>()?,
            "ablate_embedders" => self.ablate_embedders = v.split(',').map(|x| x.trim().to_string()).collect(),
            k if k.contains("api_key") || k == "key" => {
                return Err(Error::Config(format!(
                    "{k}: secrets are read only from the environment variable named by *_key_env"
                )))
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value)?;
        }
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.valid_predictions);
        fix(&mut self.database_dir);
        fix(&mut self.output_dir);
        if let Some(p) = self.test_predictions.as_mut() {
            fix(p);
        }
        if let Some(p) = self.scripted_responses.as_mut() {
            fix(p);
        }
    }

    pub fn predictions_path(&self, split: Split) -> Result<&Path> {
        match split {
            Split::Valid => Ok(&self.valid_predictions),
            Split::Test => self
                .test_predictions
                .as_deref()
                .ok_or_else(|| Error::Config("test_predictions is not configured".into())),
            Split::Train => Err(Error::Config("the train split has no model predictions".into())),
        }
    }

    pub fn retrieval_strategy(&self) -> Result<RetrievalStrategy> {
        match self.strategy.as_str() {
            "topk" => Ok(RetrievalStrategy::TopK),
            "jump" => Ok(RetrievalStrategy::Jump),
            "random" => Ok(RetrievalStrategy::Random { seed: self.seed }),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            k: self.k,
            strategy: self.retrieval_strategy()?,
            self_correction: self.self_correction,
            regression_trigger_fraction: self.regression_trigger_fraction,
            token_budget: self.token_budget,
            seed: self.seed,
            jobs: self.jobs.max(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn embedder_config(&self) -> Result<EmbedderConfig> {
        let cfg = match self.embedder.as_str() {
            "local-hash" | "local" => EmbedderConfig::LocalHash {
                dim: self.embed_dim,
                ngram: self.embed_ngram,
            },
            "remote" => {
                let mut r = RemoteEmbedderConfig::new(&self.embed_endpoint, &self.embed_model, &self.embed_key_env);
                r.response_path = self.embed_response_path.clone();
                r.max_in_flight = self.max_in_flight;
                r.timeout = Duration::from_secs(self.timeout_secs);
                EmbedderConfig::RemoteHttp(r)
            }
            other => return Err(Error::Config(format!("unknown embedder {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Embedder variants for the embedder ablation, written
    /// `local-hash:<dim>:<ngram>` or `remote:<model>`.
    pub fn ablation_embedders(&self) -> Result<Vec<EmbedderConfig>> {
        self.ablate_embedders
            .iter()
            .map(|spec| {
                let parts: Vec<&str> = spec.split(':').collect();
                let cfg = match parts.as_slice() {
                    ["local-hash", dim] => EmbedderConfig::LocalHash {
                        dim: parse_num("ablate_embedders", dim)?,
                        ngram: self.embed_ngram,
                    },
                    ["local-hash", dim, ngram] => EmbedderConfig::LocalHash {
                        dim: parse_num("ablate_embedders", dim)?,
                        ngram: parse_num("ablate_embedders", ngram)?,
                    },
                    ["remote", model] => {
                        let mut r = RemoteEmbedderConfig::new(&self.embed_endpoint, *model, &self.embed_key_env);
                        r.response_path = self.embed_response_path.clone();
                        r.max_in_flight = self.max_in_flight;
                        r.timeout = Duration::from_secs(self.timeout_secs);
                        EmbedderConfig::RemoteHttp(r)
                    }
                    _ => return Err(Error::Config(format!("bad embedder variant {spec:?}"))),
                };
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn llm_config(&self) -> Result<LlmBackendConfig> {
        let cfg = match self.backend.as_str() {
            "echo" => LlmBackendConfig::MockEcho,
            "oracle" | "perfect-oracle" => LlmBackendConfig::MockPerfectOracle,
            "noisy-oracle" => LlmBackendConfig::MockNoisyOracle {
                p: self.noise_p,
                seed: self.seed,
            },
            "scripted" => {
                let path = self
                    .scripted_responses
                    .as_ref()
                    .ok_or_else(|| Error::Config("scripted backend needs scripted_responses".into()))?;
                load_scripted(path)?
            }
            "remote" => {
                if self.llm_endpoint.is_empty() || self.llm_model.is_empty() {
                    return Err(Error::Config("remote backend needs llm_endpoint and llm_model".into()));
                }
                let mut r = RemoteChatConfig::new(&self.llm_endpoint, &self.llm_model, &self.llm_key_env);
                r.temperature = self.temperature;
                r.response_path = self.llm_response_path.clone();
                r.timeout = Duration::from_secs(self.timeout_secs);
                r.max_in_flight = self.max_in_flight;
                LlmBackendConfig::RemoteChat(r)
            }
            other => return Err(Error::Config(format!("unknown backend {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scripted responses file: JSON lines `{"key": <fingerprint or id>,
/// "response": <text>}`; the key `*` sets the default response.
fn load_scripted(path: &Path) -> Result<LlmBackendConfig> {
    #[derive(serde::Deserialize)]
    struct Line {
        key: String,
        response: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut responses = HashMap::new();
    let mut default = None;
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line: Line = serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if line.key == "*" {
            default = Some(line.response);
        } else {
            responses.insert(line.key, line.response);
        }
    }
    Ok(LlmBackendConfig::MockScripted { responses, default })
}
