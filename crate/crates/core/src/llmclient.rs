//! LLM backends: a remote chat-completion endpoint and deterministic mocks.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, query_seed, SplitMix64};
use crate::http::{self, JsonClient, RetryPolicy};
use crate::ingest::TaskSpec;
use crate::parse::render_answer;
use crate::prompt::{PromptBundle, PromptKind};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub model: String,
    pub key_env: String,
    pub temperature: Option<f64>,
    pub response_path: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl RemoteChatConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, key_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            key_env: key_env.into(),
            temperature: None,
            response_path: "choices[0].message.content".into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LlmBackendConfig {
    RemoteChat(RemoteChatConfig),
    /// Answers with the primary prediction.
    MockEcho,
    /// Answers with the ground truth.
    MockPerfectOracle,
    /// Ground truth with probability `p`, otherwise the primary prediction.
    MockNoisyOracle {
        p: f64,
        seed: u64,
    },
    /// Fixed responses keyed by [`prompt_fingerprint`] or, failing that, by
    /// query id.
    MockScripted {
        responses: HashMap<String, String>,
        default: Option<String>,
    },
}

impl LlmBackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LlmBackendConfig::RemoteChat(_) => "remote",
            LlmBackendConfig::MockEcho => "echo",
            LlmBackendConfig::MockPerfectOracle => "oracle",
            LlmBackendConfig::MockNoisyOracle { .. } => "noisy-oracle",
            LlmBackendConfig::MockScripted { .. } => "scripted",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LlmBackendConfig::MockNoisyOracle { p, .. } = self {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("noisy oracle p={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// What the mocks may know about a query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMeta {
    pub id: String,
    pub task: TaskSpec,
    pub primary: Option<f64>,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmExchange {
    pub prompt: PromptBundle,
    pub response_text: String,
    pub latency: Duration,
    pub attempts: u32,
}

pub fn prompt_fingerprint(text: &str) -> String {
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

#[derive(Debug)]
pub struct LlmClient {
    config: LlmBackendConfig,
    http: Option<JsonClient>,
}

impl LlmClient {
    pub fn new(config: LlmBackendConfig) -> Result<Self> {
        config.validate()?;
        let http = match &config {
            LlmBackendConfig::RemoteChat(r) => Some(JsonClient::new(r.timeout, r.retry.clone(), r.max_in_flight)?),
            _ => None,
        };
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &LlmBackendConfig {
        &self.config
    }

    pub fn complete(&self, prompt: &PromptBundle, meta: &QueryMeta) -> Result<LlmExchange> {
        let start = Instant::now();
        let (response_text, attempts) = match &self.config {
            LlmBackendConfig::RemoteChat(cfg) => {
                let client = self.http.as_ref().expect("remote client built in new()");
                self.remote(cfg, client, prompt)?
            }
            LlmBackendConfig::MockEcho => (echo_answer(prompt.kind, meta)?, 1),
            LlmBackendConfig::MockPerfectOracle => (oracle_answer(prompt.kind, meta)?, 1),
            LlmBackendConfig::MockNoisyOracle { p, seed } => {
                let draw = SplitMix64::new(query_seed(*seed, &meta.id)).next_f64();
                let text = if draw < *p {
                    oracle_answer(prompt.kind, meta)?
                } else {
                    echo_answer(prompt.kind, meta)?
                };
                (text, 1)
            }
            LlmBackendConfig::MockScripted { responses, default } => {
                let fp = prompt_fingerprint(&prompt.text);
                let text = responses
                    .get(&fp)
                    .or_else(|| responses.get(&meta.id))
                    .or(default.as_ref())
                    .cloned()
                    .ok_or(Error::Unscripted(fp))?;
                (text, 1)
            }
        };
        Ok(LlmExchange {
            prompt: prompt.clone(),
            response_text,
            latency: start.elapsed(),
            attempts,
        })
    }

    fn remote(&self, cfg: &RemoteChatConfig, client: &JsonClient, prompt: &PromptBundle) -> Result<(String, u32)> {
        let key = std::env::var(&cfg.key_env).map_err(|_| Error::MissingKey(cfg.key_env.clone()))?;
        let body = json!({
            "model": cfg.model,
            "messages": [{ "role": "user", "content": prompt.text }],
            "temperature": cfg.temperature.unwrap_or(0.0),
        });
        let resp = client.post(&cfg.endpoint, Some(&key), &body)?;
        let text = http::select(&resp.body, &cfg.response_path)?
            .first()
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::MalformedBody(format!("no string at {}", cfg.response_path)))?;
        Ok((text, resp.attempts))
    }
}

fn echo_answer(kind: PromptKind, meta: &QueryMeta) -> Result<String> {
    let primary = meta
        .primary
        .ok_or_else(|| Error::Config(format!("echo backend needs a primary prediction for {:?}", meta.id)))?;
    let explanation = kind.wants_explanation().then_some("The model prediction is kept.");
    Ok(if meta.task.is_classification() {
        render_answer(meta.task, primary, Some(primary), explanation)
    } else {
        render_answer(meta.task, primary, None, explanation)
    })
}

fn oracle_answer(kind: PromptKind, meta: &QueryMeta) -> Result<String> {
    let truth = meta.truth.ok_or_else(|| Error::MissingTruth(meta.id.clone()))?;
    let explanation = kind.wants_explanation().then_some("Known ground truth.");
    Ok(if meta.task.is_classification() {
        render_answer(meta.task, truth, Some(truth), explanation)
    } else {
        render_answer(meta.task, truth, None, explanation)
    })
}

/// One line of the exchange audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRecord {
    pub id: String,
    pub prompt_kind: PromptKind,
    pub attempts: u32,
    pub latency_ms: u64,
    pub response_text: String,
    pub exclude_id: Option<String>,
    pub context_ids: Vec<String>,
}

impl AuditRecord {
    pub fn new(id: &str, exchange: &LlmExchange, exclude_id: Option<&str>) -> Self {
        Self {
            id: id.to_string(),
            prompt_kind: exchange.prompt.kind,
            attempts: exchange.attempts,
            latency_ms: exchange.latency.as_millis() as u64,
            response_text: exchange.response_text.clone(),
            exclude_id: exclude_id.map(str::to_string),
            context_ids: exchange.prompt.context_ids.clone(),
        }
    }
}

/// Append-only JSON-lines audit log.
pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn append(&self, records: &[AuditRecord]) -> std::io::Result<()> {
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        for r in records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptKind;

    fn prompt(kind: PromptKind) -> PromptBundle {
        PromptBundle {
            kind,
            text: "q".into(),
            token_estimate: 1,
            context_ids: vec![],
        }
    }

    fn meta(id: &str, task: TaskSpec, primary: f64, truth: f64) -> QueryMeta {
        QueryMeta {
            id: id.into(),
            task,
            primary: Some(primary),
            truth: Some(truth),
        }
    }

    #[test]
    fn echo_regression() {
        let c = LlmClient::new(LlmBackendConfig::MockEcho).unwrap();
        let x = c
            .complete(
                &prompt(PromptKind::Corrector),
                &meta("a", TaskSpec::regression(), 2.5, 0.0),
            )
            .unwrap();
        assert!(x.response_text.contains("Prediction: 2.5000"));
        assert_eq!(x.attempts, 1);
    }

    #[test]
    fn oracle_classification() {
        let c = LlmClient::new(LlmBackendConfig::MockPerfectOracle).unwrap();
        let x = c
            .complete(
                &prompt(PromptKind::Corrector),
                &meta("a", TaskSpec::classification(), 0.2, 1.0),
            )
            .unwrap();
        assert!(x.response_text.contains("Prediction: 1"));
        assert!(x.response_text.contains("Probability: 1.0000"));
    }

    #[test]
    fn noisy_zero_is_echo() {
        let echo = LlmClient::new(LlmBackendConfig::MockEcho).unwrap();
        let noisy = LlmClient::new(LlmBackendConfig::MockNoisyOracle { p: 0.0, seed: 9 }).unwrap();
        for i in 0..50 {
            let m = meta(&format!("m{i}"), TaskSpec::regression(), i as f64 * 0.37, -1.0);
            let p = prompt(PromptKind::Corrector);
            assert_eq!(
                echo.complete(&p, &m).unwrap().response_text,
                noisy.complete(&p, &m).unwrap().response_text
            );
        }
        assert!(LlmClient::new(LlmBackendConfig::MockNoisyOracle { p: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn noisy_rate_matches_p() {
        let p = 0.3;
        let noisy = LlmClient::new(LlmBackendConfig::MockNoisyOracle { p, seed: 2024 }).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|i| {
                let m = meta(&format!("q{i}"), TaskSpec::regression(), 1.0, 2.0);
                noisy
                    .complete(&prompt(PromptKind::Corrector), &m)
                    .unwrap()
                    .response_text
                    .starts_with("Prediction: 2.0000")
            })
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - p).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn scripted_lookup() {
        let p = prompt(PromptKind::Ip);
        let mut responses = HashMap::new();
        responses.insert(prompt_fingerprint("q"), "Prediction: 1".to_string());
        let c = LlmClient::new(LlmBackendConfig::MockScripted {
            responses,
            default: None,
        })
        .unwrap();
        let m = meta("a", TaskSpec::classification(), 0.5, 1.0);
        assert_eq!(c.complete(&p, &m).unwrap().response_text, "Prediction: 1");
        let other = PromptBundle {
            text: "other".into(),
            ..p
        };
        assert!(matches!(c.complete(&other, &m), Err(Error::Unscripted(_))));
    }

    #[test]
    fn oracle_needs_truth() {
        let c = LlmClient::new(LlmBackendConfig::MockPerfectOracle).unwrap();
        let mut m = meta("a", TaskSpec::regression(), 1.0, 1.0);
        m.truth = None;
        assert!(matches!(
            c.complete(&prompt(PromptKind::Ip), &m),
            Err(Error::MissingTruth(_))
        ));
    }
}
