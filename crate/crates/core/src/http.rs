//! Blocking JSON-over-HTTP plumbing shared by the remote embedder and the
//! remote chat backend: retries with exponential backoff, a concurrency cap,
//! and a tiny path language for pulling values out of response bodies.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay slept after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1) as i32;
        self.base_delay.mul_f64(self.factor.powi(exp))
    }

    fn attempts(&self) -> u32 {
        self.max_attempts.clamp(1, 5)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit { sem: self }
    }
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.sem.freed.notify_one();
    }
}

pub struct JsonResponse {
    pub body: Value,
    pub attempts: u32,
    pub latency: Duration,
}

/// HTTP client with a fixed retry policy and in-flight cap.
#[derive(Debug)]
pub struct JsonClient {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    gate: Semaphore,
}

impl JsonClient {
    pub fn new(timeout: Duration, retry: RetryPolicy, max_in_flight: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            client,
            retry,
            gate: Semaphore::new(max_in_flight),
        })
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx.
    pub fn post(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<JsonResponse> {
        let _permit = self.gate.acquire();
        let start = Instant::now();
        let max = self.retry.attempts();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self.client.post(url).json(body);
            if let Some(key) = api_key {
                req = req.bearer_auth(key);
            }
            let err = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| Error::Transport(strip_url(e)))?;
                        let body = serde_json::from_str(&text).map_err(|e| Error::MalformedBody(e.to_string()))?;
                        return Ok(JsonResponse {
                            body,
                            attempts: attempt,
                            latency: start.elapsed(),
                        });
                    }
                    let body = resp.text().unwrap_or_default();
                    let err = Error::Status {
                        status: status.as_u16(),
                        body: truncate(&body, 200),
                    };
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => Error::Transport(strip_url(e)),
            };
            if attempt >= max {
                return Err(err);
            }
            log::warn!("request attempt {attempt} failed: {err}; retrying");
            std::thread::sleep(self.retry.delay(attempt));
        }
    }
}

fn strip_url(e: reqwest::Error) -> String {
    e.without_url().to_string()
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Key(String),
    Index(usize),
    All,
}

/// Parses paths such as `data[*].embedding` or `choices[0].message.content`.
fn parse_path(path: &str) -> Result<Vec<Step>> {
    let mut steps = Vec::new();
    for part in path.split('.').filter(|p| !p.is_empty()) {
        let (name, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if !name.is_empty() {
            steps.push(Step::Key(name.to_string()));
        }
        while let Some(stripped) = rest.strip_prefix('[') {
            let end = stripped
                .find(']')
                .ok_or_else(|| Error::Config(format!("unclosed '[' in path {path:?}")))?;
            let inner = &stripped[..end];
            steps.push(if inner == "*" {
                Step::All
            } else {
                Step::Index(
                    inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad index {inner:?} in path {path:?}")))?,
                )
            });
            rest = &stripped[end + 1..];
        }
    }
    Ok(steps)
}

/// Selects every value matched by `path`, in document order.
pub fn select<'a>(value: &'a Value, path: &str) -> Result<Vec<&'a Value>> {
    let mut current = vec![value];
    for step in parse_path(path)? {
        let mut next = Vec::new();
        for v in current {
            match &step {
                Step::Key(k) => next.extend(v.get(k)),
                Step::Index(i) => next.extend(v.get(*i)),
                Step::All => {
                    if let Some(items) = v.as_array() {
                        next.extend(items.iter());
                    }
                }
            }
        }
        current = next;
    }
    Ok(current)
}
