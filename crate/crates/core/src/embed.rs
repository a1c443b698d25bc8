//! Text embeddings for molecules and cosine similarity.
//!
//! Two interchangeable backends sit behind [`Embedder`]: a remote HTTP
//! embedding service and a local signed feature-hashing embedder over byte
//! n-grams that needs no network and is bit-for-bit reproducible.

use std::time::Duration;

use serde_json::json;

use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::http::{self, JsonClient, RetryPolicy};
use crate::ingest::MoleculeRecord;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }

    /// Rounds every component through binary32, the on-disk precision.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&x| f64::from(x as f32)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub key_env: String,
    pub response_path: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RemoteEmbedderConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, key_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            key_env: key_env.into(),
            response_path: "data[*].embedding".into(),
            batch_size: 64,
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderConfig {
    RemoteHttp(RemoteEmbedderConfig),
    LocalHash { dim: usize, ngram: usize },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::LocalHash {
            dim: DEFAULT_DIM,
            ngram: DEFAULT_NGRAM,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            EmbedderConfig::LocalHash { dim, ngram } => {
                if *dim < 8 {
                    return Err(Error::Config(format!("embedding dim {dim} < 8")));
                }
                if *ngram < 1 {
                    return Err(Error::Config("ngram must be at least 1".into()));
                }
            }
            EmbedderConfig::RemoteHttp(r) => {
                if r.endpoint.is_empty() || r.model.is_empty() {
                    return Err(Error::Config("remote embedder needs endpoint and model".into()));
                }
            }
        }
        Ok(())
    }

    /// Identifies the backend for compatibility checks between a stored
    /// database and the current configuration.
    pub fn backend_id(&self) -> String {
        match self {
            EmbedderConfig::LocalHash { ngram, .. } => format!("local-hash/ngram={ngram}"),
            EmbedderConfig::RemoteHttp(r) => format!("remote/{}", r.model),
        }
    }

    /// Output dimension, when known without calling the backend.
    pub fn known_dim(&self) -> Option<usize> {
        match self {
            EmbedderConfig::LocalHash { dim, .. } => Some(*dim),
            EmbedderConfig::RemoteHttp(_) => None,
        }
    }
}

/// Signed feature hashing over lowercased byte n-grams, L2-normalized.
pub fn local_hash_embedding(text: &str, dim: usize, ngram: usize) -> EmbeddingVector {
    let mut v = vec![0.0f64; dim];
    let bytes = text.as_bytes().to_ascii_lowercase();
    if bytes.is_empty() || dim == 0 {
        return EmbeddingVector::new(v);
    }
    let n = ngram.max(1);
    let grams: Box<dyn Iterator<Item = &[u8]>> = if bytes.len() < n {
        Box::new(std::iter::once(bytes.as_slice()))
    } else {
        Box::new(bytes.windows(n))
    };
    for gram in grams {
        let h = fnv1a64(gram);
        let bucket = (h % dim as u64) as usize;
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Opposite-signed collisions can cancel everything out.
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector::new(v)
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    // sqrt(na * nb) (a single rounding) keeps the result symmetric in a and b.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Text embedded for a molecule: the SMILES, plus the description on a new
/// line when requested and present.
pub fn molecule_text(record: &MoleculeRecord, include_description: bool) -> String {
    match record.description() {
        Some(d) if include_description => format!("{}\n{}", record.smiles, d),
        _ => record.smiles.clone(),
    }
}

#[derive(Debug)]
pub struct Embedder {
    config: EmbedderConfig,
    remote: Option<JsonClient>,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let remote = match &config {
            EmbedderConfig::RemoteHttp(r) => Some(JsonClient::new(r.timeout, r.retry.clone(), r.max_in_flight)?),
            EmbedderConfig::LocalHash { .. } => None,
        };
        Ok(Self { config, remote })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.pop().expect("one vector per input"))
    }

    pub fn embed_molecule(&self, record: &MoleculeRecord, include_description: bool) -> Result<EmbeddingVector> {
        self.embed_text(&molecule_text(record, include_description))
    }

    /// Embeds many texts; output is aligned with the input order.
    pub fn embed_batch<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>> {
        match (&self.config, &self.remote) {
            (EmbedderConfig::LocalHash { dim, ngram }, _) => Ok(texts
                .iter()
                .map(|t| local_hash_embedding(t.as_ref(), *dim, *ngram))
                .collect()),
            (EmbedderConfig::RemoteHttp(cfg), Some(client)) => remote_batch(cfg, client, texts),
            (EmbedderConfig::RemoteHttp(_), None) => unreachable!("remote client built in new()"),
        }
    }
}

fn remote_batch<S: AsRef<str> + Sync>(
    cfg: &RemoteEmbedderConfig,
    client: &JsonClient,
    texts: &[S],
) -> Result<Vec<EmbeddingVector>> {
    use rayon::prelude::*;

    let key = std::env::var(&cfg.key_env).map_err(|_| Error::MissingKey(cfg.key_env.clone()))?;
    let chunks: Vec<&[S]> = texts.chunks(cfg.batch_size.max(1)).collect();
    // Completion order is irrelevant: par_iter().collect() keeps chunk order.
    let results: Vec<Result<Vec<EmbeddingVector>>> = chunks
        .par_iter()
        .map(|chunk| {
            let input: Vec<&str> = chunk.iter().map(|s| s.as_ref()).collect();
            let body = json!({ "model": cfg.model, "input": input });
            let resp = client.post(&cfg.endpoint, Some(&key), &body)?;
            let arrays = http::select(&resp.body, &cfg.response_path)?;
            if arrays.len() != chunk.len() {
                return Err(Error::MalformedBody(format!(
                    "expected {} embeddings, got {}",
                    chunk.len(),
                    arrays.len()
                )));
            }
            arrays
                .into_iter()
                .map(|a| {
                    let values = a
                        .as_array()
                        .ok_or_else(|| Error::MalformedBody("embedding is not an array".into()))?
                        .iter()
                        .map(|x| {
                            x.as_f64()
                                .ok_or_else(|| Error::MalformedBody("non-numeric embedding value".into()))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(EmbeddingVector::new(values))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(texts.len());
    for r in results {
        out.extend(r?);
    }
    if let Some(first) = out.first() {
        let dim = first.dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimMismatch {
                left: dim,
                right: bad.dim(),
            });
        }
    }
    Ok(out)
}
