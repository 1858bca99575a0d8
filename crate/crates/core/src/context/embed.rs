//! Sentence embedding providers.
//!
//! Two implementations sit behind [`EmbeddingProvider`]: a remote
//! OpenAI-compatible `/v1/embeddings` endpoint, and an offline hashing
//! provider that needs no model and is fully deterministic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding provider returned a malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, used as part of the memo key.
    fn id(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub model: String,
    pub dim: usize,
    pub base_url: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Hashing,
            model: "all-MiniLM-L6-v2".into(),
            dim: 256,
            base_url: None,
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Character-trigram hashing embedder.
///
/// Text is lowercased, every non-alphanumeric run becomes a single space and
/// the result is padded with one space on each side. Each character trigram
/// is hashed with 64-bit FNV-1a into `dim` buckets; the count vector is then
/// L2-normalized. If nothing alphanumeric remains, the padded lowercase text
/// is used as is.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    fn padded(text: &str) -> Vec<char> {
        let lower = text.to_lowercase();
        let cleaned: String = lower
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect();
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        let core = if words.is_empty() { lower } else { words.join(" ") };
        format!(" {core} ").chars().collect()
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-trigram-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let chars = Self::padded(text);
        let mut values = vec![0.0f64; self.dim];
        let mut buf = [0u8; 12];
        for gram in chars.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a(&buf[..len]) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingVector::new(values))
    }
}

/// Remote embeddings over the OpenAI-compatible wire shape:
/// `POST {base_url}/v1/embeddings` with `{model, input: [text]}`.
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}@{}", self.model, self.base_url)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut req = self
            .client
            .post(format!("{}/v1/embeddings", self.base_url))
            .json(&EmbeddingRequest {
                model: &self.model,
                input: [text],
            });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "status {}",
                resp.status().as_u16()
            )));
        }
        let body: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
        let first = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::MalformedResponse("empty data array".into()))?;
        if first.embedding.is_empty() {
            return Err(EmbedError::MalformedResponse("empty embedding".into()));
        }
        Ok(EmbeddingVector::new(first.embedding))
    }
}

/// Memoizes a provider per text. Two threads racing on the same key may both
/// compute it; providers are deterministic so either result is fine.
pub struct CachedEmbedder {
    inner: Box<dyn EmbeddingProvider>,
    memo: Mutex<HashMap<String, Arc<EmbeddingVector>>>,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn embed_shared(&self, text: &str) -> Result<Arc<EmbeddingVector>, EmbedError> {
        if let Some(hit) = self.memo.lock().expect("memo lock").get(text) {
            return Ok(Arc::clone(hit));
        }
        let v = Arc::new(self.inner.embed(text)?);
        self.memo
            .lock()
            .expect("memo lock")
            .insert(text.to_string(), Arc::clone(&v));
        Ok(v)
    }

    pub fn cached_len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed_shared(text).map(|v| (*v).clone())
    }
}

pub fn provider_from_config(
    cfg: &EmbeddingConfig,
    api_key: Option<String>,
    timeout: Duration,
) -> Result<Box<dyn EmbeddingProvider>, EmbedError> {
    match cfg.provider {
        ProviderKind::Hashing => Ok(Box::new(HashingEmbedder::new(cfg.dim.max(1)))),
        ProviderKind::Remote => {
            let base = cfg.base_url.as_deref().ok_or_else(|| {
                EmbedError::ProviderUnavailable("remote embedding provider needs a base_url".into())
            })?;
            Ok(Box::new(RemoteEmbedder::new(base, &cfg.model, api_key, timeout)))
        }
    }
}
