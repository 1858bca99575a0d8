use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, BackendError, HealthProblem, HealthReport, RawCompletion};

/// Counting semaphore bounding outstanding requests.
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ModelList {
    data: Vec<ModelEntry>,
}

#[derive(Deserialize)]
struct ModelEntry {
    id: String,
}

pub struct HttpBackend {
    cfg: BackendConfig,
    base_url: String,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let base_url = cfg
            .base_url
            .as_deref()
            .unwrap_or_default()
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout())
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            in_flight: InFlight::new(cfg.max_in_flight),
            cfg,
            base_url,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn send_once(&self, prompt: &str) -> Result<String, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut req = self
            .client
            .post(format!("{}/v1/chat/completions", self.base_url))
            .json(&ChatRequest {
                model: &self.cfg.model_id,
                messages: [ChatMessage {
                    role: "user",
                    content: prompt,
                }],
                temperature: self.cfg.temperature,
                max_tokens: self.cfg.max_output_tokens,
            });
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport_error)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::HttpStatus(status.as_u16()));
        }
        let body = resp.text().map_err(transport_error)?;
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))
    }
}

fn transport_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::BackendTimeout
    } else {
        BackendError::BackendUnreachable(e.to_string())
    }
}

impl Backend for HttpBackend {
    fn label(&self) -> String {
        self.cfg.model_id.clone()
    }

    fn complete_text(
        &self,
        _session_id: &str,
        item_id: &str,
        prompt: &str,
    ) -> Result<RawCompletion, BackendError> {
        let attempts = self.cfg.max_retries + 1;
        let mut attempt = 1;
        loop {
            let started = Instant::now();
            match self.send_once(prompt) {
                Ok(text) => {
                    return Ok(RawCompletion {
                        item_id: item_id.to_string(),
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt,
                    })
                }
                Err(e) if e.is_retryable() && attempt < attempts => {
                    thread::sleep(self.cfg.backoff_delay(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && attempts > 1 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn healthcheck(&self) -> HealthReport {
        let mut req = self.client.get(format!("{}/v1/models", self.base_url));
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return HealthReport::unhealthy(HealthProblem::BackendUnreachable(e.to_string())),
        };
        if !resp.status().is_success() {
            return HealthReport::unhealthy(HealthProblem::HttpStatus(resp.status().as_u16()));
        }
        let listing: ModelList = match resp.text().map_err(|e| e.to_string()).and_then(|b| {
            serde_json::from_str(&b).map_err(|e| e.to_string())
        }) {
            Ok(l) => l,
            Err(e) => return HealthReport::unhealthy(HealthProblem::MalformedListing(e)),
        };
        let models: Vec<String> = listing.data.into_iter().map(|m| m.id).collect();
        if models.contains(&self.cfg.model_id) {
            HealthReport::ok(models)
        } else {
            HealthReport {
                healthy: false,
                problem: Some(HealthProblem::ModelNotServed(self.cfg.model_id.clone())),
                models,
            }
        }
    }
}
