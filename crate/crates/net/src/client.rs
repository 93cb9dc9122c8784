//! Black-box remote classifier speaking the JSON wire protocol.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use veil_core::backend::{ModelBackend, SEPARATOR_TOKEN};
use veil_core::{DecisionDistribution, Error, LabelSet, Payload, RequestId, Result, WireRequest, WireResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the classify endpoint.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub in_flight_cap: usize,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
    /// Sent as a bearer token when present.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/classify".into(),
            timeout_ms: 10_000,
            max_retries: 3,
            in_flight_cap: 16,
            backoff_ms: 20,
            api_key: None,
        }
    }
}

/// Counting gate bounding concurrent requests.
struct Gate {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("gate poisoned");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("gate poisoned");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("gate poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

pub struct RemoteBackend {
    config: RemoteConfig,
    labels: LabelSet,
    max_sequence_length: usize,
    separator: String,
    client: Client,
    gate: Gate,
}

impl RemoteBackend {
    /// The label set and input limits are properties of the hosted task and
    /// must be supplied by the caller.
    pub fn new(config: RemoteConfig, labels: LabelSet, max_sequence_length: usize) -> Result<Self> {
        if config.in_flight_cap == 0 {
            return Err(Error::Parameter("in_flight_cap must be positive".into()));
        }
        if config.timeout_ms == 0 {
            return Err(Error::Parameter("timeout_ms must be positive".into()));
        }
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .pool_max_idle_per_host(config.in_flight_cap)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            gate: Gate {
                cap: config.in_flight_cap,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            labels,
            max_sequence_length,
            separator: SEPARATOR_TOKEN.to_owned(),
            client,
        })
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, request: &WireRequest) -> std::result::Result<DecisionDistribution, Attempt> {
        let mut builder = self.client.post(&self.config.endpoint).json(request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Retry(format!("service answered {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Protocol(format!("service rejected request: {status}"))));
        }
        let body = response.bytes().map_err(|e| Attempt::Retry(e.to_string()))?;
        let wire: WireResponse = serde_json::from_slice(&body)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response: {e}"))))?;
        wire.into_distribution(request.request_id, self.labels.len())
            .map_err(Attempt::Fatal)
    }
}

impl ModelBackend for RemoteBackend {
    fn label_set(&self) -> &LabelSet {
        &self.labels
    }

    fn max_sequence_length(&self) -> usize {
        self.max_sequence_length
    }

    fn separator(&self) -> &str {
        &self.separator
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    fn classify(&self, payload: &Payload) -> Result<DecisionDistribution> {
        let request = WireRequest {
            request_id: RequestId::random(&mut rand::rng()),
            payload: payload.clone(),
        };
        self.classify_request(&request)
    }

    fn classify_request(&self, request: &WireRequest) -> Result<DecisionDistribution> {
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(request) {
                Ok(d) => return Ok(d),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(attempt, "retrying request: {msg}");
                    last = msg;
                }
            }
        }
        Err(Error::Transport(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}
