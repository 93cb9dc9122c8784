//! Mock classification service speaking the wire protocol over HTTP, backed
//! by the synthetic lexicon model. Latency and failures are injectable, and
//! an optional server-side log records what a malicious provider would see.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener as StdListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use veil_core::backend::{ModelBackend, SyntheticConfig, SyntheticLexiconModel};
use veil_core::{WireRequest, WireResponse};

use crate::adversary::TraceEntry;
use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub model: SyntheticConfig,
    pub latency_mean_ms: f64,
    pub latency_jitter_ms: f64,
    /// Probability in `[0, 1]` that a request is answered with a 503.
    pub failure_rate: f64,
    pub max_payload_bytes: usize,
    /// Keep an in-memory adversary trace.
    pub adversary_log: bool,
    /// Also append the trace as JSONL to this file.
    pub adversary_log_path: Option<PathBuf>,
    /// Seed for latency and failure injection only; responses never depend on it.
    pub chaos_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            model: SyntheticConfig::default(),
            latency_mean_ms: 0.0,
            latency_jitter_ms: 0.0,
            failure_rate: 0.0,
            max_payload_bytes: 4 << 20,
            adversary_log: false,
            adversary_log_path: None,
            chaos_seed: 0,
        }
    }
}

impl ServiceConfig {
    fn validate(&self) -> Result<(), ServiceError> {
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(ServiceError::Config(format!("failure_rate {} outside [0, 1]", self.failure_rate)));
        }
        if !(self.latency_mean_ms >= 0.0 && self.latency_jitter_ms >= 0.0) {
            return Err(ServiceError::Config("latency must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_seed: u64,
    pub model_fingerprint: String,
}

struct TraceLog {
    entries: Vec<TraceEntry>,
    sink: Option<BufWriter<File>>,
}

struct AppState {
    model: SyntheticLexiconModel,
    config: ServiceConfig,
    chaos: Mutex<ChaCha20Rng>,
    arrivals: AtomicU64,
    log: Option<Mutex<TraceLog>>,
}

impl AppState {
    /// Latency to inject and whether to fail, drawn together under one lock.
    fn chaos(&self) -> (Duration, bool) {
        let mut rng = self.chaos.lock().expect("chaos rng poisoned");
        let c = &self.config;
        let jitter = if c.latency_jitter_ms > 0.0 {
            rng.random_range(-c.latency_jitter_ms..=c.latency_jitter_ms)
        } else {
            0.0
        };
        let ms = (c.latency_mean_ms + jitter).max(0.0);
        let fail = c.failure_rate > 0.0 && rng.random_bool(c.failure_rate);
        (Duration::from_secs_f64(ms / 1000.0), fail)
    }

    fn record(&self, entry: TraceEntry) {
        let Some(log) = &self.log else { return };
        let mut log = log.lock().expect("trace log poisoned");
        if let Some(sink) = log.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("trace entry serializes");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::warn!("adversary log write failed: {e}");
            }
        }
        log.entries.push(entry);
    }
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let seq = state.arrivals.fetch_add(1, Ordering::SeqCst);
    let (delay, fail) = state.chaos();
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    if fail {
        return (StatusCode::SERVICE_UNAVAILABLE, "unavailable").into_response();
    }
    let request: WireRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(_) => return (StatusCode::BAD_REQUEST, "malformed request").into_response(),
    };
    let dist = match state.model.classify(&request.payload) {
        Ok(d) => d,
        Err(_) => return (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable payload").into_response(),
    };
    let probs: Vec<f64> = dist.into();
    state.record(TraceEntry {
        seq,
        request_id: request.request_id,
        payload: request.payload,
        probs: probs.clone(),
    });
    Json(WireResponse {
        request_id: request.request_id,
        probs,
    })
    .into_response()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_seed: state.model.config().seed,
        model_fingerprint: state.model.fingerprint(),
    })
}

fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_payload_bytes;
    Router::new()
        .route("/classify", post(classify))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// A running service. Dropping the handle shuts the service down.
pub struct ServiceHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn classify_url(&self) -> String {
        format!("{}/classify", self.base_url())
    }

    pub fn model(&self) -> &SyntheticLexiconModel {
        &self.state.model
    }

    /// Everything the service has observed, in arrival order.
    pub fn adversary_log(&self) -> Result<Vec<TraceEntry>, ServiceError> {
        let log = self.state.log.as_ref().ok_or(ServiceError::LogDisabled)?;
        let mut entries = log.lock().expect("trace log poisoned").entries.clone();
        entries.sort_by_key(|e| e.seq);
        Ok(entries)
    }

    /// Blocks until the service stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and starts the service on a background runtime.
pub fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    config.validate()?;
    let model = SyntheticLexiconModel::new(config.model.clone())?;
    let log = if config.adversary_log || config.adversary_log_path.is_some() {
        let sink = match &config.adversary_log_path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Some(Mutex::new(TraceLog {
            entries: Vec::new(),
            sink,
        }))
    } else {
        None
    };
    let listener = StdListener::bind(config.bind).map_err(ServiceError::Bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let state = Arc::new(AppState {
        model,
        chaos: Mutex::new(ChaCha20Rng::seed_from_u64(config.chaos_seed)),
        config,
        arrivals: AtomicU64::new(0),
        log,
    });

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = std::thread::Builder::new()
        .name("mock-lmaas".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("listener conversion failed: {e}");
                        return;
                    }
                };
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    tracing::error!("service stopped: {e}");
                }
            });
        })?;
    Ok(ServiceHandle {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
