//! Deterministic HTTP stand-in for a vision-language scoring endpoint.
//!
//! Accepts `POST /` (any path) with a JSON body
//! `{"model", "images": [{"role", "data"}], "text", "candidates" | "generate": true}`
//! and answers `{"candidate_token_logprobs": [[..], ..]}` or `{"text": ".."}`.
//! Token log-probabilities are a hash of the request text, the decoded image
//! bytes and the candidate, so the same request always gets the same answer.
//! Each candidate is split on whitespace and scored per token.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

#[derive(Debug, Clone, Deserialize)]
struct Image {
    role: String,
    data: String,
}

#[derive(Debug, Clone, Deserialize)]
struct Request {
    model: String,
    images: Vec<Image>,
    text: String,
    #[serde(default)]
    candidates: Option<Vec<String>>,
    #[serde(default)]
    generate: Option<bool>,
}

#[derive(Debug, Serialize)]
struct Reply {
    #[serde(skip_serializing_if = "Option::is_none")]
    candidate_token_logprobs: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scoring {
    /// Hash-derived per-token log-probabilities.
    Hash,
    /// The same lists for every request, regardless of candidates.
    Fixed(Vec<Vec<f64>>),
    /// Malformed but well-typed answer: one list fewer than asked for.
    ShortList,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub scoring: Scoring,
    /// Requests answered with 503 before normal service starts.
    pub fail_first: usize,
    /// Status used for the injected failures.
    pub fail_status: u16,
    /// Sleep before every answer.
    pub delay: Duration,
    /// Generation text for `generate` requests; `None` picks a candidate-free
    /// hash word from {"yes", "no"}.
    pub generation: Option<String>,
    /// Required bearer token, if any.
    pub token: Option<String>,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self { scoring: Scoring::Hash, fail_first: 0, fail_status: 503, delay: Duration::ZERO, generation: None, token: None }
    }
}

struct Shared {
    config: StubConfig,
    requests: AtomicUsize,
}

/// Running server; stops when dropped.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `127.0.0.1` on an ephemeral port.
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("literal address"), config)
    }

    pub fn bind(addr: SocketAddr, config: StubConfig) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared { config, requests: AtomicUsize::new(0) });
        let app = Router::new().fallback(handle).with_state(Arc::clone(&shared));
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self { addr, shared, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/score", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests received so far, including injected failures.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server stops (used by the binary).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn word(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn request_key(req: &Request, images: &[Vec<u8>]) -> Vec<u8> {
    let mut key = Vec::new();
    key.extend_from_slice(req.model.as_bytes());
    key.push(0);
    key.extend_from_slice(req.text.as_bytes());
    for (img, bytes) in req.images.iter().zip(images) {
        key.push(0);
        key.extend_from_slice(img.role.as_bytes());
        key.push(0);
        key.extend_from_slice(&Sha256::digest(bytes));
    }
    key
}

/// Per-token log-probabilities in [-2.01, -0.01).
pub fn hash_logprobs(key: &[u8], candidate: &str) -> Vec<f64> {
    let tokens: Vec<&str> = candidate.split_whitespace().collect();
    let tokens = if tokens.is_empty() { vec![candidate] } else { tokens };
    tokens
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mut k = key.to_vec();
            k.push(1);
            k.extend_from_slice(t.as_bytes());
            k.extend_from_slice(&(j as u64).to_be_bytes());
            -0.01 - 2.0 * (word(&k) as f64 / u64::MAX as f64)
        })
        .collect()
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, msg.to_string()).into_response()
}

async fn handle(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: String) -> Response {
    let n = shared.requests.fetch_add(1, Ordering::SeqCst);
    let cfg = &shared.config;
    if !cfg.delay.is_zero() {
        tokio::time::sleep(cfg.delay).await;
    }
    if n < cfg.fail_first {
        return error(StatusCode::from_u16(cfg.fail_status).unwrap_or(StatusCode::SERVICE_UNAVAILABLE), "injected failure");
    }
    if let Some(token) = &cfg.token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "bad token");
        }
    }
    let req: Request = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &format!("invalid request: {e}")),
    };
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut images = Vec::with_capacity(req.images.len());
    for img in &req.images {
        match b64.decode(&img.data) {
            Ok(bytes) => images.push(bytes),
            Err(_) => return error(StatusCode::BAD_REQUEST, "image data is not base64"),
        }
    }
    if images.is_empty() || req.images[0].role != "query" {
        return error(StatusCode::BAD_REQUEST, "first image must be the query");
    }
    let key = request_key(&req, &images);
    let reply = match (req.generate, &req.candidates) {
        (Some(true), _) => {
            let text = cfg.generation.clone().unwrap_or_else(|| if word(&key) % 2 == 0 { "Yes.".into() } else { "No.".into() });
            Reply { candidate_token_logprobs: None, text: Some(text) }
        }
        (_, Some(cands)) if !cands.is_empty() => {
            let lists = match &cfg.scoring {
                Scoring::Hash => cands.iter().map(|c| hash_logprobs(&key, c)).collect(),
                Scoring::Fixed(lists) => lists.clone(),
                Scoring::ShortList => cands.iter().skip(1).map(|c| hash_logprobs(&key, c)).collect(),
            };
            Reply { candidate_token_logprobs: Some(lists), text: None }
        }
        _ => return error(StatusCode::BAD_REQUEST, "need a non-empty `candidates` list or `generate: true`"),
    };
    let json = serde_json::to_string(&reply).expect("reply serializes");
    (StatusCode::OK, [("content-type", "application/json")], json).into_response()
}
