//! Deterministic mock model services.
//!
//! Replies are pure functions of the request and the fixture set. A fixture
//! directory may contain any of:
//!
//! - `captions.json`: frame id → `{"text", "confidence"}`
//! - `dense_captions.json`: frame id → `[{"text", "confidence", "box"}]`
//! - `tags.json`: frame id → `[{"label", "confidence"}]`
//! - `completions.json`: `{"rules": [...], "default": {...}}`; the first rule
//!   whose `prompt_sha256` and every `contains` substring match wins
//! - `encoder.json`: `{"mode": "echo", "cls_tokens": 1}`
//!
//! Frame ids are `<video_id>/<file stem>`; the key `"*"` matches any frame.
//! In place of a value, `{"fault": "unavailable" | "rate_limited" | "malformed"}`
//! injects an error. Successful replies are cached by idempotency key, so a
//! retried request never produces a second side effect.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;
use vidinstruct_core::adapter::FrameEmbeddingTensor;
use vidinstruct_core::keyframe::FrameBatch;
use vidinstruct_core::services::{EncoderConfig, FinishReason, FrameEncoder, ServiceError, ServiceResult};

use crate::client::idempotency_key;
use crate::protocol::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Unavailable,
    RateLimited,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry<T> {
    Fault { fault: FaultKind },
    Value(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(flatten)]
    pub reply: CompletionReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReply {
    #[serde(default)]
    pub reply: String,
    #[serde(default = "complete")]
    pub finish_reason: FinishReason,
    /// Answer the first `n` attempts of each distinct request with 429.
    #[serde(default)]
    pub rate_limit_first: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultKind>,
}

fn complete() -> FinishReason {
    FinishReason::Complete
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionFixtures {
    #[serde(default)]
    pub rules: Vec<CompletionRule>,
    #[serde(default)]
    pub default: Option<CompletionReply>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Every patch token of frame `i` is filled with `i`; class tokens with `-1`.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFixture {
    pub mode: EncoderMode,
    #[serde(default = "one")]
    pub cls_tokens: usize,
    /// Reply with this width instead of the requested one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim_override: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for EncoderFixture {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Echo,
            cls_tokens: 1,
            embed_dim_override: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockFixtures {
    pub captions: BTreeMap<String, Entry<CaptionResponse>>,
    pub dense_captions: BTreeMap<String, Entry<Vec<WireRegion>>>,
    pub tags: BTreeMap<String, Entry<Vec<WireTag>>>,
    pub completions: CompletionFixtures,
    pub encoder: EncoderFixture,
}

fn read_optional<T: DeserializeOwned + Default>(dir: &Path, name: &str) -> std::io::Result<T> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(T::default());
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
    })
}

impl MockFixtures {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        if !dir.is_dir() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("fixture directory {} does not exist", dir.display()),
            ));
        }
        Ok(Self {
            captions: read_optional(dir, "captions.json")?,
            dense_captions: read_optional(dir, "dense_captions.json")?,
            tags: read_optional(dir, "tags.json")?,
            completions: read_optional(dir, "completions.json")?,
            encoder: read_optional(dir, "encoder.json")?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    /// Requests received per route, retries included.
    pub requests: BTreeMap<String, u64>,
    /// Distinct requests processed per route.
    pub side_effects: BTreeMap<String, u64>,
    /// Requests answered from the idempotency cache.
    pub replays: u64,
    /// Idempotency keys processed more than once; always 0 unless the cache is broken.
    pub duplicate_side_effects: u64,
}

#[derive(Default)]
struct MockState {
    stats: MockStats,
    done: HashMap<String, String>,
    attempts: HashMap<String, u32>,
}

struct Shared {
    fixtures: MockFixtures,
    state: Mutex<MockState>,
}

type Reply = (StatusCode, String);

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Reply {
    let body = ErrorBody {
        code: code.into(),
        message: message.into(),
    };
    (status, serde_json::to_string(&body).expect("error body serializes"))
}

fn fault_reply(kind: FaultKind) -> Reply {
    match kind {
        FaultKind::Unavailable => error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "injected outage"),
        FaultKind::RateLimited => error(StatusCode::TOO_MANY_REQUESTS, "rate_limited", "injected rate limit"),
        FaultKind::Malformed => (StatusCode::OK, "{\"not\": \"what you asked for\"".into()),
    }
}

fn ok<T: Serialize>(value: &T) -> Reply {
    (StatusCode::OK, serde_json::to_string(value).expect("reply serializes"))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

fn lookup<'a, T>(table: &'a BTreeMap<String, Entry<T>>, frame_id: &str) -> Result<&'a Entry<T>, Reply> {
    table
        .get(frame_id)
        .or_else(|| table.get("*"))
        .ok_or_else(|| error(StatusCode::NOT_FOUND, "not_found", format!("no fixture for frame `{frame_id}`")))
}

fn entry_reply<T, R: Serialize>(entry: &Entry<T>, wrap: impl FnOnce(&T) -> R) -> Reply {
    match entry {
        Entry::Fault { fault } => fault_reply(*fault),
        Entry::Value(v) => ok(&wrap(v)),
    }
}

/// Computes a reply. Returns `(reply, rate_limit_first)` so the caller can
/// apply per-request rate limiting under the state lock.
fn respond(fixtures: &MockFixtures, route: &str, body: &[u8]) -> Result<(Reply, u32), Reply> {
    let reply = match route {
        ROUTE_CAPTION => {
            let req: FrameRequest = parse(body)?;
            entry_reply(lookup(&fixtures.captions, &req.frame.frame_id)?, Clone::clone)
        }
        ROUTE_DENSE_CAPTION => {
            let req: FrameRequest = parse(body)?;
            entry_reply(lookup(&fixtures.dense_captions, &req.frame.frame_id)?, |r| DenseCaptionResponse {
                regions: r.clone(),
            })
        }
        ROUTE_TAGS => {
            let req: FrameRequest = parse(body)?;
            entry_reply(lookup(&fixtures.tags, &req.frame.frame_id)?, |t| TagsResponse { tags: t.clone() })
        }
        ROUTE_ENCODE => {
            let req: EncodeRequest = parse(body)?;
            encode(&fixtures.encoder, &req)?
        }
        ROUTE_COMPLETE => {
            let req: CompleteRequest = parse(body)?;
            return complete_reply(&fixtures.completions, &req);
        }
        other => return Err(error(StatusCode::NOT_FOUND, "not_found", format!("unknown route {other}"))),
    };
    Ok((reply, 0))
}

fn encode(fixture: &EncoderFixture, req: &EncodeRequest) -> Result<Reply, Reply> {
    if req.patch_size == 0 || req.input_side % req.patch_size != 0 {
        return Err(error(StatusCode::BAD_REQUEST, "bad_request", "input side must be a multiple of the patch size"));
    }
    let EncoderMode::Echo = fixture.mode;
    let side = (req.input_side / req.patch_size) as usize;
    let tokens = fixture.cls_tokens + side * side;
    let d = fixture.embed_dim_override.unwrap_or(req.embed_dim);
    let mut values = Vec::with_capacity(req.frames.len() * tokens * d);
    for i in 0..req.frames.len() {
        values.extend(std::iter::repeat_n(-1.0f32, fixture.cls_tokens * d));
        values.extend(std::iter::repeat_n(i as f32, (tokens - fixture.cls_tokens) * d));
    }
    Ok(ok(&EncodeResponse {
        frames: req.frames.len(),
        tokens,
        embed_dim: d,
        cls_tokens: fixture.cls_tokens,
        data_b64: encode_f32(&values),
    }))
}

/// The echo encoder without a server: patch tokens of frame `i` are all `i`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoEncoder;

impl FrameEncoder for EchoEncoder {
    fn encode_frames(&self, cfg: &EncoderConfig, frames: &FrameBatch) -> ServiceResult<FrameEmbeddingTensor<f32>> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(ServiceError::Validation("cannot encode an empty frame batch".into()));
        }
        FrameEmbeddingTensor::from_fn(frames.len(), cfg.token_count(), cfg.embed_dim, |t, _, _| t as f32)
            .map_err(|e| ServiceError::Shape(e.to_string()))
    }
}

fn complete_reply(fixtures: &CompletionFixtures, req: &CompleteRequest) -> Result<(Reply, u32), Reply> {
    if req.prompt.trim().is_empty() {
        return Err(error(StatusCode::BAD_REQUEST, "bad_request", "prompt is empty"));
    }
    let digest = hex::encode(Sha256::digest(req.prompt.as_bytes()));
    let rule = fixtures
        .rules
        .iter()
        .find(|r| {
            r.prompt_sha256.as_ref().is_none_or(|h| h.eq_ignore_ascii_case(&digest))
                && r.contains.iter().all(|c| req.prompt.contains(c.as_str()))
        })
        .map(|r| &r.reply)
        .or(fixtures.default.as_ref())
        .ok_or_else(|| error(StatusCode::NOT_FOUND, "not_found", format!("no completion rule for prompt {digest}")))?;
    if let Some(fault) = rule.fault {
        return Ok((fault_reply(fault), 0));
    }
    let reply = ok(&CompleteResponse {
        text: rule.reply.clone(),
        finish_reason: rule.finish_reason,
    });
    Ok((reply, rule.rate_limit_first))
}

fn handle(shared: &Shared, route: &str, headers: &HeaderMap, body: &[u8]) -> Reply {
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .unwrap_or_else(|| idempotency_key(route, body));
    let mut state = shared.state.lock().expect("mock state poisoned");
    *state.stats.requests.entry(route.to_string()).or_default() += 1;
    if let Some(cached) = state.done.get(&key) {
        let cached = cached.clone();
        state.stats.replays += 1;
        return (StatusCode::OK, cached);
    }
    let attempt = {
        let a = state.attempts.entry(key.clone()).or_default();
        *a += 1;
        *a
    };
    let (reply, rate_limit_first) = match respond(&shared.fixtures, route, body) {
        Ok(r) => r,
        Err(e) => return e,
    };
    if attempt <= rate_limit_first {
        return error(StatusCode::TOO_MANY_REQUESTS, "rate_limited", format!("attempt {attempt} rate limited"));
    }
    if reply.0 == StatusCode::OK {
        *state.stats.side_effects.entry(route.to_string()).or_default() += 1;
        if state.done.insert(key, reply.1.clone()).is_some() {
            state.stats.duplicate_side_effects += 1;
        }
    }
    reply
}

fn to_response((status, body): Reply) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn router(shared: Arc<Shared>) -> Router {
    let route = |path: &'static str| {
        post(move |State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes| async move {
            to_response(handle(&s, path, &headers, &body))
        })
    };
    Router::new()
        .route(ROUTE_ENCODE, route(ROUTE_ENCODE))
        .route(ROUTE_CAPTION, route(ROUTE_CAPTION))
        .route(ROUTE_DENSE_CAPTION, route(ROUTE_DENSE_CAPTION))
        .route(ROUTE_TAGS, route(ROUTE_TAGS))
        .route(ROUTE_COMPLETE, route(ROUTE_COMPLETE))
        .route(
            "/__mock/stats",
            get(|State(s): State<Arc<Shared>>| async move {
                to_response(ok(&s.state.lock().expect("mock state poisoned").stats))
            }),
        )
        .route("/health", get(|| async { "ok" }))
        .layer(axum::extract::DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(shared)
}

/// A mock server on its own runtime thread. Dropping it shuts it down.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(fixtures: MockFixtures, addr: &str) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            fixtures,
            state: Mutex::default(),
        });
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(shared.clone());
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::Builder::new().name("mock-models".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    tracing::error!(error = %e, "mock server stopped");
                }
            });
        })?;
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.shared.state.lock().expect("mock state poisoned").stats.clone()
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
