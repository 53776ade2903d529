//! REST API over a [`Store`].
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/tasks` | `?status=&video_id=&page=&page_size=` |
//! | GET | `/tasks/{id}` | |
//! | POST | `/tasks` | [`NewTask`] |
//! | POST | `/tasks/{id}/enrichment` | [`SubmissionRequest`]; an `Idempotency-Key` header also works |
//! | POST | `/tasks/{id}/approve` | |
//! | GET | `/export` | `?include=human,semi_automatic` |
//! | GET | `/frames/{hash}` | |
//!
//! Errors are `{"code": ..., "message": ...}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::store::{ExportInclude, NewTask, Store, StoreError, SubmissionRequest, TaskFilter, TaskStatus};

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Validation(_) => StatusCode::BAD_REQUEST,
            StoreError::Immutable(_) | StoreError::InvalidTransition { .. } => StatusCode::CONFLICT,
            StoreError::Corrupt { .. } | StoreError::Io(_) => {
                tracing::error!(error = %self.0, "storage failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = ErrorBody {
            code: self.0.code(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn validation(message: impl Into<String>) -> ApiError {
    ApiError(StoreError::Validation(message.into()))
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    status: Option<String>,
    video_id: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

const MAX_PAGE_SIZE: usize = 500;

async fn list_tasks(State(store): State<Arc<Store>>, Query(q): Query<ListQuery>) -> ApiResult<Response> {
    let filter = TaskFilter {
        status: q.status.as_deref().map(str::parse::<TaskStatus>).transpose()?,
        video_id: q.video_id,
    };
    let page_size = q.page_size.unwrap_or(50);
    if page_size > MAX_PAGE_SIZE {
        return Err(validation(format!("page_size is capped at {MAX_PAGE_SIZE}")));
    }
    Ok(Json(store.list_tasks(&filter, q.page.unwrap_or(1), page_size)?).into_response())
}

async fn get_task(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(store.get_task(&id)?).into_response())
}

#[derive(Debug, Serialize)]
struct Created {
    task_id: String,
    created: bool,
}

async fn create_task(State(store): State<Arc<Store>>, body: Result<Json<NewTask>, axum::extract::rejection::JsonRejection>) -> ApiResult<Response> {
    let Json(new) = body.map_err(|e| validation(e.body_text()))?;
    let (task_id, created) = tokio::task::block_in_place(|| store.create_task(new))?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(Created { task_id, created })).into_response())
}

async fn submit(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<SubmissionRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(mut req) = body.map_err(|e| validation(e.body_text()))?;
    if req.idempotency_key.is_none() {
        req.idempotency_key = headers
            .get("idempotency-key")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    let outcome = tokio::task::block_in_place(|| store.submit_enrichment(&id, req))?;
    Ok(Json(outcome).into_response())
}

async fn approve(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(tokio::task::block_in_place(|| store.approve(&id))?).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ExportQuery {
    include: Option<String>,
}

async fn export(State(store): State<Arc<Store>>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let include = match q.include {
        Some(s) => s.parse()?,
        None => ExportInclude::default(),
    };
    let body = store.export_jsonl(include);
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

fn sniff(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else {
        "application/octet-stream"
    }
}

async fn frame(State(store): State<Arc<Store>>, Path(hash): Path<String>) -> ApiResult<Response> {
    let path = store
        .frame_path(&hash)
        .ok_or_else(|| ApiError(StoreError::NotFound(format!("frame {hash}"))))?;
    let bytes = tokio::task::block_in_place(|| std::fs::read(&path)).map_err(StoreError::Io)?;
    Ok((
        [
            (header::CONTENT_TYPE, sniff(&bytes)),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks).post(create_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/enrichment", post(submit))
        .route("/tasks/{id}/approve", post(approve))
        .route("/export", get(export))
        .route("/frames/{hash}", get(frame))
        .route("/health", get(|| async { "ok" }))
        .layer(axum::extract::DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(store)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    store: Arc<Store>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}

/// A server on its own runtime thread; dropping it stops the server.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn start(store: Arc<Store>, addr: &str) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("annotation-api".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                serve(store, listener, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
        Ok(Self {
            addr,
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

    /// Blocks until the server stops.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
