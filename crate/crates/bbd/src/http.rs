//! The simulated API as an HTTP service.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bbd_core::blackbox::{ApiError, BlackBox, BudgetSnapshot, SegmentationApi};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::brf;
use crate::error::{Error, Result};
use crate::wire::{from_base64, to_base64, ErrorBody, SegmentRequest, SegmentResponse};

const BODY_LIMIT: usize = 64 << 20;

pub fn router(api: Arc<BlackBox>) -> Router {
    Router::new()
        .route("/segment", post(segment))
        .route("/budget", get(budget))
        .route("/health", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(api)
}

fn reject(status: StatusCode, error: String, snap: Option<BudgetSnapshot>) -> Response {
    let body = ErrorBody { error, calls_used: snap.map(|s| s.used_calls), max_calls: snap.and_then(|s| s.max_calls) };
    (status, Json(body)).into_response()
}

fn handle(api: &BlackBox, req: SegmentRequest) -> Result<SegmentResponse, ApiError> {
    let bytes = from_base64(&req.image).map_err(|e| ApiError::Malformed(format!("image is not base64: {e}")))?;
    let image = brf::decode_raster(&bytes).map_err(|e| ApiError::Malformed(e.to_string()))?;
    let request_len = bytes.len() as u64;
    let mask = api.segment(&image, &req.vocabulary, (req.base_crop[0], req.base_crop[1]))?;
    let mask = brf::encode_classmap(&mask).map_err(|e| ApiError::Malformed(e.to_string()))?;
    api.budget().record_bytes(request_len, mask.len() as u64);
    let snap = api.budget().snapshot();
    Ok(SegmentResponse { mask: to_base64(&mask), calls_used: snap.used_calls, calls_remaining: snap.remaining() })
}

async fn segment(State(api): State<Arc<BlackBox>>, body: axum::body::Bytes) -> Response {
    let req: SegmentRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e.to_string(), None),
    };
    let worker = api.clone();
    match tokio::task::spawn_blocking(move || handle(&worker, req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e @ ApiError::Quota { .. })) => {
            reject(StatusCode::TOO_MANY_REQUESTS, e.to_string(), Some(api.budget().snapshot()))
        }
        Ok(Err(e)) => reject(StatusCode::BAD_REQUEST, e.to_string(), None),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn budget(State(api): State<Arc<BlackBox>>) -> Json<BudgetSnapshot> {
    Json(api.budget().snapshot())
}

/// Serve until the process ends.
pub fn serve_forever(api: Arc<BlackBox>, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Other(e.to_string()))?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await.map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?);
        axum::serve(listener, router(api)).await.map_err(|e| Error::Transport(e.to_string()))
    })
}

/// A server on a background thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
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

/// Start a server on `addr` (port 0 picks a free one) in the background.
pub fn spawn(api: Arc<BlackBox>, addr: SocketAddr) -> Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    std_listener.set_nonblocking(true).map_err(|e| Error::Transport(e.to_string()))?;
    let addr = std_listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
        rt.block_on(async move {
            let listener = TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, router(api))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
