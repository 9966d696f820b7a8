//! Local extraction service: `POST /extract` and `GET /healthz` over one
//! frozen model. Requests share the weights read-only and make no outbound
//! connections.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use coex_core::edge::{handle_extract, health_body};
use coex_core::InferenceModel;
use tokio::sync::oneshot;

pub fn router(model: Arc<InferenceModel>) -> Router {
    Router::new()
        .route("/extract", post(extract))
        .route("/healthz", get(healthz))
        .with_state(model)
}

fn json(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn extract(State(model): State<Arc<InferenceModel>>, body: Bytes) -> Response {
    // Inference is CPU-bound; keep it off the async workers.
    match tokio::task::spawn_blocking(move || handle_extract(&model, &body)).await {
        Ok(out) => json(
            StatusCode::from_u16(out.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            out.body,
        ),
        Err(e) => json(
            StatusCode::INTERNAL_SERVER_ERROR,
            serde_json::to_vec(&serde_json::json!({ "error": e.to_string() })).unwrap_or_default(),
        ),
    }
}

async fn healthz(State(model): State<Arc<InferenceModel>>) -> Response {
    json(StatusCode::OK, health_body(&model))
}

pub async fn serve_on(
    model: Arc<InferenceModel>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(model))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves until interrupted.
pub fn serve(model: InferenceModel, addr: &str) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!(
            "serving {} on http://{}",
            model.model_version(),
            listener.local_addr()?
        );
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve_on(Arc::new(model), listener, shutdown).await?;
        Ok(())
    })
}

/// A server on a background thread; dropping the handle shuts it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

pub fn spawn(model: Arc<InferenceModel>, addr: &str) -> anyhow::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener =
                tokio::net::TcpListener::from_std(listener).expect("listener registers with the runtime");
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = serve_on(model, listener, shutdown).await {
                eprintln!("server error: {e}");
            }
        })
    });
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
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
