use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use super::remote::InfoResponse;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::MlpModel;

#[derive(Deserialize)]
struct PredictBody {
    inputs: Vec<Vec<f64>>,
}

fn bad_request(msg: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(serde_json::json!({ "error": msg.into() })),
    )
        .into_response()
}

async fn info(State(model): State<Arc<MlpModel>>) -> Json<InfoResponse> {
    Json(InfoResponse {
        class_count: model.class_count(),
        input_dim: model.input_dim(),
    })
}

async fn predict(State(model): State<Arc<MlpModel>>, body: Bytes) -> Response {
    let req: PredictBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed request: {e}")),
    };
    let batch = match Matrix::from_rows(&req.inputs, model.input_dim()) {
        Ok(b) => b,
        Err(e) => return bad_request(e.to_string()),
    };
    let probs = match model.forward(&batch) {
        Ok(p) => p,
        Err(e) => return bad_request(e.to_string()),
    };
    let rows: Vec<&[f64]> = probs.iter_rows().collect();
    Json(serde_json::json!({ "probs": rows })).into_response()
}

fn router(model: Arc<MlpModel>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/predict", post(predict))
        .with_state(model)
}

/// A running prediction service. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for the server thread to exit.
    pub fn stop(mut self) -> Result<()> {
        self.stop_inner()
    }

    /// Blocks until the server exits on its own (it only does so on error).
    pub fn wait(mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| Error::Startup("server thread panicked".into()))?
                .map_err(|e| Error::Startup(e.to_string())),
            None => Ok(()),
        }
    }

    fn stop_inner(&mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join()
                .map_err(|_| Error::Startup("server thread panicked".into()))?
                .map_err(|e| Error::Startup(e.to_string()))?;
        }
        Ok(())
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Serves `model` over HTTP:
///
/// * `POST /v1/predict` with `{"inputs": [[f64, ...], ...]}` answers `{"probs": [[f64, ...], ...]}`
/// * `GET /v1/info` answers `{"class_count": u, "input_dim": u}`
/// * invalid requests get status 400 and `{"error": "..."}`
///
/// Binding happens before this returns, so a busy port is reported immediately. Use port
/// 0 to let the OS choose.
pub fn serve(model: MlpModel, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Startup(format!("bind: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Startup(e.to_string()))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Startup(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::new(model));
    let thread = std::thread::Builder::new()
        .name(format!("zest-serve-{}", local.port()))
        .spawn(move || -> std::io::Result<()> {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_io()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })
        .map_err(|e| Error::Startup(e.to_string()))?;
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
