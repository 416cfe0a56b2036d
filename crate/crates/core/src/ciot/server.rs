//! HTTP front end for [`Broker`].

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Body;
use axum::extract::{Path, Query, RawQuery, State};
use axum::http::{header, StatusCode};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::sync::oneshot;

use super::wire::{self, WireResponse};
use super::{Broker, CiotError};
use crate::time::Clock;

/// Results returned by `feeds.json` when the query does not say.
const DEFAULT_FEED_RESULTS: usize = 100;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("address {0} is already in use")]
    AddrInUse(SocketAddr),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("server runtime failed: {0}")]
    Runtime(String),
}

#[derive(Clone)]
struct AppState {
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
}

fn into_response(w: WireResponse) -> Response {
    Response::builder()
        .status(StatusCode::from_u16(w.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
        .header(header::CONTENT_TYPE, w.content_type)
        .body(Body::from(w.body))
        .expect("static response parts")
}

fn handle_update(state: &AppState, form: &str) -> Response {
    let now = state.clock.now();
    let result = wire::parse_update_form(form)
        .and_then(|req| state.broker.write(&req.api_key, &req.fields, now));
    if let Err(e) = &result {
        log::debug!("update rejected: {e}");
    }
    into_response(wire::update_response(&result))
}

async fn update_post(
    State(state): State<AppState>,
    RawQuery(q): RawQuery,
    body: String,
) -> Response {
    // Clients may also put the key and fields in the query string.
    let form = match (body.is_empty(), q) {
        (true, Some(q)) => q,
        (false, Some(q)) if !q.is_empty() => format!("{q}&{body}"),
        _ => body,
    };
    handle_update(&state, &form)
}

async fn update_get(State(state): State<AppState>, RawQuery(q): RawQuery) -> Response {
    handle_update(&state, &q.unwrap_or_default())
}

fn api_key(q: &HashMap<String, String>) -> &str {
    q.get("api_key").map(String::as_str).unwrap_or("")
}

fn positive_param(
    q: &HashMap<String, String>,
    name: &str,
    default: usize,
) -> Result<usize, CiotError> {
    match q.get(name) {
        None => Ok(default),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CiotError::BadRequest(format!(
                "{name} must be a positive integer"
            ))),
        },
    }
}

async fn feeds_last(
    State(state): State<AppState>,
    Path(channel_id): Path<u64>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let result = state.broker.read_last(channel_id, api_key(&q));
    into_response(wire::last_response(&result))
}

async fn feeds(
    State(state): State<AppState>,
    Path(channel_id): Path<u64>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let result = positive_param(&q, "results", DEFAULT_FEED_RESULTS).and_then(|n| {
        let entries = state.broker.read_feed(channel_id, api_key(&q), n)?;
        let cfg = state
            .broker
            .channel_config(channel_id)
            .cloned()
            .ok_or(CiotError::NotFound(channel_id))?;
        Ok((cfg, state.broker.last_entry_id(channel_id), entries))
    });
    into_response(wire::feed_response(&result))
}

async fn refined(
    State(state): State<AppState>,
    Path(channel_id): Path<u64>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let result = state
        .broker
        .authorize_read(channel_id, api_key(&q))
        .and_then(|_| positive_param(&q, "window", 1))
        .and_then(|w| state.broker.refine(channel_id, w));
    match result {
        Ok(view) => into_response(WireResponse {
            status: 200,
            content_type: "application/json; charset=utf-8",
            body: wire::refined_to_json(&view),
        }),
        Err(e) => into_response(wire::error_response(&e, true)),
    }
}

pub fn router(broker: Arc<Broker>, clock: Arc<dyn Clock>) -> Router {
    Router::new()
        .route("/update", get(update_get).post(update_post))
        .route("/update.json", get(update_get).post(update_post))
        .route("/channels/{channel_id}/feeds/last.json", get(feeds_last))
        .route("/channels/{channel_id}/feeds.json", get(feeds))
        .route("/channels/{channel_id}/refined.json", get(refined))
        .with_state(AppState { broker, clock })
}

/// A broker served on a background runtime; stops when dropped.
pub struct BoundServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl BoundServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL, e.g. `http://127.0.0.1:3000`.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) -> Result<(), ServerError> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| ServerError::Runtime("server thread panicked".into()))?,
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for BoundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` synchronously (so port conflicts surface here) and serves
/// the broker on a dedicated thread.
pub fn bind(
    addr: SocketAddr,
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
) -> Result<BoundServer, ServerError> {
    let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ServerError::AddrInUse(addr),
        _ => ServerError::Bind { addr, source: e },
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|e| ServerError::Bind { addr, source: e })?;
    let local = listener
        .local_addr()
        .map_err(|e| ServerError::Bind { addr, source: e })?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(broker, clock);
    let thread = std::thread::Builder::new()
        .name("ciot-broker".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_io()
                .enable_time()
                .build()
                .map_err(|e| ServerError::Runtime(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)
                    .map_err(|e| ServerError::Runtime(e.to_string()))?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .map_err(|e| ServerError::Runtime(e.to_string()))
            })
        })
        .map_err(|e| ServerError::Runtime(e.to_string()))?;
    log::info!("broker listening on http://{local}");
    Ok(BoundServer {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is terminated.
pub fn serve(
    addr: SocketAddr,
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
) -> Result<(), ServerError> {
    let server = bind(addr, broker, clock)?;
    server.wait()
}
