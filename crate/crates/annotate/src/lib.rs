//! HTTP service that hands out choice sets, takes Best-Worst judgments and
//! reports progress and agreement.

mod store;

pub use store::{AnnotationStore, PresentedSet, PresentedStory, Stats, StoreError, CONSENSUS_ANNOTATOR, LOG_FILE};

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use babyrlhf_core::preference::ChoiceSet;
use serde::Deserialize;
use tower_http::services::ServeDir;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub choice_sets: PathBuf,
    /// Built UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Seeds the per-(set, annotator) presentation order.
    pub seed: u64,
}

pub type SharedStore = Arc<RwLock<AnnotationStore>>;

const PLACEHOLDER: &str = "<!doctype html><title>annotation service</title>\
<p>No UI bundle configured. The JSON API lives under <code>/api</code>.</p>";

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct Submission {
    set_id: u64,
    annotator: String,
    best: usize,
    worst: usize,
}

#[derive(Deserialize)]
struct Consensus {
    set_id: u64,
    best: usize,
    worst: usize,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::Validation(_) => StatusCode::BAD_REQUEST,
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict { .. } => StatusCode::CONFLICT,
            StoreError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            StoreError::Core(babyrlhf_core::Error::InvalidInput(_)) => StatusCode::BAD_REQUEST,
            StoreError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        error(status, self.to_string())
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))
}

async fn next_set(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing `annotator` query parameter");
    };
    match store.read().expect("store lock").next_set(&annotator) {
        Some(set) => Json(set).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

/// Runs a mutation on the blocking pool: the append is fsynced before we reply.
async fn write<F>(store: SharedStore, f: F) -> Response
where
    F: FnOnce(&mut AnnotationStore) -> Result<babyrlhf_core::preference::BwsAnnotation, StoreError> + Send + 'static,
{
    let joined = tokio::task::spawn_blocking(move || f(&mut store.write().expect("store lock"))).await;
    match joined {
        Ok(Ok(record)) => (StatusCode::CREATED, Json(record)).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn submit(State(store): State<SharedStore>, body: Bytes) -> Response {
    let s: Submission = match parse(&body) {
        Ok(s) => s,
        Err(r) => return r,
    };
    write(store, move |st| st.submit(s.set_id, &s.annotator, s.best, s.worst)).await
}

async fn consensus(State(store): State<SharedStore>, body: Bytes) -> Response {
    let c: Consensus = match parse(&body) {
        Ok(c) => c,
        Err(r) => return r,
    };
    write(store, move |st| st.submit_consensus(c.set_id, c.best, c.worst)).await
}

async fn stats(State(store): State<SharedStore>) -> Response {
    Json(store.read().expect("store lock").stats()).into_response()
}

async fn export(State(store): State<SharedStore>) -> Response {
    let pairs = match store.read().expect("store lock").export_pairs() {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    match babyrlhf_core::jsonl::to_string(&pairs) {
        Ok(body) => ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(store: SharedStore, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/sets/next", get(next_set))
        .route("/api/annotations", post(submit))
        .route("/api/annotations/consensus", post(consensus))
        .route("/api/stats", get(stats))
        .route("/api/export/pairs", get(export))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Loads the choice sets and replays the log under `cfg.data_dir`.
pub fn open_store(cfg: &ServiceConfig) -> Result<SharedStore, StoreError> {
    let sets: Vec<ChoiceSet> = babyrlhf_core::jsonl::read(&cfg.choice_sets)?;
    if sets.is_empty() {
        return Err(StoreError::Validation(format!("{} holds no choice sets", cfg.choice_sets.display())));
    }
    let store = AnnotationStore::open(&cfg.data_dir, sets, cfg.seed)?;
    let counts: HashMap<bool, usize> = store.records().iter().fold(HashMap::new(), |mut m, a| {
        *m.entry(a.consensus).or_default() += 1;
        m
    });
    log::info!(
        "loaded {} choice sets, replayed {} annotations and {} consensus records",
        store.sets().count(),
        counts.get(&false).unwrap_or(&0),
        counts.get(&true).unwrap_or(&0)
    );
    Ok(Arc::new(RwLock::new(store)))
}

/// Binds `cfg.addr` and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let store = open_store(&cfg)?;
    if let Some(dir) = &cfg.static_dir {
        if !dir.is_dir() {
            anyhow::bail!("static directory {} does not exist", dir.display());
        }
    }
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, cfg.static_dir)).await?;
    Ok(())
}
