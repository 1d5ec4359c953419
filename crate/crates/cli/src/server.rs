//! HTTP API over datasets and sessions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, CorsLayer};
use vizprompt_core::dataset::{ingest_bytes, Dataset, DatasetError, DatasetRegistry, Format};
use vizprompt_core::pipeline::{Pipeline, Turn, TurnErrorKind};
use vizprompt_core::prompt::{Mode, PromptError};
use vizprompt_core::session::{Session, SessionError, SessionStore};

use crate::config::ServiceConfig;

const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub struct AppState {
    registry: RwLock<DatasetRegistry>,
    datasets_dir: PathBuf,
    store: SessionStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    pipeline: Arc<Pipeline>,
    default_seed: u64,
}

/// Locator the model is told to read data from; served by `GET /datasets/{id}/raw`.
pub fn raw_locator(id: &str) -> String {
    format!("/datasets/{id}/raw")
}

impl AppState {
    /// Loads every dataset under the state directory.
    pub fn new(config: &ServiceConfig, pipeline: Pipeline) -> anyhow::Result<Self> {
        config.prepare_state_dir()?;
        let datasets_dir = config.datasets_dir();
        let on_disk = DatasetRegistry::from_dir(&datasets_dir)?;
        let mut registry = DatasetRegistry::new();
        for id in on_disk.ids() {
            let mut d = Dataset::clone(&*on_disk.get(&id)?);
            d.source = raw_locator(&d.id);
            registry.insert(d);
        }
        Ok(AppState {
            registry: RwLock::new(registry),
            datasets_dir,
            store: SessionStore::open(config.sessions_dir())?,
            sessions: Mutex::new(HashMap::new()),
            pipeline: Arc::new(pipeline),
            default_seed: config.default_seed,
        })
    }

    fn dataset(&self, id: &str) -> Result<Arc<Dataset>, ApiError> {
        self.registry.read().unwrap().get(id).map_err(ApiError::from)
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut sessions = self.sessions.lock().await;
        if let Some(s) = sessions.get(id) {
            return Ok(Arc::clone(s));
        }
        let loaded = self.store.load(id)?;
        let s = Arc::new(Mutex::new(loaded));
        sessions.insert(id.to_string(), Arc::clone(&s));
        Ok(s)
    }
}

fn dataset_file(dir: &std::path::Path, id: &str) -> Option<PathBuf> {
    ["csv", "json"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/datasets", get(list_datasets).post(upload_dataset))
        .route("/datasets/{id}/raw", get(raw_dataset))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", post(query))
        .route("/sessions/{id}/history", get(history))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    if let Some(origin) = cors_origin {
        let origin: HeaderValue = origin.parse()?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::exact(origin))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let pipeline = Pipeline::new(config.client()?, config.pipeline.clone());
    let state = Arc::new(AppState::new(&config, pipeline)?);
    let app = router(state, config.cors_allowed_origin.as_deref())?;
    let listener = tokio::net::TcpListener::bind(&config.listen_address).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    turn: Option<Box<Turn>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.into(), message: message.into(), turn: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(turn) = self.turn {
            body["turn"] = serde_json::to_value(turn).unwrap_or_default();
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::UnknownDataset(_) => ApiError::new(StatusCode::NOT_FOUND, "UnknownDataset", e.to_string()),
            DatasetError::Unreadable { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Storage", e.to_string())
            }
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidDataset", e.to_string()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "UnknownSession"),
            SessionError::NoPriorSpecification => (StatusCode::CONFLICT, "NoPriorSpecification"),
            SessionError::EmptyQuery => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyQuery"),
            SessionError::Prompt(PromptError::TokenBudgetExceeded { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "TokenBudgetExceeded")
            }
            SessionError::Prompt(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidQuery"),
            SessionError::DatasetMismatch { .. } | SessionError::Storage(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "Storage")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidBody", e.body_text())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Serialize)]
struct AttributeView<'a> {
    name: &'a str,
    datatype: &'static str,
}

#[derive(Serialize)]
struct DatasetView<'a> {
    id: &'a str,
    row_count: usize,
    url: &'a str,
    attributes: Vec<AttributeView<'a>>,
}

fn dataset_view(d: &Dataset) -> DatasetView<'_> {
    DatasetView {
        id: &d.id,
        row_count: d.row_count,
        url: &d.source,
        attributes: d
            .attributes
            .iter()
            .map(|a| AttributeView { name: &a.name, datatype: a.datatype.vega_lite_type() })
            .collect(),
    }
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let registry = state.registry.read().unwrap();
    let views: Vec<_> = registry
        .ids()
        .iter()
        .filter_map(|id| registry.get(id).ok())
        .map(|d| serde_json::to_value(dataset_view(&d)).unwrap_or_default())
        .collect();
    Json(json!(views))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Multipart with a `file` part; an optional `id` part overrides the id
/// taken from the file name.
async fn upload_dataset(
    State(state): State<Arc<AppState>>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidBody", m);
    let mut id = None;
    let mut file = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| bad(e.body_text()))? {
        match field.name() {
            Some("id") => id = Some(field.text().await.map_err(|e| bad(e.body_text()))?),
            Some("file") => {
                let name = field.file_name().unwrap_or("upload.csv").to_string();
                let bytes = field.bytes().await.map_err(|e| bad(e.body_text()))?;
                file = Some((name, bytes));
            }
            _ => {}
        }
    }
    let (name, bytes) = file.ok_or_else(|| bad("missing `file` part".into()))?;
    let path = std::path::Path::new(&name);
    let format = Format::from_path(path).ok_or_else(|| bad(format!("unsupported file type `{name}`")))?;
    let id = id.or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned())).unwrap_or_default();
    if !valid_id(&id) {
        return Err(bad(format!("dataset id `{id}` must be letters, digits, `_` or `-`")));
    }
    if state.registry.read().unwrap().get(&id).is_ok() {
        return Err(ApiError::new(StatusCode::CONFLICT, "DatasetExists", format!("dataset `{id}` already exists")));
    }
    let dataset = ingest_bytes(&id, &raw_locator(&id), &bytes, format)?;
    let ext = if format == Format::Csv { "csv" } else { "json" };
    std::fs::write(state.datasets_dir.join(format!("{id}.{ext}")), &bytes).map_err(internal)?;
    let ds = state.registry.write().unwrap().insert(dataset);
    Ok((StatusCode::CREATED, Json(serde_json::to_value(dataset_view(&ds)).map_err(internal)?)))
}

async fn raw_dataset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    state.dataset(&id)?;
    let path = dataset_file(&state.datasets_dir, &id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownDataset", format!("no file for `{id}`")))?;
    let bytes = tokio::fs::read(&path).await.map_err(internal)?;
    let mime = if path.extension().is_some_and(|e| e == "csv") { "text/csv" } else { "application/json" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Deserialize)]
struct CreateSession {
    dataset_id: String,
    seed: Option<u64>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let Json(body) = body?;
    let ds = state.dataset(&body.dataset_id)?;
    let session = Session::new(&ds, body.seed.unwrap_or(state.default_seed));
    state.store.save(&session)?;
    let out = json!({"session_id": session.id, "dataset_id": session.dataset_id, "seed": session.subset_seed});
    state.sessions.lock().await.insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Deserialize)]
struct QueryBody {
    query: String,
    #[serde(default = "initial")]
    mode: Mode,
}

fn initial() -> Mode {
    Mode::Initial
}

async fn query(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<QueryBody>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(body) = body?;
    let handle = state.session(&id).await?;
    // Held across the model call: one query per session at a time.
    let mut guard = handle.lock().await;
    let ds = state.dataset(&guard.dataset_id)?;
    let pipeline = Arc::clone(&state.pipeline);
    let mut session = guard.clone();
    let (session, result) = tokio::task::spawn_blocking(move || {
        let result = session.ask(&pipeline, &ds, &body.query, body.mode).map(|_| ());
        (session, result)
    })
    .await
    .map_err(internal)?;
    result?;
    *guard = session.clone();
    state.store.save(&session)?;
    let index = session.turns.len() - 1;
    let turn = session.turns[index].clone();
    if turn.error.as_ref().is_some_and(|e| e.kind == TurnErrorKind::Provider) {
        let e = turn.error.clone().expect("checked");
        return Err(ApiError {
            status: StatusCode::BAD_GATEWAY,
            code: e.code,
            message: e.message,
            turn: Some(Box::new(turn)),
        });
    }
    Ok(Json(json!({"session_id": session.id, "turn_index": index, "turn": turn})))
}

async fn history(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.lock().await;
    Ok(Json(json!({
        "session_id": s.id,
        "dataset_id": s.dataset_id,
        "seed": s.subset_seed,
        "turns": s.turns,
    })))
}
