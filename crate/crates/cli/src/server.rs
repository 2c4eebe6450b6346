//! JSON review API over the run's stores.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Deserialize;
use tower_http::services::ServeDir;

use forge_core::corpus::{Sample, ScreeningGroup};
use forge_core::ingest::read_samples;
use forge_core::pipeline::{Pipeline, PipelineError};
use forge_core::reports::{self, render_json, ReportError, MODEL_RATER};
use forge_core::store::{Label, LabelRecord, RecordStore, StoreError};

pub struct AppState {
    pipeline: Pipeline,
    labels: RecordStore,
    groups: RecordStore,
}

impl AppState {
    pub fn new(pipeline: Pipeline) -> Self {
        let layout = pipeline.layout().clone();
        Self { labels: RecordStore::open(&layout.labels()), groups: RecordStore::open(&layout.groups()), pipeline }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message });
        (self.status, [(header::CONTENT_TYPE, "application/json")], render_json(&body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownSource(_) => Self::not_found(e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(m) => Self::bad_request(m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

type ApiResult = Result<Response, ApiError>;

fn json_response<T: serde::Serialize>(value: &T) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], render_json(value)).into_response()
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/sources", get(list_sources))
        .route("/api/sources/{id}/samples", get(screening_batch))
        .route("/api/sources/{id}/group", post(set_group))
        .route("/api/samples/{id}/lineage", get(lineage))
        .route("/api/labels", post(add_label))
        .route("/api/agreement", get(agreement))
        .route("/api/reports/filter-rates", get(filter_rates))
        .route("/api/reports/lengths", get(lengths))
        .route("/api/reports/scores", get(scores))
        .with_state(Arc::new(state));
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn list_sources(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(json_response(&st.pipeline.sources()?))
}

#[derive(Deserialize)]
struct BatchQuery {
    n: Option<usize>,
    seed: Option<u64>,
}

async fn screening_batch(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<BatchQuery>,
) -> ApiResult {
    let cfg = st.pipeline.config();
    let batch = st.pipeline.screen(&id, q.n.unwrap_or(cfg.screening_size), q.seed.unwrap_or(cfg.seed))?;
    Ok(json_response(&batch))
}

#[derive(Deserialize)]
struct GroupBody {
    group: ScreeningGroup,
    #[serde(default)]
    rater_id: Option<String>,
}

async fn set_group(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let body: GroupBody = parse_body(&body)?;
    st.pipeline.source(&id)?;
    let record = LabelRecord::group(&id, body.rater_id.as_deref().unwrap_or("operator"), body.group);
    st.groups.append(&record)?;
    Ok(json_response(&st.pipeline.source(&id)?))
}

async fn lineage(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    match reports::lineage(st.pipeline.layout(), &id)? {
        Some(l) => Ok(json_response(&l)),
        None => Err(ApiError::not_found(format!("unknown sample `{id}`"))),
    }
}

#[derive(Deserialize)]
struct LabelBody {
    sample_id: String,
    rater_id: String,
    label: Label,
}

fn sample_exists(st: &AppState, id: &str) -> Result<bool, ApiError> {
    let layout = st.pipeline.layout();
    for path in [layout.rewritten(), layout.group_b(), layout.group_a()] {
        if path.exists() {
            let samples: Vec<Sample> =
                read_samples(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            if samples.iter().any(|s| s.id == id) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

async fn add_label(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let body: LabelBody = parse_body(&body)?;
    if body.rater_id == MODEL_RATER {
        return Err(ApiError::bad_request(format!("rater id `{MODEL_RATER}` is reserved for judge verdicts")));
    }
    if !sample_exists(&st, &body.sample_id)? {
        return Err(ApiError::not_found(format!("unknown sample `{}`", body.sample_id)));
    }
    let record = LabelRecord::label(&body.sample_id, &body.rater_id, body.label);
    st.labels.append(&record)?;
    Ok((StatusCode::CREATED, json_response(&record)).into_response())
}

async fn agreement(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(json_response(&reports::agreement_report(st.pipeline.layout())?))
}

async fn filter_rates(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(json_response(&reports::filter_rate_report(st.pipeline.layout())?))
}

async fn lengths(State(st): State<Arc<AppState>>) -> ApiResult {
    let cfg = st.pipeline.config();
    Ok(json_response(&reports::length_distribution(st.pipeline.layout(), cfg.tokenizer, cfg.histogram_bucket)?))
}

async fn scores(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(json_response(&reports::score_report(st.pipeline.layout())?))
}
