use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use refeednet::prediction::{Review, Verdict};
use refeednet::Error;

use crate::state::AppState;

/// An error rendered as `{"error": "..."}` with a matching status code.
pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) | Error::Protocol(_) => StatusCode::CONFLICT,
            Error::Io { .. } | Error::StateFile { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::CorpusLayout { .. } => StatusCode::NOT_FOUND,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    limit: Option<usize>,
}

async fn list_records(
    State(st): State<Arc<AppState>>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Response> {
    let status = q.status.as_deref().map(str::parse::<Review>).transpose()?;
    Ok(Json(st.records(status, q.limit)).into_response())
}

async fn get_image(
    State(st): State<Arc<AppState>>,
    Path(source_id): Path<String>,
) -> ApiResult<Response> {
    let bytes = st.image(&source_id).map_err(|e| match e {
        Error::Io { .. } => ApiError(StatusCode::NOT_FOUND, e.to_string()),
        other => other.into(),
    })?;
    let mime = if bytes.starts_with(b"P6") {
        "image/x-portable-pixmap"
    } else {
        "image/x-portable-graymap"
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn review(
    State(st): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: std::result::Result<Json<Verdict>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(verdict) =
        body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    if st.record(id).is_none() {
        return Err(Error::NotFound(id).into());
    }
    let reply = tokio::task::spawn_blocking(move || st.review(id, verdict))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(reply).into_response())
}

async fn metrics(State(st): State<Arc<AppState>>) -> Response {
    Json(st.metrics()).into_response()
}

async fn retrain(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let cycle = st.start_cycle()?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "status": "started", "cycle": cycle })),
    )
        .into_response())
}

async fn model(State(st): State<Arc<AppState>>) -> Response {
    Json(st.model_info()).into_response()
}

async fn predict(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let rec = tokio::task::spawn_blocking(move || st.predict_bytes(&body))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn require_token(
    State(token): State<Arc<String>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    let ok = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token.as_str());
    if ok {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response()
    }
}

/// All endpoints, with the static bundle under `/ui/`.
pub fn router(state: Arc<AppState>) -> Router {
    let mut api = Router::new()
        .route("/records", get(list_records))
        .route("/records/{id}/review", post(review))
        .route("/images/{*source_id}", get(get_image))
        .route("/metrics", get(metrics))
        .route("/retrain", post(retrain))
        .route("/model", get(model))
        .route("/predict", post(predict));
    if let Some(token) = state.config().token.clone() {
        api = api.layer(middleware::from_fn_with_state(Arc::new(token), require_token));
    }
    let ui = ServeDir::new(state.config().ui_dir()).append_index_html_on_directories(true);
    api.nest_service("/ui", ui).with_state(state)
}
