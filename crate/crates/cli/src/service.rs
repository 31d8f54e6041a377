//! JSON-over-HTTP API for interactive use.
//!
//! | Method | Path           | Body                                | Response |
//! |--------|----------------|-------------------------------------|----------|
//! | POST   | `/reformulate` | `{query, k?, m?, strategy?}`        | `{candidates: [{reformulated, position, span, ig}]}` |
//! | POST   | `/search`      | `{query, top_n?}`                   | `{results: [{doc_id, score, text_snippet}]}` |
//! | GET    | `/health`      |                                     | `{status, model_loaded, index_docs}` |
//!
//! Errors are `{error}` with status 400 for bad input and 503 when the
//! model or index needed by the endpoint was not loaded. The model and index
//! are read-only after startup, so requests share them without locking.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qexpand_core::corpus::tokenize;
use qexpand_core::expander::{expand, query_rng, CandidateExpansion, ExpanderConfig, Strategy};
use qexpand_core::model::InfillModel;
use qexpand_core::search::{SearchEngine, SearchIndex, DEFAULT_TOP_N};
use serde::{Deserialize, Serialize};

pub struct AppState {
    pub model: Option<Arc<InfillModel>>,
    pub index: Option<Arc<SearchIndex>>,
    /// Defaults for requests that omit `k`, `m` or `strategy`.
    pub expander: ExpanderConfig,
    /// Seed of the per-query RAND stream.
    pub seed: u64,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReformulateRequest {
    pub query: String,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub reformulated: String,
    pub position: usize,
    pub span: Vec<String>,
    pub ig: f64,
}

impl From<CandidateExpansion> for CandidateView {
    fn from(c: CandidateExpansion) -> Self {
        Self {
            reformulated: c.reformulated,
            position: c.position,
            span: c.span,
            ig: c.ig,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReformulateResponse {
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub query: String,
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub text_snippet: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_loaded: bool,
    pub index_docs: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/reformulate", post(reformulate))
        .route("/search", post(search))
        .route("/health", get(health))
        .with_state(state)
}

fn check_query(query: &str) -> Result<(), ApiError> {
    tokenize(query)
        .map(|_| ())
        .map_err(|_| ApiError::bad_request("query is empty"))
}

async fn reformulate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ReformulateRequest>, JsonRejection>,
) -> Result<Json<ReformulateResponse>, ApiError> {
    let Json(req) = body?;
    check_query(&req.query)?;
    let mut cfg = state.expander.clone();
    cfg.k = req.k.unwrap_or(cfg.k);
    cfg.m = req.m.unwrap_or(cfg.m);
    if let Some(s) = &req.strategy {
        cfg.strategy = s
            .parse::<Strategy>()
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
    }
    cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::unavailable("no model checkpoint is loaded"))?;
    let seed = state.seed;
    // Decoding is CPU-bound; keep it off the async workers.
    let candidates = tokio::task::spawn_blocking(move || {
        let q = tokenize(&req.query)?;
        expand(&q, model.as_ref(), &cfg, &mut query_rng(seed, &req.query))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(ReformulateResponse {
        candidates: candidates.into_iter().map(CandidateView::from).collect(),
    }))
}

async fn search(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SearchRequest>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Json(req) = body?;
    check_query(&req.query)?;
    let top_n = req.top_n.unwrap_or(DEFAULT_TOP_N);
    if top_n == 0 {
        return Err(ApiError::bad_request("top_n must be at least 1"));
    }
    let index = state
        .index
        .as_ref()
        .ok_or_else(|| ApiError::unavailable("no search index is loaded"))?;
    let ranked = index
        .search(&req.query, top_n)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let results = ranked
        .into_iter()
        .map(|r| SearchHit {
            text_snippet: index.snippet(&r.doc_id).unwrap_or_default().to_string(),
            doc_id: r.doc_id,
            score: r.score,
        })
        .collect();
    Ok(Json(SearchResponse { results }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        model_loaded: state.model.is_some(),
        index_docs: state.index.as_ref().map_or(0, |i| i.num_docs()),
    })
}
