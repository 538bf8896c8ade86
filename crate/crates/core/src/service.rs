//! Local HTTP service over one loaded classifier.
//!
//! The dataset is scored once at startup; `/score` and `/perturb` run the
//! same scoring path as the command line on demand.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Example, Input};
use crate::error::Error;
use crate::fim::{lambda_max, score_dataset, FimResult, ScoredRow};
use crate::models::{model_hash, Classifier};
use crate::probe::attribution::DEFAULT_STEPS;
use crate::probe::{
    apply_substitutions, important_tokens, integrated_gradients, AttributionResult, Baseline,
    ImportancePolicy, Substitution, SubstitutionSpec,
};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;

/// Immutable state shared by all requests.
pub struct AppState {
    clf: Classifier,
    model_hash: String,
    examples: Vec<Example>,
    rows: Vec<ScoredRow>,
    /// Index into `examples` for every row.
    row_example: Vec<usize>,
    by_id: HashMap<String, usize>,
    lambda_desc: Vec<usize>,
}

impl AppState {
    /// Scores `examples` up front. Examples that fail to score are logged
    /// and left out of the listing.
    pub fn new(clf: Classifier, examples: Vec<Example>) -> crate::Result<Self> {
        let model_hash = model_hash(clf.model())?;
        let mut rows = Vec::new();
        let mut row_example = Vec::new();
        for (i, result) in score_dataset(&clf, &examples).into_iter().enumerate() {
            match result {
                Ok(r) => {
                    rows.push(ScoredRow::new(&r, false));
                    row_example.push(i);
                }
                Err(e) => log::warn!("not listing example {}: {e}", examples[i].id),
            }
        }
        let by_id = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let mut lambda_desc: Vec<usize> = (0..rows.len()).collect();
        lambda_desc.sort_by(|&a, &b| rows[b].lambda_max.total_cmp(&rows[a].lambda_max));
        Ok(AppState {
            clf,
            model_hash,
            examples,
            rows,
            row_example,
            by_id,
            lambda_desc,
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unprocessable(String),
    Internal,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Empty(_)
            | Error::Shape(_)
            | Error::InvalidConfig(_)
            | Error::ClassIndex { .. } => ApiError::Unprocessable(e.to_string()),
            other => {
                log::error!("request failed: {other}");
                ApiError::Internal
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal => (StatusCode::INTERNAL_SERVER_ERROR, "internal error".into()),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

/// Runs CPU-bound scoring off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        log::error!("scoring task failed: {e}");
        ApiError::Internal
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreView {
    pub probs: Vec<f64>,
    pub prediction: usize,
    pub lambda_max: f64,
    pub lambda_max_per_token: Option<f64>,
    pub n_tokens: Option<usize>,
    pub tokens: Vec<String>,
}

impl From<FimResult> for ScoreView {
    fn from(r: FimResult) -> Self {
        ScoreView {
            probs: r.probs,
            prediction: r.prediction,
            lambda_max: r.lambda_max,
            lambda_max_per_token: r.lambda_max_per_token,
            n_tokens: r.n_tokens,
            tokens: r.tokens,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    text: Option<String>,
    point: Option<Vec<f64>>,
}

impl ScoreRequest {
    fn into_input(self) -> Result<Input, ApiError> {
        match (self.text, self.point) {
            (Some(t), None) => Ok(Input::Text(t)),
            (None, Some(p)) => Ok(Input::Point(p)),
            _ => Err(ApiError::BadRequest(
                "body needs exactly one of `text` or `point`".into(),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerturbRequest {
    text: String,
    #[serde(default)]
    substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbResponse {
    pub original: ScoreView,
    pub perturbed: ScoreView,
    pub perturbed_text: String,
    /// `perturbed.lambda_max − original.lambda_max`
    pub delta: f64,
    pub flipped: bool,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    sort: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub sort: String,
    pub items: Vec<ScoredRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub record: ScoredRow,
    pub input: Input,
    pub tokens: Vec<String>,
    pub attribution: AttributionResult,
    pub important_tokens: Vec<usize>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_hash": state.model_hash }))
}

async fn list_examples(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ListQuery>,
) -> ApiResult<ExamplePage> {
    let sort = q.sort.unwrap_or_else(|| "lambda_desc".into());
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let n = state.rows.len();
    let window = offset.min(n)..offset.saturating_add(limit).min(n);
    let items: Vec<ScoredRow> = match sort.as_str() {
        "lambda_desc" => state.lambda_desc[window].iter().map(|&i| state.rows[i].clone()).collect(),
        "lambda_asc" => window
            .map(|k| state.rows[state.lambda_desc[n - 1 - k]].clone())
            .collect(),
        "input" => state.rows[window].to_vec(),
        other => {
            return Err(ApiError::BadRequest(format!(
                "unknown sort {other:?}; use lambda_desc, lambda_asc or input"
            )))
        }
    };
    Ok(Json(ExamplePage {
        total: n,
        offset,
        limit,
        sort,
        items,
    }))
}

async fn example_detail(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<ExampleDetail> {
    let &row = state
        .by_id
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("no example with id {id:?}")))?;
    blocking(move || {
        let example = &state.examples[state.row_example[row]];
        let result = lambda_max(&state.clf, example)?;
        let attribution = integrated_gradients(
            &state.clf,
            example,
            result.prediction,
            DEFAULT_STEPS,
            Baseline::default(),
        )?;
        let important = important_tokens(&attribution, ImportancePolicy::default())?;
        Ok(Json(ExampleDetail {
            record: ScoredRow::new(&result, true),
            input: example.input.clone(),
            tokens: result.tokens,
            attribution,
            important_tokens: important,
        }))
    })
    .await
}

async fn score(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ScoreView> {
    let input = parse_body::<ScoreRequest>(&body)?.into_input()?;
    blocking(move || {
        let example = Example {
            id: "request".into(),
            input,
            label: 0,
        };
        Ok(Json(lambda_max(&state.clf, &example)?.into()))
    })
    .await
}

async fn perturb(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<PerturbResponse> {
    let req: PerturbRequest = parse_body(&body)?;
    blocking(move || {
        let original = Example::text("original", req.text, 0);
        let changed = apply_substitutions(
            &original,
            &SubstitutionSpec {
                substitutions: req.substitutions,
            },
        )?;
        let a = lambda_max(&state.clf, &original)?;
        let b = lambda_max(&state.clf, &changed)?;
        let Input::Text(perturbed_text) = changed.input else {
            unreachable!("substitutions keep text inputs")
        };
        Ok(Json(PerturbResponse {
            delta: b.lambda_max - a.lambda_max,
            flipped: a.prediction != b.prediction,
            original: a.into(),
            perturbed: b.into(),
            perturbed_text,
        }))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/examples", get(list_examples))
        .route("/examples/{id}", get(example_detail))
        .route("/score", post(score))
        .route("/perturb", post(perturb))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} examples for model {} on http://{}",
        state.len(),
        state.model_hash,
        listener.local_addr()?
    );
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
