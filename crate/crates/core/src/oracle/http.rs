//! Oracle read endpoints for clients, plus the schedule admin endpoint.
//! Price queries are answered here so they never touch the chain.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Oracle, OracleError};
use crate::decimal::Decimal;
use crate::models::ModelError;
use crate::tokenomics::{PriceKind, ScheduleField, TokenomicsError};

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

/// HTTP status for an oracle error: caller mistakes are 4xx, the rest 500.
pub fn status_of(e: &OracleError) -> StatusCode {
    match e {
        OracleError::BadQuery(_)
        | OracleError::Tokenomics(TokenomicsError::UnknownPriceKind(_) | TokenomicsError::InvalidValue { .. })
        | OracleError::Tokenomics(TokenomicsError::UnknownField(_))
        | OracleError::Model(ModelError::UnknownArchetype(_) | ModelError::InvalidHyperparams { .. }) => {
            StatusCode::BAD_REQUEST
        }
        OracleError::UnknownDataset(_) | OracleError::UnknownModel(_) => StatusCode::NOT_FOUND,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<OracleError> for ApiError {
    fn from(e: OracleError) -> Self {
        ApiError(status_of(&e), e.to_string())
    }
}

impl From<TokenomicsError> for ApiError {
    fn from(e: TokenomicsError) -> Self {
        OracleError::from(e).into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScheduleUpdate {
    pub field: String,
    pub value: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScheduleUpdated {
    pub field: String,
    pub old: Decimal,
    pub new: Decimal,
    pub txn_id: String,
    pub round: u64,
}

type Shared = Arc<Oracle>;

/// Routes under `/`: `price`, `datasets`, `models`, `schedule`, `jobs`,
/// `info`, `health`.
pub fn router(oracle: Shared) -> Router {
    Router::new()
        .route("/price", get(price))
        .route("/datasets", get(datasets))
        .route("/models", get(models))
        .route("/schedule", get(schedule).post(update_schedule))
        .route("/jobs", get(jobs))
        .route("/info", get(info))
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .with_state(oracle)
}

async fn price(
    State(oracle): State<Shared>,
    Query(mut params): Query<BTreeMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let kind: PriceKind = params
        .remove("kind")
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing kind".into()))?
        .parse()?;
    Ok(Json(oracle.quote(kind, &params)?))
}

async fn datasets(State(oracle): State<Shared>) -> impl IntoResponse {
    Json(oracle.list_datasets())
}

async fn models(State(oracle): State<Shared>) -> impl IntoResponse {
    Json(oracle.list_models())
}

async fn schedule(State(oracle): State<Shared>) -> impl IntoResponse {
    Json(oracle.schedule())
}

async fn update_schedule(
    State(oracle): State<Shared>,
    Json(body): Json<ScheduleUpdate>,
) -> Result<impl IntoResponse, ApiError> {
    let field = ScheduleField::parse_any(&body.field)?;
    let value: Decimal = body
        .value
        .parse()
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, format!("bad value {:?}", body.value)))?;
    let old = oracle.schedule().get(field).clone();
    let txn = tokio::task::spawn_blocking(move || oracle.update_schedule(field, value))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let new = crate::protocol::decode_note(&txn.note)
        .ok()
        .and_then(|e| e.get("new"))
        .and_then(|v| v.parse().ok())
        .unwrap_or_default();
    Ok(Json(ScheduleUpdated {
        field: field.file_key().to_string(),
        old,
        new,
        txn_id: txn.id,
        round: txn.round,
    }))
}

async fn jobs(State(oracle): State<Shared>) -> impl IntoResponse {
    Json(oracle.jobs().list())
}

async fn info(State(oracle): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        tokio::task::spawn_blocking(move || oracle.info())
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??,
    ))
}
