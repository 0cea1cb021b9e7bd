//! Client gateway under `/api`, the surface the web UI and CLI talk to.
//! Errors are `{"error": message, "kind": tag}` with a status that tells
//! caller mistakes (4xx) from oracle or chain trouble (5xx).

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Client, ClientError, NameKind, SubmitRequest};
use crate::datastore::DatastoreError;
use crate::ledger::{Address, LedgerError, MicroAlgo};

/// Largest blob accepted by `POST /api/blobs`.
pub const MAX_BLOB_BYTES: usize = 256 * 1024 * 1024;

pub struct ApiError(StatusCode, &'static str, String);

impl ApiError {
    fn internal(msg: impl ToString) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.2, "kind": self.1 }))).into_response()
    }
}

impl From<ClientError> for ApiError {
    fn from(e: ClientError) -> Self {
        let (status, kind) = match &e {
            ClientError::Input(_) => (StatusCode::BAD_REQUEST, "input"),
            ClientError::UnknownUser(_) => (StatusCode::NOT_FOUND, "unknown_user"),
            ClientError::Transport(_) => (StatusCode::BAD_GATEWAY, "oracle_unreachable"),
            ClientError::Oracle { status, .. } => (
                StatusCode::from_u16(*status).unwrap_or(StatusCode::BAD_GATEWAY),
                "oracle",
            ),
            ClientError::PriceRose { .. } => (StatusCode::CONFLICT, "price_rose"),
            ClientError::InsufficientFunds { .. } | ClientError::Ledger(LedgerError::InsufficientBalance { .. }) => {
                (StatusCode::PAYMENT_REQUIRED, "insufficient_funds")
            }
            ClientError::Ledger(LedgerError::Transport(_)) => (StatusCode::BAD_GATEWAY, "chain_unreachable"),
            ClientError::Ledger(_) => (StatusCode::UNPROCESSABLE_ENTITY, "ledger"),
            ClientError::Data(DatastoreError::MissingObject(_) | DatastoreError::BadLink(_)) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            ClientError::Data(_) | ClientError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError(status, kind, e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UserParams {
    pub user: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NamesParams {
    pub kind: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct HistoryParams {
    pub address: Option<Address>,
    pub user: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FaucetRequest {
    pub user: String,
    pub amount: MicroAlgo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FaucetReply {
    pub txn_id: String,
    pub address: Address,
    pub balance: MicroAlgo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UserEntry {
    pub user: String,
    pub address: Address,
}

type Shared = Arc<Client>;

/// Runs blocking client work off the async executor.
async fn blocking<T, F>(client: Shared, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Client) -> Result<T, ClientError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&client))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
        .map_err(ApiError::from)
}

pub fn router(client: Shared) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/api/price", get(price))
        .route("/api/names", get(names))
        .route("/api/updates", get(updates))
        .route("/api/history", get(history))
        .route("/api/account", get(account))
        .route("/api/users", get(users))
        .route("/api/audit", get(audit))
        .route("/api/info", get(info))
        .route("/api/submit", post(submit))
        .route("/api/faucet", post(faucet))
        .route(
            "/api/blobs",
            post(put_blob).layer(DefaultBodyLimit::max(MAX_BLOB_BYTES)),
        )
        .route("/api/blobs/{hash}", get(get_blob))
        .with_state(client)
}

async fn price(
    State(client): State<Shared>,
    Query(mut params): Query<BTreeMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let kind = params
        .remove("kind")
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "input", "missing kind".into()))?;
    blocking(client, move |c| c.price(&kind, &params)).await
}

async fn names(State(client): State<Shared>, Query(p): Query<NamesParams>) -> Result<impl IntoResponse, ApiError> {
    let kind: NameKind = p.kind.parse()?;
    blocking(client, move |c| Ok(c.names(kind))).await
}

async fn updates(State(client): State<Shared>, Query(p): Query<UserParams>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| {
        c.ensure_user(&p.user)?;
        c.fetch_updates(&p.user)
    })
    .await
}

async fn history(State(client): State<Shared>, Query(p): Query<HistoryParams>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| {
        let address = match (p.address, p.user) {
            (Some(a), _) => a,
            (None, Some(u)) => c.ensure_user(&u)?,
            (None, None) => return Err(ClientError::Input("history needs address or user".into())),
        };
        c.history(&address)
    })
    .await
}

async fn account(State(client): State<Shared>, Query(p): Query<UserParams>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| c.account(&p.user)).await
}

async fn users(State(client): State<Shared>) -> impl IntoResponse {
    let list: Vec<UserEntry> = client
        .users()
        .into_iter()
        .map(|(user, address)| UserEntry { user, address })
        .collect();
    Json(list)
}

async fn audit(State(client): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, |c| c.audit()).await
}

async fn info(State(client): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, |c| {
        Ok(json!({
            "oracle_address": c.oracle_address(),
            "network_fee": c.chain().network_fee(),
            "users": c.users().len(),
        }))
    })
    .await
}

async fn submit(State(client): State<Shared>, Json(req): Json<SubmitRequest>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| c.submit(&req)).await
}

async fn faucet(State(client): State<Shared>, Json(req): Json<FaucetRequest>) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| {
        let txn = c.faucet(&req.user, req.amount)?;
        let account = c.account(&req.user)?;
        Ok(FaucetReply {
            txn_id: txn.id,
            address: account.address,
            balance: account.balance,
        })
    })
    .await
}

async fn put_blob(State(client): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    blocking(client, move |c| c.put_blob(&body)).await
}

async fn get_blob(State(client): State<Shared>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            "input",
            format!("bad blob hash {hash:?}"),
        ));
    }
    let Json(bytes) = blocking(client, move |c| c.get_blob(&hash)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}
