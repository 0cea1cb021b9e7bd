//! Serves a chain over HTTP under `/chain`, so nodes in other processes can
//! share one simulated ledger through [`RemoteChain`](super::RemoteChain).

use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{Address, ChainAdapter, LedgerError, MicroAlgo, PaymentRequest};

type Chain = Arc<dyn ChainAdapter>;

#[derive(Debug, Serialize, Deserialize)]
pub struct LookupParams {
    pub recipient: Address,
    #[serde(default)]
    pub min_timestamp: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AddressParams {
    pub address: Address,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FaucetBody {
    pub address: Address,
    pub amount: MicroAlgo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BalanceReply {
    pub address: Address,
    pub balance: MicroAlgo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeeReply {
    pub fee: MicroAlgo,
}

pub struct ChainFailure(LedgerError);

impl IntoResponse for ChainFailure {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            LedgerError::Transport(_) | LedgerError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            LedgerError::Unsupported(_) => StatusCode::NOT_IMPLEMENTED,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = serde_json::json!({ "error": self.0.to_string(), "ledger": self.0 });
        (status, Json(body)).into_response()
    }
}

impl From<LedgerError> for ChainFailure {
    fn from(e: LedgerError) -> Self {
        ChainFailure(e)
    }
}

pub fn router(chain: Chain) -> Router {
    Router::new()
        .route("/chain/submit", post(submit))
        .route("/chain/lookup", get(lookup))
        .route("/chain/balance", get(balance))
        .route("/chain/history", get(history))
        .route("/chain/log", get(log))
        .route("/chain/faucet", post(faucet))
        .route("/chain/fee", get(fee))
        .with_state(chain)
}

async fn submit(
    State(chain): State<Chain>,
    Json(req): Json<PaymentRequest>,
) -> Result<impl IntoResponse, ChainFailure> {
    Ok(Json(chain.submit(req)?))
}

async fn lookup(State(chain): State<Chain>, Query(p): Query<LookupParams>) -> Result<impl IntoResponse, ChainFailure> {
    Ok(Json(chain.lookup(&p.recipient, p.min_timestamp)?))
}

async fn balance(
    State(chain): State<Chain>,
    Query(p): Query<AddressParams>,
) -> Result<impl IntoResponse, ChainFailure> {
    let balance = chain.balance(&p.address)?;
    Ok(Json(BalanceReply {
        address: p.address,
        balance,
    }))
}

async fn history(
    State(chain): State<Chain>,
    Query(p): Query<AddressParams>,
) -> Result<impl IntoResponse, ChainFailure> {
    Ok(Json(chain.history(&p.address)?))
}

async fn log(State(chain): State<Chain>) -> Result<impl IntoResponse, ChainFailure> {
    Ok(Json(chain.commit_log()?))
}

async fn faucet(State(chain): State<Chain>, Json(body): Json<FaucetBody>) -> Result<impl IntoResponse, ChainFailure> {
    Ok(Json(chain.faucet(&body.address, body.amount)?))
}

async fn fee(State(chain): State<Chain>) -> Json<FeeReply> {
    Json(FeeReply {
        fee: chain.network_fee(),
    })
}
