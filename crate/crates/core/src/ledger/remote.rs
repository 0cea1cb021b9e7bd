use super::http::{BalanceReply, FaucetBody, FeeReply};
use super::{Address, ChainAdapter, LedgerError, MicroAlgo, PaymentRequest, Transaction};
use crate::net::{HttpError, JsonHttp};

/// Chain adapter for a ledger served by another node's `/chain` endpoints.
pub struct RemoteChain {
    http: JsonHttp,
    fee: MicroAlgo,
}

impl RemoteChain {
    /// Connects and fetches the network fee once.
    pub fn connect(base_url: &str) -> Result<Self, LedgerError> {
        let http = JsonHttp::new(base_url);
        let fee: FeeReply = http.get("/chain/fee", &[]).map_err(map_err)?;
        Ok(Self { http, fee: fee.fee })
    }
}

fn map_err(e: HttpError) -> LedgerError {
    match e {
        HttpError::Transport(m) => LedgerError::Transport(m),
        HttpError::Api { body, status } => body
            .get("ledger")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_else(|| LedgerError::Transport(format!("status {status}: {body}"))),
    }
}

impl ChainAdapter for RemoteChain {
    fn submit(&self, req: PaymentRequest) -> Result<Transaction, LedgerError> {
        self.http.post("/chain/submit", &req).map_err(map_err)
    }

    fn lookup(&self, recipient: &Address, min_timestamp: i64) -> Result<Vec<Transaction>, LedgerError> {
        self.http
            .get(
                "/chain/lookup",
                &[
                    ("recipient", recipient.to_string()),
                    ("min_timestamp", min_timestamp.to_string()),
                ],
            )
            .map_err(map_err)
    }

    fn balance(&self, address: &Address) -> Result<MicroAlgo, LedgerError> {
        let reply: BalanceReply = self
            .http
            .get("/chain/balance", &[("address", address.to_string())])
            .map_err(map_err)?;
        Ok(reply.balance)
    }

    fn history(&self, address: &Address) -> Result<Vec<Transaction>, LedgerError> {
        self.http
            .get("/chain/history", &[("address", address.to_string())])
            .map_err(map_err)
    }

    fn commit_log(&self) -> Result<Vec<Transaction>, LedgerError> {
        self.http.get("/chain/log", &[]).map_err(map_err)
    }

    fn faucet(&self, address: &Address, amount: MicroAlgo) -> Result<Transaction, LedgerError> {
        self.http
            .post(
                "/chain/faucet",
                &FaucetBody {
                    address: address.clone(),
                    amount,
                },
            )
            .map_err(map_err)
    }

    fn network_fee(&self) -> MicroAlgo {
        self.fee
    }
}
