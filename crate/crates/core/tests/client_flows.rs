mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use common::Harness;
use predictchain::client::{Client, ClientConfig, ClientError, NameKind, OracleApi, SubmitRequest};
use predictchain::datastore::synthetic::sine_csv;
use predictchain::datastore::DatasetMeta;
use predictchain::ledger::{ChainAdapter, MicroAlgo};
use predictchain::models::ModelMeta;
use predictchain::oracle::{Oracle, OracleInfo, Quote};
use predictchain::protocol::Opcode;
use predictchain::tokenomics::PriceKind;
use serde_json::Value;
use tempfile::TempDir;

/// The in-process oracle behind a switch that simulates it going away.
struct Flaky {
    oracle: Arc<Oracle>,
    down: AtomicBool,
    calls: AtomicUsize,
}

impl Flaky {
    fn check(&self) -> Result<(), ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.down.load(Ordering::SeqCst) {
            Err(ClientError::Transport("connection refused".into()))
        } else {
            Ok(())
        }
    }
}

impl OracleApi for Flaky {
    fn quote(&self, kind: PriceKind, params: &BTreeMap<String, String>) -> Result<Quote, ClientError> {
        self.check()?;
        OracleApi::quote(self.oracle.as_ref(), kind, params)
    }
    fn datasets(&self) -> Result<Vec<DatasetMeta>, ClientError> {
        self.check()?;
        OracleApi::datasets(self.oracle.as_ref())
    }
    fn models(&self) -> Result<Vec<ModelMeta>, ClientError> {
        self.check()?;
        OracleApi::models(self.oracle.as_ref())
    }
    fn info(&self) -> Result<OracleInfo, ClientError> {
        self.check()?;
        OracleApi::info(self.oracle.as_ref())
    }
}

struct Setup {
    h: Harness,
    api: Arc<Flaky>,
    client: Arc<Client>,
    root: TempDir,
}

fn start_client(h: &Harness, api: &Arc<Flaky>, root: &TempDir) -> Arc<Client> {
    let mut config = ClientConfig::new(root.path());
    config.public_url = Some("http://client.test".into());
    let chain: Arc<dyn ChainAdapter> = h.chain.clone();
    Client::start(config, chain, api.clone()).unwrap()
}

fn setup() -> Setup {
    let h = Harness::new();
    let api = Arc::new(Flaky {
        oracle: h.oracle.clone(),
        down: AtomicBool::new(false),
        calls: AtomicUsize::new(0),
    });
    let root = tempfile::tempdir().unwrap();
    let client = start_client(&h, &api, &root);
    Setup { h, api, client, root }
}

fn upload_request(h: &Harness, user: &str, name: &str) -> SubmitRequest {
    let bytes = sine_csv(120, 0.1, 1).into_bytes();
    let link = h.inbox_file(&format!("{name}.csv"), &bytes);
    SubmitRequest {
        user: user.into(),
        op: Opcode::UpDataset.as_str().into(),
        args: BTreeMap::from([
            ("ds_name".to_string(), Value::from(name)),
            ("ds_link".to_string(), Value::from(link)),
            ("ds_size".to_string(), Value::from(bytes.len().to_string())),
        ]),
        max_price: None,
    }
}

#[test]
fn submit_pays_the_quote_and_queues_the_answer() {
    let Setup {
        mut h,
        client,
        root: _root,
        ..
    } = setup();
    client.faucet("alice", 50_000_000).unwrap();
    let before = client.account("alice").unwrap().balance;
    let req = upload_request(&h, "alice", "d");
    let receipt = client.submit(&req).unwrap();
    let size: u64 = req.args["ds_size"].as_str().unwrap().parse().unwrap();
    assert_eq!(receipt.price, size);
    let fee = h.chain.network_fee();
    assert_eq!(client.account("alice").unwrap().balance, before - receipt.price - fee);
    let txn = h
        .chain
        .lookup(&h.oracle_address(), 0)
        .unwrap()
        .into_iter()
        .find(|t| t.id == receipt.txn_id)
        .unwrap();
    assert_eq!(txn.amount, receipt.price);

    assert!(client.fetch_updates("alice").unwrap().is_empty());
    h.step();
    assert_eq!(client.poll(), 1);
    assert_eq!(client.poll(), 0);
    let updates = client.fetch_updates("alice").unwrap();
    assert_eq!(updates.len(), 1);
    assert_eq!(updates[0].op, Opcode::DatasetUp.as_str());
    assert_eq!(updates[0].name.as_deref(), Some("d"));
    assert_eq!(updates[0].status.as_deref(), Some("ok"));
    assert!(client.fetch_updates("alice").unwrap().is_empty());

    let names = client.names(NameKind::Datasets);
    assert_eq!(names.names, ["d"]);
    assert!(!names.stale);
    assert!(client.audit().unwrap().ok());
}

#[test]
fn rejected_submissions_touch_nothing_on_chain() {
    let Setup {
        h,
        client,
        api,
        root: _root,
    } = setup();
    client.faucet("bob", 1_000).unwrap();
    let len = h.chain.len();

    let calls = api.calls.load(Ordering::SeqCst);
    assert!(matches!(
        client.price("bogus_kind", &BTreeMap::new()),
        Err(ClientError::Input(_))
    ));
    assert_eq!(
        api.calls.load(Ordering::SeqCst),
        calls,
        "unknown kind must not reach the oracle"
    );

    let mut req = upload_request(&h, "bob", "d");
    assert!(matches!(
        client.submit(&req),
        Err(ClientError::InsufficientFunds { .. })
    ));

    client.faucet("bob", 100_000_000).unwrap();
    req.max_price = Some(10);
    assert!(matches!(
        client.submit(&req),
        Err(ClientError::PriceRose { max: 10, .. })
    ));

    req.max_price = None;
    req.args.remove("ds_size");
    assert!(matches!(client.submit(&req), Err(ClientError::Input(_))));
    req.op = Opcode::DatasetUp.as_str().into();
    assert!(matches!(client.submit(&req), Err(ClientError::Input(_))));

    assert!(matches!(client.account("bad name!"), Err(ClientError::Input(_))));
    assert_eq!(h.chain.len(), len + 1);
}

#[test]
fn names_fall_back_to_the_cache_when_the_oracle_is_down() {
    let Setup {
        mut h,
        client,
        api,
        root: _root,
    } = setup();
    client.faucet("alice", 50_000_000).unwrap();
    client.submit(&upload_request(&h, "alice", "cached")).unwrap();
    h.step();
    assert_eq!(client.names(NameKind::Datasets).names, ["cached"]);

    api.down.store(true, Ordering::SeqCst);
    let reply = client.names(NameKind::Datasets);
    assert!(reply.stale);
    assert_eq!(reply.names, ["cached"]);
    assert!(matches!(
        client.price("dataset_upload", &BTreeMap::from([("ds_size".into(), "1".into())])),
        Err(ClientError::Transport(_))
    ));
}

#[test]
fn undelivered_updates_and_accounts_survive_a_client_restart() {
    let Setup {
        mut h,
        client,
        api,
        root,
    } = setup();
    client.faucet("alice", 50_000_000).unwrap();
    client.submit(&upload_request(&h, "alice", "a1")).unwrap();
    client.submit(&upload_request(&h, "alice", "a2")).unwrap();
    h.step();
    client.poll();
    assert_eq!(client.fetch_updates("alice").unwrap().len(), 2);
    client.submit(&upload_request(&h, "alice", "a3")).unwrap();
    h.step();
    client.poll();
    drop(client);

    let client = start_client(&h, &api, &root);
    assert_eq!(client.users().len(), 1);
    client.poll();
    let updates = client.fetch_updates("alice").unwrap();
    assert_eq!(updates.len(), 1);
    assert_eq!(updates[0].name.as_deref(), Some("a3"));
    client.poll();
    assert!(client.fetch_updates("alice").unwrap().is_empty());
}

#[test]
fn blobs_round_trip_with_fetchable_links() {
    let Setup {
        client, root: _root, ..
    } = setup();
    let receipt = client.put_blob(b"a,b\n1,2\n").unwrap();
    let hash = receipt.cas.trim_start_matches("cas://");
    assert_eq!(receipt.link, format!("http://client.test/api/blobs/{hash}"));
    assert_eq!(receipt.size, 8);
    assert_eq!(client.get_blob(hash).unwrap(), b"a,b\n1,2\n");
    assert!(client.get_blob(&"0".repeat(64)).is_err());
}

#[test]
fn history_decodes_notes() {
    let Setup {
        mut h,
        client,
        root: _root,
        ..
    } = setup();
    client.faucet("alice", 50_000_000).unwrap();
    client.submit(&upload_request(&h, "alice", "hx")).unwrap();
    h.step();
    let address = client.account("alice").unwrap().address;
    let history = client.history(&address).unwrap();
    let ops: Vec<Option<String>> = history
        .iter()
        .map(|e| e.decoded.as_ref().map(|d| d.op.clone()))
        .collect();
    assert_eq!(
        ops,
        [
            None,
            Some(Opcode::UpDataset.as_str().into()),
            Some(Opcode::DatasetUp.as_str().into())
        ]
    );
    let spent: MicroAlgo = history
        .iter()
        .filter(|e| e.txn.sender == address)
        .map(|e| e.txn.amount)
        .sum();
    assert_eq!(spent, history[1].txn.amount);
}
