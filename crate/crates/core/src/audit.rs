//! Chain audit: rebuilds balances, the reward schedule and both registries
//! from the commit log alone, then checks every request was answered once,
//! refunds returned the full payment, and every reward matches the reward
//! equations at the accuracy the oracle reported.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datastore::DatasetMeta;
use crate::decimal::Decimal;
use crate::ledger::{replay, Address, ChainAdapter, LedgerError, MicroAlgo, Transaction};
use crate::models::ModelMeta;
use crate::protocol::{decode_note, NoteEnvelope, Opcode, STATUS_ERROR, STATUS_OK};
use crate::tokenomics::{
    dataset_reward, replay_mult_updates, training_reward, PriceContext, PriceKind, RewardSchedule,
};

/// A dataset as recorded by its `<DATASET_UP>` response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainDataset {
    pub ds_name: String,
    pub ds_link: String,
    pub ds_size: u64,
    pub uploader: Address,
    pub request: String,
}

/// A model as recorded by its `<MODEL_TRAINED>` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    pub model_name: String,
    pub ds_name: String,
    pub trainer: Address,
    pub accuracy: String,
    pub loss: String,
    pub complexity: String,
    pub link: String,
    pub request: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub transactions: usize,
    pub requests: usize,
    pub responses: usize,
    pub failed_requests: usize,
    pub reward_payments: usize,
    pub rewards_paid: MicroAlgo,
    pub refunds_paid: MicroAlgo,
    /// Request payments kept by the oracle (payments minus refunds).
    pub oracle_income: MicroAlgo,
    pub datasets: Vec<ChainDataset>,
    pub models: Vec<ChainModel>,
    /// Each entry describes one violated check. Empty means the audit passed.
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

struct Request<'a> {
    txn: &'a Transaction,
    env: NoteEnvelope,
    op: Opcode,
}

/// Audits `log` for the oracle at `oracle`. `live_balance` reports each
/// account's current balance; `datasets` and `models` are the oracle's
/// registries, compared against what the chain records.
pub fn audit(
    log: &[Transaction],
    fee: MicroAlgo,
    oracle: &Address,
    live_balance: &dyn Fn(&Address) -> Result<MicroAlgo, LedgerError>,
    datasets: &[DatasetMeta],
    models: &[ModelMeta],
) -> Result<AuditReport, LedgerError> {
    let mut report = AuditReport {
        transactions: log.len(),
        ..AuditReport::default()
    };
    let problems = &mut report.problems;

    match replay(log, fee) {
        Ok(sheet) => {
            let addresses: BTreeSet<&Address> = log.iter().flat_map(|t| [&t.sender, &t.receiver]).collect();
            for addr in addresses {
                let live = live_balance(addr)?;
                if sheet.balance(addr) != live {
                    problems.push(format!(
                        "balance of {addr}: replay {} != live {live}",
                        sheet.balance(addr)
                    ));
                }
            }
        }
        Err(e) => problems.push(format!("commit log does not replay: {e}")),
    }

    let book = replay_mult_updates(RewardSchedule::default(), log, oracle);
    let mut requests: HashMap<&str, Request> = HashMap::new();
    let mut responses: BTreeMap<String, Vec<(&Transaction, NoteEnvelope)>> = BTreeMap::new();
    let mut rewards: Vec<(&Transaction, NoteEnvelope)> = Vec::new();
    for txn in log {
        let Ok(env) = decode_note(&txn.note) else { continue };
        let Ok(op) = env.opcode() else { continue };
        if &txn.receiver == oracle && &txn.sender != oracle && op.is_request() {
            requests.insert(&txn.id, Request { txn, env, op });
        } else if &txn.sender == oracle && op.is_response() {
            let req = env.get("req").unwrap_or_default();
            responses.entry(req).or_default().push((txn, env));
        } else if &txn.sender == oracle && op == Opcode::Reward {
            rewards.push((txn, env));
        }
    }
    report.requests = requests.len();
    report.responses = responses.values().map(Vec::len).sum();

    let mut ids: Vec<&&str> = requests.keys().collect();
    ids.sort();
    for id in ids {
        let req = &requests[*id];
        let answers = responses.get(*id).map(Vec::as_slice).unwrap_or(&[]);
        let expected_op = req.op.response().expect("request").as_str();
        match answers {
            [] => problems.push(format!("request {id} has no response")),
            [(txn, env)] => {
                if env.op != expected_op {
                    problems.push(format!(
                        "request {id} answered with {} instead of {expected_op}",
                        env.op
                    ));
                }
                if txn.receiver != req.txn.sender {
                    problems.push(format!("response to {id} sent to {} not the payer", txn.receiver));
                }
                match env.get("status").as_deref() {
                    Some(STATUS_OK) if txn.amount != 0 => {
                        problems.push(format!("successful response to {id} moved {} microALGO", txn.amount))
                    }
                    Some(STATUS_OK) => {}
                    Some(STATUS_ERROR) => {
                        report.failed_requests += 1;
                        report.refunds_paid += txn.amount;
                        if txn.amount != req.txn.amount {
                            problems.push(format!(
                                "refund for {id} is {} but the request paid {}",
                                txn.amount, req.txn.amount
                            ));
                        }
                    }
                    other => problems.push(format!("response to {id} has status {other:?}")),
                }
            }
            many => problems.push(format!("request {id} has {} responses", many.len())),
        }
        report.oracle_income += req.txn.amount;
    }
    report.oracle_income = report.oracle_income.saturating_sub(report.refunds_paid);
    for req in responses.keys() {
        if !requests.contains_key(req.as_str()) {
            problems.push(format!("response for unknown request {req:?}"));
        }
    }

    // registries as recorded on-chain
    let ok_response = |op: Opcode| {
        responses
            .values()
            .flatten()
            .filter(move |(_, e)| e.op == op.as_str() && e.get("status").as_deref() == Some(STATUS_OK))
    };
    for (txn, env) in ok_response(Opcode::DatasetUp) {
        report.datasets.push(ChainDataset {
            ds_name: env.get("ds_name").unwrap_or_default(),
            ds_link: env.get("ds_link").unwrap_or_default(),
            ds_size: env.get("ds_size").and_then(|s| s.parse().ok()).unwrap_or(0),
            uploader: txn.receiver.clone(),
            request: env.get("req").unwrap_or_default(),
        });
    }
    for (txn, env) in ok_response(Opcode::ModelTrained) {
        report.models.push(ChainModel {
            model_name: env.get("model_name").unwrap_or_default(),
            ds_name: env.get("ds_name").unwrap_or_default(),
            trainer: txn.receiver.clone(),
            accuracy: env.get("accuracy").unwrap_or_default(),
            loss: env.get("loss").unwrap_or_default(),
            complexity: env.get("complexity").unwrap_or_default(),
            link: env.get("link").unwrap_or_default(),
            request: env.get("req").unwrap_or_default(),
        });
    }
    report.datasets.sort_by(|a, b| a.ds_name.cmp(&b.ds_name));
    report.models.sort_by(|a, b| a.model_name.cmp(&b.model_name));
    compare_registries(&report.datasets, &report.models, datasets, models, problems);

    // prices paid for successful requests
    let chain_ds: HashMap<&str, &ChainDataset> = report.datasets.iter().map(|d| (d.ds_name.as_str(), d)).collect();
    let chain_models: HashMap<&str, &ChainModel> = report.models.iter().map(|m| (m.model_name.as_str(), m)).collect();
    for (req_id, answers) in &responses {
        let (Some(req), [(_, env)]) = (requests.get(req_id.as_str()), answers.as_slice()) else {
            continue;
        };
        if env.get("status").as_deref() != Some(STATUS_OK) {
            continue;
        }
        let ctx = match req.op {
            Opcode::UpDataset => req
                .env
                .get("ds_size")
                .and_then(|s| s.parse().ok())
                .map(PriceContext::DatasetSize),
            Opcode::TrainModel => env
                .get("complexity")
                .and_then(|s| s.parse().ok())
                .map(PriceContext::Complexity),
            _ => req
                .env
                .get("model_name")
                .and_then(|m| chain_models.get(m.as_str()))
                .and_then(|m| m.complexity.parse().ok())
                .map(PriceContext::Complexity),
        };
        let kind = PriceKind::for_request(req.op).expect("request");
        match ctx.map(|c| book.at_round(req.txn.round).price(kind, &c)) {
            Some(Ok(price)) if req.txn.amount < price => {
                problems.push(format!("request {req_id} paid {} below price {price}", req.txn.amount))
            }
            Some(Ok(_)) => {}
            _ => problems.push(format!("cannot price request {req_id}")),
        }
    }

    // rewards
    for (txn, env) in &rewards {
        report.reward_payments += 1;
        report.rewards_paid += txn.amount;
        let req_id = env.get("req").unwrap_or_default();
        let Some(req) = requests.get(req_id.as_str()) else {
            problems.push(format!("reward {} names unknown request {req_id:?}", txn.id));
            continue;
        };
        let Some([(_, resp)]) = responses.get(&req_id).map(Vec::as_slice) else {
            problems.push(format!(
                "reward {} for request {req_id} without a single response",
                txn.id
            ));
            continue;
        };
        if resp.get("status").as_deref() != Some(STATUS_OK) {
            problems.push(format!("reward {} paid for failed request {req_id}", txn.id));
            continue;
        }
        let reported = resp.get("accuracy");
        if env.get("accuracy") != reported {
            problems.push(format!(
                "reward {} accuracy {:?} differs from reported {:?}",
                txn.id,
                env.get("accuracy"),
                reported
            ));
            continue;
        }
        let Some(acc) = reported.and_then(|a| a.parse::<Decimal>().ok()) else {
            problems.push(format!("reward {} has no usable accuracy", txn.id));
            continue;
        };
        let schedule = book.at_round(req.txn.round);
        let ref_name = env.get("ref_name").unwrap_or_default();
        let (expected, receiver) = match env.get("reason").as_deref() {
            Some("dataset_usage") => {
                let Some(ds) = chain_ds.get(ref_name.as_str()) else {
                    problems.push(format!("reward {} names unknown dataset {ref_name:?}", txn.id));
                    continue;
                };
                (dataset_reward(ds.ds_size, &schedule.dataset_mult, &acc), &ds.uploader)
            }
            Some("model_training") => {
                let Some(m) = chain_models.get(ref_name.as_str()) else {
                    problems.push(format!("reward {} names unknown model {ref_name:?}", txn.id));
                    continue;
                };
                (training_reward(&schedule.training_mult, &acc), &m.trainer)
            }
            other => {
                problems.push(format!("reward {} has reason {other:?}", txn.id));
                continue;
            }
        };
        match expected {
            Ok(amount) if amount == txn.amount => {}
            Ok(amount) => problems.push(format!("reward {} paid {} expected {amount}", txn.id, txn.amount)),
            Err(e) => problems.push(format!("reward {}: {e}", txn.id)),
        }
        if &txn.receiver != receiver {
            problems.push(format!(
                "reward {} paid to {} expected {receiver}",
                txn.id, txn.receiver
            ));
        }
    }
    Ok(report)
}

fn compare_registries(
    chain_ds: &[ChainDataset],
    chain_models: &[ChainModel],
    datasets: &[DatasetMeta],
    models: &[ModelMeta],
    problems: &mut Vec<String>,
) {
    let live: BTreeMap<&str, &DatasetMeta> = datasets.iter().map(|d| (d.ds_name.as_str(), d)).collect();
    for d in chain_ds {
        match live.get(d.ds_name.as_str()) {
            Some(m) if m.ds_link == d.ds_link && m.ds_size == d.ds_size && m.uploader == d.uploader => {}
            Some(_) => problems.push(format!("dataset {:?} differs between chain and registry", d.ds_name)),
            None => problems.push(format!("dataset {:?} on chain but not in registry", d.ds_name)),
        }
    }
    if live.len() != chain_ds.len() {
        problems.push(format!(
            "registry holds {} datasets, chain records {}",
            live.len(),
            chain_ds.len()
        ));
    }
    let live: BTreeMap<&str, &ModelMeta> = models.iter().map(|m| (m.model_name.as_str(), m)).collect();
    for c in chain_models {
        let same = |m: &ModelMeta| {
            m.ds_name == c.ds_name
                && m.trainer == c.trainer
                && m.link == c.link
                && m.complexity.to_string() == c.complexity
                && c.accuracy.parse::<f64>().ok() == Some(m.accuracy)
                && c.loss.parse::<f64>().ok() == Some(m.final_loss)
        };
        match live.get(c.model_name.as_str()) {
            Some(m) if same(m) => {}
            Some(_) => problems.push(format!("model {:?} differs between chain and registry", c.model_name)),
            None => problems.push(format!("model {:?} on chain but not in registry", c.model_name)),
        }
    }
    if live.len() != chain_models.len() {
        problems.push(format!(
            "registry holds {} models, chain records {}",
            live.len(),
            chain_models.len()
        ));
    }
}

/// [`audit`] against a live chain.
pub fn audit_chain(
    chain: &dyn ChainAdapter,
    oracle: &Address,
    datasets: &[DatasetMeta],
    models: &[ModelMeta],
) -> Result<AuditReport, LedgerError> {
    let log = chain.commit_log()?;
    audit(
        &log,
        chain.network_fee(),
        oracle,
        &|a| chain.balance(a),
        datasets,
        models,
    )
}
