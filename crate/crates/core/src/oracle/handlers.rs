//! Job execution: the three request handlers and effect delivery.
//!
//! A job's effects are its reward payments followed by exactly one response
//! payment. Before sending, the oracle lists what it already sent for the
//! request id and skips those, so re-running a job after a crash completes
//! it without duplicating payments. Registry entries record the request id
//! that created them, so a re-run reuses a finished upload or training.

use std::io::Read;
use std::path::{Component, Path};
use std::time::Duration;

use tracing::info;

use super::{train_complexity, JobStatus, Oracle, OracleError, PendingJob, Settlement};
use crate::datastore::{sha256_hex, DatastoreError, Link, SaveRequest};
use crate::decimal::Decimal;
use crate::ledger::{Address, MicroAlgo, PaymentRequest, Transaction};
use crate::models::{train, Archetype, Hyperparams, ModelError, ModelInfo, TrainOptions};
use crate::protocol::{
    decode_note, encode_note, float_to_wire, validate_args, NoteEnvelope, Opcode, ProtocolError, QueryInput, ValidArgs,
    STATUS_ERROR, STATUS_OK,
};
use crate::tokenomics::{dataset_reward, oracle_fee, training_reward, PriceContext, PriceKind, RewardSchedule};

/// Longest multi-step query the oracle answers.
pub const MAX_QUERY_STEPS: u64 = 32;
/// Argument values in response notes are cut to this many characters when
/// a note would exceed the size cap.
const FIT_VALUE_CHARS: usize = 96;

pub(crate) enum JobError {
    /// The request cannot be served; refund it with this error code.
    Rejected { code: &'static str, detail: String },
    /// The oracle could not finish right now; retry later.
    Infra(OracleError),
}

fn reject(code: &'static str, detail: impl Into<String>) -> JobError {
    JobError::Rejected {
        code,
        detail: detail.into(),
    }
}

fn data_err(code: &'static str, e: DatastoreError) -> JobError {
    match e {
        DatastoreError::Io(_) => JobError::Infra(e.into()),
        other => reject(code, other.to_string()),
    }
}

fn model_err(code: &'static str, e: ModelError) -> JobError {
    match e {
        ModelError::Data(d) => data_err(code, d),
        ModelError::Diverged { .. } => reject("diverged", e.to_string()),
        other => reject(code, other.to_string()),
    }
}

impl From<OracleError> for JobError {
    fn from(e: OracleError) -> Self {
        JobError::Infra(e)
    }
}

/// A payment the oracle owes for a job.
struct Effect {
    receiver: Address,
    amount: MicroAlgo,
    envelope: NoteEnvelope,
}

impl Effect {
    /// Identity of the effect within its request: opcode plus reward reason.
    fn key(env: &NoteEnvelope) -> (String, Option<String>) {
        (env.op.clone(), env.get("reason"))
    }
}

struct Success {
    response: NoteEnvelope,
    rewards: Vec<Effect>,
}

fn reward_note(reason: &str, ref_name: &str, accuracy: &str, req: &str, mult: &Decimal) -> NoteEnvelope {
    NoteEnvelope::new(Opcode::Reward)
        .arg("reason", reason)
        .arg("ref_name", ref_name)
        .arg("accuracy", accuracy)
        .arg("req", req)
        .arg("mult", mult.to_string())
}

/// Accuracy as carried on the wire, and the exact decimal rewards use.
fn wire_accuracy(accuracy: f64) -> Result<(String, Decimal), JobError> {
    let text = float_to_wire(accuracy);
    let exact = text
        .parse()
        .map_err(|_| reject("training_failed", format!("accuracy {text} is not a decimal")))?;
    Ok((text, exact))
}

fn truncate(s: &str, chars: usize) -> String {
    s.chars().take(chars).collect()
}

/// Encodes `env`, cutting long values if the note would exceed the cap.
fn encode_fitted(env: &NoteEnvelope) -> Result<Vec<u8>, ProtocolError> {
    match encode_note(env) {
        Err(ProtocolError::Oversize { .. }) => {}
        other => return other,
    }
    let mut cut = env.clone();
    for v in cut.args.values_mut() {
        if let Some(s) = v.as_str() {
            if s.chars().count() > FIT_VALUE_CHARS {
                *v = serde_json::Value::String(truncate(s, FIT_VALUE_CHARS));
            }
        }
    }
    if let Err(ProtocolError::Oversize { .. }) = encode_note(&cut) {
        cut.args.remove("detail");
    }
    encode_note(&cut)
}

/// The argument naming the subject of a request, and its response key.
fn name_keys(op: Opcode) -> (&'static str, &'static str) {
    match op {
        Opcode::UpDataset => ("ds_name", "ds_name"),
        Opcode::TrainModel => ("new_model_name", "model_name"),
        _ => ("model_name", "model_name"),
    }
}

impl Oracle {
    /// Effects already on-chain for a request, in commit order.
    fn sent_for(&self, req: &str) -> Result<Vec<(Transaction, NoteEnvelope)>, OracleError> {
        let me = &self.config.address;
        Ok(self
            .chain
            .history(me)?
            .into_iter()
            .filter(|t| &t.sender == me)
            .filter_map(|t| decode_note(&t.note).ok().map(|env| (t, env)))
            .filter(|(_, env)| env.get("req").as_deref() == Some(req))
            .collect())
    }

    fn send(&self, effect: &Effect) -> Result<Transaction, OracleError> {
        let note = encode_fitted(&effect.envelope)?;
        Ok(self.chain.submit(PaymentRequest::new(
            self.config.address.clone(),
            effect.receiver.clone(),
            effect.amount,
            note,
        ))?)
    }

    /// Executes one claimed job to completion. An `Err` means the job is
    /// still owed and should be retried.
    pub(crate) fn process(&self, job: &PendingJob) -> Result<(), OracleError> {
        let id = job.request_txn_id.as_str();
        let op: Opcode = job.op.parse()?;
        let response_op = op.response().expect("jobs are requests").as_str();
        let sent = self.sent_for(id)?;
        let schedule = self.schedule_at(job.round);

        if let Some((txn, env)) = sent.iter().find(|(_, e)| e.op == response_op) {
            let ok = env.get("status").as_deref() == Some(STATUS_OK);
            let settlement = settle(job, &schedule, ok, txn.amount, &sent);
            let status = if ok { JobStatus::Done } else { JobStatus::Failed };
            let error = env.get("error");
            self.jobs.finish(id, status, error, Some(settlement))?;
            return Ok(());
        }

        let outcome = match op {
            Opcode::UpDataset => self.up_dataset(job, &schedule),
            Opcode::TrainModel => self.train_model(job, &schedule),
            _ => self.query_model(job, &schedule),
        };
        let already: Vec<_> = sent.iter().map(|(_, e)| Effect::key(e)).collect();
        let mut delivered: Vec<(Transaction, NoteEnvelope)> = sent.clone();
        let (response, refund, error) = match outcome {
            Ok(success) => {
                for reward in success.rewards {
                    if !already.contains(&Effect::key(&reward.envelope)) {
                        let txn = self.send(&reward)?;
                        delivered.push((txn, reward.envelope));
                    }
                }
                (success.response, 0, None)
            }
            Err(JobError::Rejected { code, detail }) => {
                let (name_key, response_key) = name_keys(op);
                let name = job
                    .args
                    .get(name_key)
                    .and_then(|v| v.as_str())
                    .filter(|s| !s.is_empty())
                    .unwrap_or("unknown");
                let env = NoteEnvelope::new(op.response().expect("request"))
                    .arg(response_key, name)
                    .arg("status", STATUS_ERROR)
                    .arg("error", code)
                    .arg("detail", detail.as_str())
                    .arg("req", id);
                info!(id, code, %detail, "request rejected, refunding");
                (env, job.paid, Some(code.to_string()))
            }
            Err(JobError::Infra(e)) => return Err(e),
        };
        let ok = error.is_none();
        let response = Effect {
            receiver: job.payer.clone(),
            amount: refund,
            envelope: response.arg("req", id),
        };
        let txn = self.send(&response)?;
        delivered.push((txn, response.envelope));
        let settlement = settle(job, &schedule, ok, refund, &delivered);
        if settlement.shortfall > 0 {
            info!(
                id,
                shortfall = settlement.shortfall,
                "rewards exceeded the request payment"
            );
        }
        let status = if ok { JobStatus::Done } else { JobStatus::Failed };
        self.jobs.finish(id, status, error, Some(settlement))?;
        Ok(())
    }

    fn check_paid(
        &self,
        job: &PendingJob,
        schedule: &RewardSchedule,
        kind: PriceKind,
        ctx: &PriceContext,
    ) -> Result<(), JobError> {
        let price = schedule
            .price(kind, ctx)
            .map_err(|e| reject("invalid_args", e.to_string()))?;
        if job.paid < price {
            return Err(reject("underpaid", format!("paid {}, price {price}", job.paid)));
        }
        Ok(())
    }

    fn validated(&self, job: &PendingJob, op: Opcode) -> Result<ValidArgs, JobError> {
        validate_args(op, &job.args).map_err(|e| reject("invalid_args", e.to_string()))
    }

    fn up_dataset(&self, job: &PendingJob, schedule: &RewardSchedule) -> Result<Success, JobError> {
        let args = self.validated(job, Opcode::UpDataset)?;
        let ds_name = args.text("ds_name").expect("schema").to_string();
        let ds_link = args.text("ds_link").expect("schema").to_string();
        let ds_size = args.int("ds_size").expect("schema");
        self.check_paid(
            job,
            schedule,
            PriceKind::DatasetUpload,
            &PriceContext::DatasetSize(ds_size),
        )?;

        let meta = match self.datasets.get(&ds_name) {
            Some(m) if m.request.as_deref() == Some(&job.request_txn_id) => m,
            Some(_) => return Err(reject("duplicate", format!("dataset {ds_name:?} already registered"))),
            None => {
                let bytes = self.fetch(&ds_link)?;
                if bytes.len() as u64 != ds_size {
                    return Err(reject(
                        "size_mismatch",
                        format!("declared {ds_size} bytes, fetched {}", bytes.len()),
                    ));
                }
                let mut req = SaveRequest::new(&ds_name, self.config.dataset_env, job.payer.clone());
                req.time_attrib = args.text("time_attrib").map(str::to_string);
                req.sub_split_attrib = args.text("sub_split_attrib").map(str::to_string);
                req.request = Some(job.request_txn_id.clone());
                self.datasets.save_dataset(&bytes, req).map_err(|e| match e {
                    DatastoreError::Duplicate(n) => reject("duplicate", format!("dataset {n:?} already registered")),
                    other => data_err("bad_dataset", other),
                })?
            }
        };
        info!(ds_name = %meta.ds_name, size = meta.ds_size, link = %meta.ds_link, "dataset saved");
        Ok(Success {
            response: NoteEnvelope::new(Opcode::DatasetUp)
                .arg("ds_name", meta.ds_name.as_str())
                .arg("status", STATUS_OK)
                .arg("ds_link", meta.ds_link.as_str())
                .arg("ds_size", meta.ds_size.to_string())
                .arg("rows", meta.row_count.to_string()),
            rewards: Vec::new(),
        })
    }

    fn train_model(&self, job: &PendingJob, schedule: &RewardSchedule) -> Result<Success, JobError> {
        let args = self.validated(job, Opcode::TrainModel)?;
        let archetype: Archetype = args
            .text("raw_model")
            .expect("schema")
            .parse()
            .map_err(|e: ModelError| reject("invalid_args", e.to_string()))?;
        let ds_name = args.text("ds_name").expect("schema").to_string();
        let model_name = args.text("new_model_name").expect("schema").to_string();
        let dim = |key: &str| -> Result<usize, JobError> {
            usize::try_from(args.int(key).expect("schema"))
                .map_err(|_| reject("invalid_args", format!("{key} out of range")))
        };
        let hp = Hyperparams {
            num_epochs: u32::try_from(args.int("num_epochs").expect("schema"))
                .map_err(|_| reject("invalid_args", "num_epochs out of range"))?,
            target_attrib: args.text("target_attrib").expect("schema").to_string(),
            hidden_dim: dim("hidden_dim")?,
            num_hidden_layers: dim("num_hidden_layers")?,
            time_lag: dim("time_lag")?,
            training_lookback: dim("training_lookback")?,
            sub_split_value: match args.int("sub_split_value") {
                Some(_) => Some(dim("sub_split_value")?),
                None => None,
            },
        };
        hp.validate().map_err(|e| reject("invalid_args", e.to_string()))?;
        let ds = self
            .datasets
            .get(&ds_name)
            .ok_or_else(|| reject("unknown_dataset", format!("no dataset {ds_name:?}")))?;
        let complexity = train_complexity(archetype, &ds, &hp);
        self.check_paid(
            job,
            schedule,
            PriceKind::TrainModel,
            &PriceContext::Complexity(complexity.clone()),
        )?;

        let meta = match self.models.get(&model_name) {
            Some(m) if m.request.as_deref() == Some(&job.request_txn_id) => m,
            Some(_) => return Err(reject("duplicate", format!("model {model_name:?} already registered"))),
            None => {
                let (_, mut frame) = self
                    .datasets
                    .load_named(&ds_name)
                    .map_err(|e| data_err("bad_dataset", e))?;
                if let Some(v) = hp.sub_split_value {
                    let attrib = ds.sub_split_attrib.as_deref().ok_or_else(|| {
                        reject("invalid_args", format!("dataset {ds_name:?} has no sub_split_attrib"))
                    })?;
                    frame = frame
                        .split_by_index(attrib, v)
                        .map_err(|e| data_err("invalid_args", e))?;
                }
                let opts = TrainOptions::seeded(self.config.train_seed);
                let training = train(archetype, &frame, &hp, &opts).map_err(|e| model_err("training_failed", e))?;
                let info = ModelInfo {
                    model_name: model_name.clone(),
                    ds_name: ds_name.clone(),
                    trainer: job.payer.clone(),
                    accuracy: training.report.accuracy,
                    final_loss: training.report.loss,
                    request: Some(job.request_txn_id.clone()),
                };
                self.models
                    .save(&training.model, info, self.config.model_env)
                    .map_err(|e| match e {
                        ModelError::Duplicate(n) => reject("duplicate", format!("model {n:?} already registered")),
                        other => model_err("training_failed", other),
                    })?
            }
        };
        let (acc_text, acc) = wire_accuracy(meta.accuracy)?;
        let reward = dataset_reward(ds.ds_size, &schedule.dataset_mult, &acc)
            .map_err(|e| reject("training_failed", e.to_string()))?;
        info!(model = %meta.model_name, accuracy = %acc_text, reward, "model trained");
        Ok(Success {
            response: NoteEnvelope::new(Opcode::ModelTrained)
                .arg("model_name", meta.model_name.as_str())
                .arg("loss", float_to_wire(meta.final_loss))
                .arg("accuracy", acc_text.as_str())
                .arg("status", STATUS_OK)
                .arg("ds_name", ds_name.as_str())
                .arg("archetype", archetype.as_str())
                .arg("complexity", meta.complexity.to_string())
                .arg("link", meta.link.as_str()),
            rewards: vec![Effect {
                receiver: ds.uploader.clone(),
                amount: reward,
                envelope: reward_note(
                    "dataset_usage",
                    &ds_name,
                    &acc_text,
                    &job.request_txn_id,
                    &schedule.dataset_mult,
                )
                .arg("ds_size", ds.ds_size.to_string()),
            }],
        })
    }

    fn query_model(&self, job: &PendingJob, schedule: &RewardSchedule) -> Result<Success, JobError> {
        let args = self.validated(job, Opcode::QueryModel)?;
        let model_name = args.text("model_name").expect("schema").to_string();
        let input: QueryInput = args
            .text("input")
            .expect("schema")
            .parse()
            .map_err(|e: String| reject("bad_input", e))?;
        let steps = match args.text("steps") {
            None => 1,
            Some(s) => s
                .trim()
                .parse::<u64>()
                .ok()
                .filter(|n| (1..=MAX_QUERY_STEPS).contains(n))
                .ok_or_else(|| reject("bad_input", format!("steps must be 1..={MAX_QUERY_STEPS}")))?,
        } as usize;
        let meta = self
            .models
            .get(&model_name)
            .ok_or_else(|| reject("unknown_model", format!("no model {model_name:?}")))?;
        self.check_paid(
            job,
            schedule,
            PriceKind::QueryModel,
            &PriceContext::Complexity(meta.complexity.clone()),
        )?;
        let model = self
            .models
            .load_link(&meta.link)
            .map_err(|e| model_err("model_unavailable", e))?;

        let mut response = NoteEnvelope::new(Opcode::QueryResult).arg("model_name", model_name.as_str());
        let mut rewards = Vec::new();
        let outputs = match input {
            QueryInput::Values(values) => {
                let window = model.window_from_flat(&values).map_err(|e| model_err("bad_input", e))?;
                model
                    .predict_steps(&window, steps)
                    .map_err(|e| model_err("bad_input", e))?
            }
            QueryInput::Row { ds_name, row } => {
                let (ds, mut frame) = self.datasets.load_named(&ds_name).map_err(|e| match e {
                    DatastoreError::UnknownDataset(_) => reject("unknown_dataset", e.to_string()),
                    other => data_err("bad_input", other),
                })?;
                if let (Some(v), Some(attrib)) = (model.hyperparams.sub_split_value, ds.sub_split_attrib.as_deref()) {
                    frame = frame.split_by_index(attrib, v).map_err(|e| data_err("bad_input", e))?;
                }
                let (window, truth) = model
                    .window_for_row(&frame, row)
                    .map_err(|e| model_err("bad_input", e))?;
                let outputs = model
                    .predict_steps(&window, steps)
                    .map_err(|e| model_err("bad_input", e))?;
                let (acc_text, acc) = wire_accuracy(model.query_accuracy(outputs[0], truth))?;
                let trainer_reward =
                    training_reward(&schedule.training_mult, &acc).map_err(|e| reject("bad_input", e.to_string()))?;
                let uploader_reward = dataset_reward(ds.ds_size, &schedule.dataset_mult, &acc)
                    .map_err(|e| reject("bad_input", e.to_string()))?;
                let req = job.request_txn_id.as_str();
                rewards.push(Effect {
                    receiver: meta.trainer.clone(),
                    amount: trainer_reward,
                    envelope: reward_note("model_training", &model_name, &acc_text, req, &schedule.training_mult),
                });
                rewards.push(Effect {
                    receiver: ds.uploader.clone(),
                    amount: uploader_reward,
                    envelope: reward_note("dataset_usage", &ds_name, &acc_text, req, &schedule.dataset_mult)
                        .arg("ds_size", ds.ds_size.to_string()),
                });
                response = response
                    .arg("truth", float_to_wire(truth))
                    .arg("accuracy", acc_text.as_str())
                    .arg("row", format!("{ds_name}:{row}"));
                outputs
            }
        };
        let output = serde_json::to_string(&outputs).expect("finite floats serialize");
        Ok(Success {
            response: response.arg("output", output).arg("status", STATUS_OK),
            rewards,
        })
    }

    /// Bytes behind a request link: `cas://` from this oracle's store,
    /// `local://` relative to the inbox, or `http(s)://`.
    fn fetch(&self, link: &str) -> Result<Vec<u8>, JobError> {
        if link.starts_with("http://") || link.starts_with("https://") {
            return self.fetch_http(link);
        }
        let parsed: Link = link
            .parse()
            .map_err(|e: DatastoreError| reject("fetch_failed", e.to_string()))?;
        match parsed {
            Link::Cas(_) => self.datasets.blobs().get(link).map_err(|e| data_err("fetch_failed", e)),
            Link::Local(path) => {
                if !is_plain_relative(&path) {
                    return Err(reject(
                        "fetch_failed",
                        "local links must be relative paths inside the inbox",
                    ));
                }
                std::fs::read(self.config.inbox().join(&path))
                    .map_err(|e| reject("fetch_failed", format!("{link}: {e}")))
            }
        }
    }

    fn fetch_http(&self, url: &str) -> Result<Vec<u8>, JobError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        let mut resp = agent
            .get(url)
            .call()
            .map_err(|e| reject("fetch_failed", format!("{url}: {e}")))?;
        let limit = self.config.max_fetch_bytes;
        let mut bytes = Vec::new();
        resp.body_mut()
            .as_reader()
            .take(limit + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| reject("fetch_failed", format!("{url}: {e}")))?;
        if bytes.len() as u64 > limit {
            return Err(reject("fetch_failed", format!("{url}: larger than {limit} bytes")));
        }
        // links whose last segment is a content hash are verified like cas://
        let last = url.rsplit('/').next().unwrap_or("");
        if last.len() == 64 && last.bytes().all(|b| b.is_ascii_hexdigit()) {
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(last) {
                return Err(reject("fetch_failed", format!("{url}: content hash is {actual}")));
            }
        }
        Ok(bytes)
    }
}

fn is_plain_relative(path: &Path) -> bool {
    !path.as_os_str().is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Money movements of a finished job from what was sent for it.
fn settle(
    job: &PendingJob,
    schedule: &RewardSchedule,
    ok: bool,
    refunded: MicroAlgo,
    sent: &[(Transaction, NoteEnvelope)],
) -> Settlement {
    let rewards: MicroAlgo = sent
        .iter()
        .filter(|(_, e)| e.op == Opcode::Reward.as_str())
        .map(|(t, _)| t.amount)
        .sum();
    let fee = if ok {
        oracle_fee(job.paid, &schedule.fee_fraction)
    } else {
        0
    };
    let funded = job.paid.saturating_sub(fee).saturating_sub(refunded);
    Settlement {
        paid: job.paid,
        fee,
        refunded,
        rewards,
        shortfall: rewards.saturating_sub(funded),
    }
}
