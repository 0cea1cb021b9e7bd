//! Rewards, prices and the oracle's economic schedule.
//!
//! All amounts are integer microALGO computed from exact decimals:
//!
//! * dataset usage reward: `floor(ds_size * dataset_mult * accuracy)`
//! * training reward:      `floor(training_mult * accuracy)`
//! * prices:               `ceil(size_or_complexity * per_unit)`, at least 1
//! * oracle fee:           `floor(amount * fee_fraction)`
//!
//! Every schedule change is committed on-chain as a zero-amount self-payment
//! carrying a `<MULT_UPDATE>` note, so the chain holds the full history.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decimal::Decimal;
use crate::ledger::{Address, ChainAdapter, LedgerError, MicroAlgo, PaymentRequest, Transaction};
use crate::protocol::{decode_note, encode_note, NoteEnvelope, Opcode, ProtocolError};

#[derive(Debug, Error)]
pub enum TokenomicsError {
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(Decimal),
    #[error("unknown price kind {0:?}")]
    UnknownPriceKind(String),
    #[error("price of {kind} needs {needed}")]
    MissingContext { kind: PriceKind, needed: &'static str },
    #[error("unknown schedule field {0:?}")]
    UnknownField(String),
    #[error("invalid value {value} for {field}")]
    InvalidValue { field: ScheduleField, value: Decimal },
    #[error("amount does not fit in microALGO")]
    Overflow,
    #[error("schedule file line {line}: {reason}")]
    BadScheduleFile { line: usize, reason: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn check_accuracy(accuracy: &Decimal) -> Result<(), TokenomicsError> {
    if accuracy.is_negative() || *accuracy > Decimal::one() {
        return Err(TokenomicsError::AccuracyOutOfRange(accuracy.clone()));
    }
    Ok(())
}

/// Dataset usage reward: `floor(ds_size * mult * accuracy)`.
pub fn dataset_reward(ds_size: u64, mult: &Decimal, accuracy: &Decimal) -> Result<MicroAlgo, TokenomicsError> {
    check_accuracy(accuracy)?;
    Decimal::from_u64(ds_size)
        .mul(mult)
        .mul(accuracy)
        .floor_u64()
        .ok_or(TokenomicsError::Overflow)
}

/// Model training reward: `floor(mult * accuracy)`.
pub fn training_reward(mult: &Decimal, accuracy: &Decimal) -> Result<MicroAlgo, TokenomicsError> {
    check_accuracy(accuracy)?;
    mult.mul(accuracy).floor_u64().ok_or(TokenomicsError::Overflow)
}

/// The share of `amount` the oracle host keeps.
pub fn oracle_fee(amount: MicroAlgo, fee_fraction: &Decimal) -> MicroAlgo {
    Decimal::from_u64(amount)
        .mul(fee_fraction)
        .floor_u64()
        .unwrap_or(0)
        .min(amount)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceKind {
    DatasetUpload,
    TrainModel,
    QueryModel,
}

impl PriceKind {
    pub const ALL: [PriceKind; 3] = [PriceKind::DatasetUpload, PriceKind::TrainModel, PriceKind::QueryModel];

    pub fn as_str(self) -> &'static str {
        match self {
            PriceKind::DatasetUpload => "dataset_upload",
            PriceKind::TrainModel => "train_model",
            PriceKind::QueryModel => "query_model",
        }
    }

    pub fn for_request(op: Opcode) -> Option<PriceKind> {
        match op {
            Opcode::UpDataset => Some(PriceKind::DatasetUpload),
            Opcode::TrainModel => Some(PriceKind::TrainModel),
            Opcode::QueryModel => Some(PriceKind::QueryModel),
            _ => None,
        }
    }
}

impl fmt::Display for PriceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriceKind {
    type Err = TokenomicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PriceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TokenomicsError::UnknownPriceKind(s.to_string()))
    }
}

/// What a price depends on.
#[derive(Debug, Clone, PartialEq)]
pub enum PriceContext {
    DatasetSize(u64),
    Complexity(Decimal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleField {
    DatasetMult,
    TrainingMult,
    FeeFraction,
    DatasetUploadPerByte,
    TrainingPerComplexity,
    QueryPerComplexity,
}

impl ScheduleField {
    pub const ALL: [ScheduleField; 6] = [
        ScheduleField::DatasetMult,
        ScheduleField::TrainingMult,
        ScheduleField::FeeFraction,
        ScheduleField::DatasetUploadPerByte,
        ScheduleField::TrainingPerComplexity,
        ScheduleField::QueryPerComplexity,
    ];

    /// Name used in the `calc` argument of `<MULT_UPDATE>`.
    pub fn calc_name(self) -> &'static str {
        match self {
            ScheduleField::DatasetMult => "dataset",
            ScheduleField::TrainingMult => "training",
            ScheduleField::FeeFraction => "fee_fraction",
            ScheduleField::DatasetUploadPerByte => "dataset_upload_per_byte",
            ScheduleField::TrainingPerComplexity => "training_per_complexity",
            ScheduleField::QueryPerComplexity => "query_per_complexity",
        }
    }

    /// Key used in the schedule file.
    pub fn file_key(self) -> &'static str {
        match self {
            ScheduleField::DatasetMult => "dataset_mult",
            ScheduleField::TrainingMult => "training_mult",
            other => other.calc_name(),
        }
    }

    pub fn parse_any(s: &str) -> Result<Self, TokenomicsError> {
        ScheduleField::ALL
            .into_iter()
            .find(|f| f.calc_name() == s || f.file_key() == s)
            .ok_or_else(|| TokenomicsError::UnknownField(s.to_string()))
    }
}

impl fmt::Display for ScheduleField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_key())
    }
}

/// The oracle's economic parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSchedule {
    pub dataset_mult: Decimal,
    pub training_mult: Decimal,
    pub fee_fraction: Decimal,
    pub dataset_upload_per_byte: Decimal,
    pub training_per_complexity: Decimal,
    pub query_per_complexity: Decimal,
}

impl Default for RewardSchedule {
    fn default() -> Self {
        let d = |s: &str| s.parse::<Decimal>().expect("literal");
        Self {
            dataset_mult: d("2"),
            training_mult: d("10000000"),
            fee_fraction: d("0.01"),
            dataset_upload_per_byte: d("1"),
            training_per_complexity: d("10000"),
            query_per_complexity: d("100"),
        }
    }
}

impl RewardSchedule {
    pub fn get(&self, field: ScheduleField) -> &Decimal {
        match field {
            ScheduleField::DatasetMult => &self.dataset_mult,
            ScheduleField::TrainingMult => &self.training_mult,
            ScheduleField::FeeFraction => &self.fee_fraction,
            ScheduleField::DatasetUploadPerByte => &self.dataset_upload_per_byte,
            ScheduleField::TrainingPerComplexity => &self.training_per_complexity,
            ScheduleField::QueryPerComplexity => &self.query_per_complexity,
        }
    }

    fn slot(&mut self, field: ScheduleField) -> &mut Decimal {
        match field {
            ScheduleField::DatasetMult => &mut self.dataset_mult,
            ScheduleField::TrainingMult => &mut self.training_mult,
            ScheduleField::FeeFraction => &mut self.fee_fraction,
            ScheduleField::DatasetUploadPerByte => &mut self.dataset_upload_per_byte,
            ScheduleField::TrainingPerComplexity => &mut self.training_per_complexity,
            ScheduleField::QueryPerComplexity => &mut self.query_per_complexity,
        }
    }

    /// Sets a field after range checks (all >= 0, fee fraction < 1).
    pub fn set(&mut self, field: ScheduleField, value: Decimal) -> Result<(), TokenomicsError> {
        let bad = value.is_negative() || (field == ScheduleField::FeeFraction && value >= Decimal::one());
        if bad {
            return Err(TokenomicsError::InvalidValue { field, value });
        }
        *self.slot(field) = value;
        Ok(())
    }

    pub fn price(&self, kind: PriceKind, ctx: &PriceContext) -> Result<MicroAlgo, TokenomicsError> {
        let raw = match (kind, ctx) {
            (PriceKind::DatasetUpload, PriceContext::DatasetSize(size)) => {
                Decimal::from_u64(*size).mul(&self.dataset_upload_per_byte)
            }
            (PriceKind::TrainModel, PriceContext::Complexity(c)) => c.mul(&self.training_per_complexity),
            (PriceKind::QueryModel, PriceContext::Complexity(c)) => c.mul(&self.query_per_complexity),
            (PriceKind::DatasetUpload, _) => {
                return Err(TokenomicsError::MissingContext {
                    kind,
                    needed: "ds_size",
                })
            }
            _ => {
                return Err(TokenomicsError::MissingContext {
                    kind,
                    needed: "model complexity",
                })
            }
        };
        Ok(raw.ceil_u64().ok_or(TokenomicsError::Overflow)?.max(1))
    }

    pub fn to_file_string(&self) -> String {
        ScheduleField::ALL
            .iter()
            .map(|f| format!("{}={}\n", f.file_key(), self.get(*f)))
            .collect()
    }

    /// Parses `key=value` lines. Missing keys keep their defaults.
    pub fn parse_file(text: &str) -> Result<Self, TokenomicsError> {
        let mut s = RewardSchedule::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| TokenomicsError::BadScheduleFile { line: i + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            let field = ScheduleField::parse_any(k.trim()).map_err(|e| bad(e.to_string()))?;
            let value: Decimal = v.trim().parse().map_err(|e| bad(format!("{e}")))?;
            s.set(field, value).map_err(|e| bad(e.to_string()))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, TokenomicsError> {
        Self::parse_file(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenomicsError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Schedule versions keyed by the ledger round that made them effective.
/// Requests are priced with the version in force when they were committed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleBook {
    versions: Vec<(u64, RewardSchedule)>,
}

impl ScheduleBook {
    pub fn new(initial: RewardSchedule) -> Self {
        Self {
            versions: vec![(0, initial)],
        }
    }

    pub fn current(&self) -> &RewardSchedule {
        &self.versions.last().expect("at least one version").1
    }

    /// Version in force for a transaction committed at `round`.
    pub fn at_round(&self, round: u64) -> &RewardSchedule {
        let idx = self.versions.partition_point(|(r, _)| *r < round);
        &self.versions[idx.saturating_sub(1)].1
    }

    pub fn push(&mut self, round: u64, schedule: RewardSchedule) {
        self.versions.push((round, schedule));
    }

    /// Applies one change and commits its on-chain log entry. The schedule
    /// only changes if the ledger accepts the entry.
    pub fn update(
        &mut self,
        field: ScheduleField,
        new_value: Decimal,
        chain: &dyn ChainAdapter,
        oracle: &Address,
    ) -> Result<Transaction, TokenomicsError> {
        let mut next = self.current().clone();
        let old = next.get(field).clone();
        next.set(field, new_value.clone())?;
        let note = encode_note(&mult_update_note(field, &old, &new_value))?;
        let txn = chain.submit(PaymentRequest::new(oracle.clone(), oracle.clone(), 0, note))?;
        self.push(txn.round, next);
        Ok(txn)
    }
}

pub fn mult_update_note(field: ScheduleField, old: &Decimal, new: &Decimal) -> NoteEnvelope {
    NoteEnvelope::new(Opcode::MultUpdate)
        .arg("calc", field.calc_name())
        .arg("old", old.to_string())
        .arg("new", new.to_string())
}

/// Standalone form of [`ScheduleBook::update`] for a bare schedule.
pub fn log_mult_update(
    schedule: &mut RewardSchedule,
    field: ScheduleField,
    new_value: Decimal,
    chain: &dyn ChainAdapter,
    oracle: &Address,
) -> Result<Transaction, TokenomicsError> {
    let mut book = ScheduleBook::new(schedule.clone());
    let txn = book.update(field, new_value, chain, oracle)?;
    *schedule = book.current().clone();
    Ok(txn)
}

/// Folds every `<MULT_UPDATE>` self-payment of `oracle` in `log` over
/// `initial`, returning the versions in commit order.
pub fn replay_mult_updates(initial: RewardSchedule, log: &[Transaction], oracle: &Address) -> ScheduleBook {
    let mut book = ScheduleBook::new(initial);
    for txn in log {
        if &txn.sender != oracle || &txn.receiver != oracle {
            continue;
        }
        let Ok(env) = decode_note(&txn.note) else { continue };
        if env.op != Opcode::MultUpdate.as_str() {
            continue;
        }
        let (Some(calc), Some(new)) = (env.get("calc"), env.get("new")) else {
            continue;
        };
        let (Ok(field), Ok(value)) = (ScheduleField::parse_any(&calc), new.parse::<Decimal>()) else {
            continue;
        };
        let mut next = book.current().clone();
        if next.set(field, value).is_ok() {
            book.push(txn.round, next);
        }
    }
    book
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{ManualClock, SimLedger};
    use std::sync::Arc;

    fn d(s: &str) -> Decimal {
        s.parse().unwrap()
    }

    #[test]
    fn dataset_reward_examples() {
        assert_eq!(dataset_reward(5_000_000, &d("2"), &d("0.3")).unwrap(), 3_000_000);
        assert_eq!(dataset_reward(5_000_000, &d("6"), &d("0.99")).unwrap(), 29_700_000);
        assert_eq!(dataset_reward(123_456, &d("7.5"), &d("0")).unwrap(), 0);
    }

    #[test]
    fn training_reward_examples() {
        assert_eq!(training_reward(&d("1e7"), &d("0.5")).unwrap(), 5_000_000);
        assert_eq!(training_reward(&d("3e7"), &d("0.9")).unwrap(), 27_000_000);
        assert_eq!(training_reward(&d("1e7"), &d("0.333")).unwrap(), 3_330_000);
    }

    #[test]
    fn accuracy_range_is_enforced() {
        assert!(matches!(
            training_reward(&d("1"), &d("1.01")),
            Err(TokenomicsError::AccuracyOutOfRange(_))
        ));
        assert!(dataset_reward(1, &d("1"), &d("-0.1")).is_err());
        assert!(training_reward(&d("1"), &d("1")).is_ok());
    }

    #[test]
    fn prices() {
        let s = RewardSchedule::default();
        assert_eq!(
            s.price(PriceKind::DatasetUpload, &PriceContext::DatasetSize(0))
                .unwrap(),
            1
        );
        assert_eq!(
            s.price(PriceKind::DatasetUpload, &PriceContext::DatasetSize(5_000_000))
                .unwrap(),
            5_000_000
        );
        assert_eq!(
            s.price(PriceKind::QueryModel, &PriceContext::Complexity(d("61.0")))
                .unwrap(),
            6_100
        );
        assert_eq!(
            s.price(PriceKind::TrainModel, &PriceContext::Complexity(d("49.2")))
                .unwrap(),
            492_000
        );
        assert!(s.price(PriceKind::TrainModel, &PriceContext::DatasetSize(3)).is_err());
        assert!(matches!(
            "rent".parse::<PriceKind>(),
            Err(TokenomicsError::UnknownPriceKind(_))
        ));
    }

    #[test]
    fn fee_partitions_amount() {
        assert_eq!(oracle_fee(1_000_000, &d("0.01")), 10_000);
        assert_eq!(oracle_fee(999, &d("0")), 0);
        for amount in [0u64, 1, 99, 12_345, 1 << 40] {
            let fee = oracle_fee(amount, &d("0.037"));
            assert!(fee <= amount);
            assert_eq!(fee + (amount - fee), amount);
        }
    }

    #[test]
    fn schedule_file_round_trip() {
        let mut s = RewardSchedule::default();
        s.set(ScheduleField::DatasetMult, d("6")).unwrap();
        let text = s.to_file_string();
        assert!(text.contains("dataset_mult=6\n"));
        assert_eq!(RewardSchedule::parse_file(&text).unwrap(), s);
        assert!(RewardSchedule::parse_file("bogus=1").is_err());
        assert!(RewardSchedule::parse_file("fee_fraction=1").is_err());
        assert!(RewardSchedule::parse_file("# c\n\ntraining_mult = 3e7\n").is_ok());
    }

    #[test]
    fn setters_reject_out_of_range() {
        let mut s = RewardSchedule::default();
        assert!(s.set(ScheduleField::FeeFraction, d("1")).is_err());
        assert!(s.set(ScheduleField::DatasetMult, d("-1")).is_err());
        assert_eq!(s, RewardSchedule::default());
    }

    fn chain() -> (Arc<SimLedger>, Address) {
        let l = Arc::new(SimLedger::new(Arc::new(ManualClock::new(0))));
        let oracle: Address = "ORACLE".into();
        l.faucet(&oracle, 10_000_000).unwrap();
        (l, oracle)
    }

    #[test]
    fn mult_update_is_logged_on_chain() {
        let (l, oracle) = chain();
        let mut s = RewardSchedule::default();
        let txn = log_mult_update(&mut s, ScheduleField::DatasetMult, d("6"), l.as_ref(), &oracle).unwrap();
        assert_eq!(s.dataset_mult, d("6"));
        assert_eq!((txn.amount, &txn.sender, &txn.receiver), (0, &oracle, &oracle));
        let env = decode_note(&txn.note).unwrap();
        assert_eq!(env.op, "<MULT_UPDATE>");
        assert_eq!(env.get("old").as_deref(), Some("2"));
        assert_eq!(env.get("new").as_deref(), Some("6"));
        // same value again is still logged
        log_mult_update(&mut s, ScheduleField::DatasetMult, d("6"), l.as_ref(), &oracle).unwrap();
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn rejected_log_leaves_schedule_unchanged() {
        let l = SimLedger::new(Arc::new(ManualClock::new(0)));
        let mut s = RewardSchedule::default();
        let err = log_mult_update(&mut s, ScheduleField::TrainingMult, d("5"), &l, &"BROKE".into());
        assert!(matches!(err, Err(TokenomicsError::Ledger(_))));
        assert_eq!(s, RewardSchedule::default());
    }

    #[test]
    fn replay_reproduces_schedule_and_versions() {
        let (l, oracle) = chain();
        let mut book = ScheduleBook::new(RewardSchedule::default());
        let r0 = l.len() as u64;
        book.update(ScheduleField::DatasetMult, d("6"), l.as_ref(), &oracle)
            .unwrap();
        book.update(ScheduleField::FeeFraction, d("0.05"), l.as_ref(), &oracle)
            .unwrap();
        book.update(ScheduleField::QueryPerComplexity, d("250"), l.as_ref(), &oracle)
            .unwrap();
        let replayed = replay_mult_updates(RewardSchedule::default(), &l.commit_log().unwrap(), &oracle);
        assert_eq!(replayed, book);
        // a request committed before the first update sees the old schedule
        assert_eq!(book.at_round(r0 + 1).dataset_mult, d("2"));
        assert_eq!(book.at_round(r0 + 2).dataset_mult, d("6"));
        assert_eq!(book.at_round(u64::MAX).query_per_complexity, d("250"));
    }
}
