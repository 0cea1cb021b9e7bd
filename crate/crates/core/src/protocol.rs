//! Transaction-note wire format.
//!
//! A note is base64 of a canonical JSON object `{"args":{...},"op":"<NAME>"}`
//! with keys sorted and no insignificant whitespace. Argument values are
//! scalars; numbers travel as strings and are typed by the per-opcode schema
//! in [`validate_args`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::decimal::Decimal;

/// Largest canonical JSON payload a note may carry.
pub const MAX_NOTE_BYTES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("note is {size} bytes, limit is {limit}")]
    Oversize { size: usize, limit: usize },
    #[error("argument {0:?} is not a scalar")]
    NonScalar(String),
    #[error("invalid opcode {0:?}")]
    InvalidOpcode(String),
    #[error("note is not valid base64: {0}")]
    Base64(String),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unknown opcode {0}")]
    UnknownOpcode(String),
    #[error("{op}: missing argument {key:?}")]
    MissingArg { op: Opcode, key: String },
    #[error("{op}: argument {key:?} must be {expected}, got {got:?}")]
    IllTyped {
        op: Opcode,
        key: String,
        expected: String,
        got: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    UpDataset,
    TrainModel,
    QueryModel,
    DatasetUp,
    ModelTrained,
    QueryResult,
    Reward,
    MultUpdate,
}

impl Opcode {
    pub const ALL: [Opcode; 8] = [
        Opcode::UpDataset,
        Opcode::TrainModel,
        Opcode::QueryModel,
        Opcode::DatasetUp,
        Opcode::ModelTrained,
        Opcode::QueryResult,
        Opcode::Reward,
        Opcode::MultUpdate,
    ];

    pub const REQUESTS: [Opcode; 3] = [Opcode::UpDataset, Opcode::TrainModel, Opcode::QueryModel];

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::UpDataset => "<UP_DATASET>",
            Opcode::TrainModel => "<TRAIN_MODEL>",
            Opcode::QueryModel => "<QUERY_MODEL>",
            Opcode::DatasetUp => "<DATASET_UP>",
            Opcode::ModelTrained => "<MODEL_TRAINED>",
            Opcode::QueryResult => "<QUERY_RESULT>",
            Opcode::Reward => "<REWARD>",
            Opcode::MultUpdate => "<MULT_UPDATE>",
        }
    }

    pub fn is_request(self) -> bool {
        Self::REQUESTS.contains(&self)
    }

    /// The response opcode paired with a request opcode.
    pub fn response(self) -> Option<Opcode> {
        match self {
            Opcode::UpDataset => Some(Opcode::DatasetUp),
            Opcode::TrainModel => Some(Opcode::ModelTrained),
            Opcode::QueryModel => Some(Opcode::QueryResult),
            _ => None,
        }
    }

    pub fn is_response(self) -> bool {
        Self::REQUESTS.iter().any(|r| r.response() == Some(self))
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Opcode {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Opcode::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownOpcode(s.to_string()))
    }
}

/// `<` uppercase letters or underscores `>`.
pub fn is_valid_opcode(op: &str) -> bool {
    let Some(inner) = op.strip_prefix('<').and_then(|s| s.strip_suffix('>')) else {
        return false;
    };
    !inner.is_empty() && inner.bytes().all(|b| b.is_ascii_uppercase() || b == b'_')
}

/// Decoded note: opcode plus named arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEnvelope {
    pub op: String,
    pub args: BTreeMap<String, Value>,
}

impl NoteEnvelope {
    pub fn new(op: Opcode) -> Self {
        Self {
            op: op.as_str().to_string(),
            args: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<String>) -> Self {
        self.args.insert(key.to_string(), Value::String(value.into()));
        self
    }

    pub fn opcode(&self) -> Result<Opcode, ProtocolError> {
        self.op.parse()
    }

    /// String form of an argument; numbers and booleans are rendered as JSON.
    pub fn get(&self, key: &str) -> Option<String> {
        self.args.get(key).map(scalar_text)
    }

    /// Canonical JSON text (sorted keys, compact).
    pub fn canonical_json(&self) -> Result<String, ProtocolError> {
        if !is_valid_opcode(&self.op) {
            return Err(ProtocolError::InvalidOpcode(self.op.clone()));
        }
        if let Some((k, _)) = self.args.iter().find(|(_, v)| !is_scalar(v)) {
            return Err(ProtocolError::NonScalar(k.clone()));
        }
        #[derive(Serialize)]
        struct Canon<'a> {
            args: &'a BTreeMap<String, Value>,
            op: &'a str,
        }
        serde_json::to_string(&Canon {
            args: &self.args,
            op: &self.op,
        })
        .map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

fn is_scalar(v: &Value) -> bool {
    matches!(v, Value::String(_) | Value::Number(_) | Value::Bool(_))
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Encodes an envelope as note bytes (base64 text of the canonical JSON).
pub fn encode_note(envelope: &NoteEnvelope) -> Result<Vec<u8>, ProtocolError> {
    let json = envelope.canonical_json()?;
    if json.len() > MAX_NOTE_BYTES {
        return Err(ProtocolError::Oversize {
            size: json.len(),
            limit: MAX_NOTE_BYTES,
        });
    }
    Ok(STANDARD.encode(json.as_bytes()).into_bytes())
}

/// Decodes note bytes. Key order inside the JSON does not matter.
pub fn decode_note(raw: &[u8]) -> Result<NoteEnvelope, ProtocolError> {
    let json = STANDARD.decode(raw).map_err(|e| ProtocolError::Base64(e.to_string()))?;
    let value: Value = serde_json::from_slice(&json).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::Malformed("not a JSON object".into()));
    };
    let op = match obj.remove("op") {
        Some(Value::String(op)) => op,
        Some(_) => return Err(ProtocolError::Malformed("\"op\" is not a string".into())),
        None => return Err(ProtocolError::Malformed("missing \"op\"".into())),
    };
    if !is_valid_opcode(&op) {
        return Err(ProtocolError::InvalidOpcode(op));
    }
    let args = match obj.remove("args") {
        None => BTreeMap::new(),
        Some(Value::Object(map)) => {
            let mut args = BTreeMap::new();
            for (k, v) in map {
                if !is_scalar(&v) {
                    return Err(ProtocolError::NonScalar(k));
                }
                args.insert(k, v);
            }
            args
        }
        Some(_) => return Err(ProtocolError::Malformed("\"args\" is not an object".into())),
    };
    Ok(NoteEnvelope { op, args })
}

/// Wire text for a float: the shortest string that parses back to the same
/// `f64`, in exponent form when plain digits would be long.
pub fn float_to_wire(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && !(1e-6..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// A schema-typed argument value.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Text(String),
    Int(u64),
    Decimal(Decimal),
}

impl ArgValue {
    pub fn to_wire(&self) -> String {
        match self {
            ArgValue::Text(s) => s.clone(),
            ArgValue::Int(v) => v.to_string(),
            ArgValue::Decimal(d) => d.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Text,
    Int,
    Decimal,
    OneOf(&'static [&'static str]),
    JsonArray,
    QueryInput,
}

struct Field {
    key: &'static str,
    kind: Kind,
    required: bool,
}

const fn req(key: &'static str, kind: Kind) -> Field {
    Field {
        key,
        kind,
        required: true,
    }
}

const fn opt(key: &'static str, kind: Kind) -> Field {
    Field {
        key,
        kind,
        required: false,
    }
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_ERROR: &str = "error";

pub const ARCHETYPES: &[&str] = &["mlp", "rnn", "lstm", "gru"];
pub const REWARD_REASONS: &[&str] = &["dataset_usage", "model_training"];
/// Schedule fields a `<MULT_UPDATE>` may name.
pub const SCHEDULE_FIELDS: &[&str] = &[
    "dataset",
    "training",
    "fee_fraction",
    "dataset_upload_per_byte",
    "training_per_complexity",
    "query_per_complexity",
];

/// Schema for `op`. A response with `status` `"error"` (`failed`) only
/// carries its name key, the status and an error message.
fn schema(op: Opcode, failed: bool) -> &'static [Field] {
    use Kind::*;
    const UP_DATASET: &[Field] = &[
        req("ds_name", Text),
        req("ds_link", Text),
        req("ds_size", Int),
        opt("time_attrib", Text),
        opt("sub_split_attrib", Text),
    ];
    const DATASET_UP: &[Field] = &[req("ds_name", Text), req("status", Text)];
    const TRAIN_MODEL: &[Field] = &[
        req("raw_model", OneOf(ARCHETYPES)),
        req("ds_name", Text),
        req("new_model_name", Text),
        req("num_epochs", Int),
        req("target_attrib", Text),
        req("hidden_dim", Int),
        req("num_hidden_layers", Int),
        req("time_lag", Int),
        req("training_lookback", Int),
        opt("sub_split_value", Int),
    ];
    const MODEL_TRAINED: &[Field] = &[req("model_name", Text), req("loss", Decimal), req("accuracy", Decimal)];
    const QUERY_MODEL: &[Field] = &[req("model_name", Text), req("input", QueryInput)];
    const QUERY_RESULT: &[Field] = &[req("model_name", Text), req("output", JsonArray)];
    const REWARD: &[Field] = &[
        req("reason", OneOf(REWARD_REASONS)),
        req("ref_name", Text),
        req("accuracy", Decimal),
    ];
    const MULT_UPDATE: &[Field] = &[
        req("calc", OneOf(SCHEDULE_FIELDS)),
        req("old", Decimal),
        req("new", Decimal),
    ];
    const DATASET_UP_ERROR: &[Field] = &[req("ds_name", Text), req("status", Text), req("error", Text)];
    const MODEL_TRAINED_ERROR: &[Field] = &[req("model_name", Text), req("status", Text), req("error", Text)];
    const QUERY_RESULT_ERROR: &[Field] = &[req("model_name", Text), req("status", Text), req("error", Text)];
    if failed {
        match op {
            Opcode::DatasetUp => return DATASET_UP_ERROR,
            Opcode::ModelTrained => return MODEL_TRAINED_ERROR,
            Opcode::QueryResult => return QUERY_RESULT_ERROR,
            _ => {}
        }
    }
    match op {
        Opcode::UpDataset => UP_DATASET,
        Opcode::DatasetUp => DATASET_UP,
        Opcode::TrainModel => TRAIN_MODEL,
        Opcode::ModelTrained => MODEL_TRAINED,
        Opcode::QueryModel => QUERY_MODEL,
        Opcode::QueryResult => QUERY_RESULT,
        Opcode::Reward => REWARD,
        Opcode::MultUpdate => MULT_UPDATE,
    }
}

/// Required argument names for an opcode, in schema order.
pub fn required_args(op: Opcode) -> Vec<&'static str> {
    schema(op, false).iter().filter(|f| f.required).map(|f| f.key).collect()
}

/// A `<QUERY_MODEL>` input: inline values or a pointer at a dataset row.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Values(Vec<f64>),
    Row { ds_name: String, row: usize },
}

impl FromStr for QueryInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.starts_with('[') {
            let values: Vec<f64> = serde_json::from_str(t).map_err(|e| format!("input array: {e}"))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err("input array holds non-finite values".into());
            }
            return Ok(QueryInput::Values(values));
        }
        let (name, row) = t
            .rsplit_once(':')
            .ok_or_else(|| "expected a JSON array or \"ds_name:row_index\"".to_string())?;
        if name.is_empty() {
            return Err("empty dataset name in row reference".into());
        }
        let row = row.parse().map_err(|_| format!("bad row index {row:?}"))?;
        Ok(QueryInput::Row {
            ds_name: name.to_string(),
            row,
        })
    }
}

impl fmt::Display for QueryInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryInput::Values(v) => f.write_str(&serde_json::to_string(v).unwrap_or_default()),
            QueryInput::Row { ds_name, row } => write!(f, "{ds_name}:{row}"),
        }
    }
}

/// Schema-checked arguments. Unknown keys are kept as text.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidArgs {
    pub op: Opcode,
    pub values: BTreeMap<String, ArgValue>,
}

impl ValidArgs {
    pub fn text(&self, key: &str) -> Option<&str> {
        match self.values.get(key)? {
            ArgValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn int(&self, key: &str) -> Option<u64> {
        match self.values.get(key)? {
            ArgValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn decimal(&self, key: &str) -> Option<&Decimal> {
        match self.values.get(key)? {
            ArgValue::Decimal(d) => Some(d),
            _ => None,
        }
    }

    /// Back to a wire envelope, all values as strings.
    pub fn to_envelope(&self) -> NoteEnvelope {
        NoteEnvelope {
            op: self.op.as_str().to_string(),
            args: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.to_wire())))
                .collect(),
        }
    }
}

/// Checks `args` against the schema for `op` and types the known keys.
pub fn validate_args(op: Opcode, args: &BTreeMap<String, Value>) -> Result<ValidArgs, ProtocolError> {
    let failed = op.is_response() && args.get("status").and_then(Value::as_str) == Some(STATUS_ERROR);
    let fields = schema(op, failed);
    let mut values = BTreeMap::new();
    for field in fields {
        let Some(raw) = args.get(field.key) else {
            if field.required {
                return Err(ProtocolError::MissingArg {
                    op,
                    key: field.key.to_string(),
                });
            }
            continue;
        };
        if !is_scalar(raw) {
            return Err(ProtocolError::NonScalar(field.key.to_string()));
        }
        let text = scalar_text(raw);
        let ill = |expected: &str| ProtocolError::IllTyped {
            op,
            key: field.key.to_string(),
            expected: expected.to_string(),
            got: text.clone(),
        };
        let value = match field.kind {
            Kind::Text => {
                if text.is_empty() {
                    return Err(ill("a non-empty string"));
                }
                ArgValue::Text(text.clone())
            }
            Kind::Int => ArgValue::Int(text.trim().parse().map_err(|_| ill("an integer"))?),
            Kind::Decimal => ArgValue::Decimal(text.parse().map_err(|_| ill("a decimal"))?),
            Kind::OneOf(choices) => {
                if !choices.contains(&text.as_str()) {
                    return Err(ill(&format!("one of {}", choices.join("|"))));
                }
                ArgValue::Text(text.clone())
            }
            Kind::JsonArray => {
                let parsed: Result<Vec<Value>, _> = serde_json::from_str(&text);
                if parsed.is_err() {
                    return Err(ill("a JSON array"));
                }
                ArgValue::Text(text.clone())
            }
            Kind::QueryInput => {
                text.parse::<QueryInput>()
                    .map_err(|_| ill("a JSON array or ds_name:row_index"))?;
                ArgValue::Text(text.clone())
            }
        };
        values.insert(field.key.to_string(), value);
    }
    for (k, v) in args {
        if !values.contains_key(k) {
            if !is_scalar(v) {
                return Err(ProtocolError::NonScalar(k.clone()));
            }
            values.insert(k.clone(), ArgValue::Text(scalar_text(v)));
        }
    }
    Ok(ValidArgs { op, values })
}

/// A minimal valid argument map for `op`, used by tests and docs.
pub fn example_args(op: Opcode) -> BTreeMap<String, Value> {
    let pairs: &[(&str, &str)] = match op {
        Opcode::UpDataset => &[("ds_name", "d"), ("ds_link", "local://d.csv"), ("ds_size", "5000000")],
        Opcode::DatasetUp => &[("ds_name", "d"), ("status", "ok")],
        Opcode::TrainModel => &[
            ("raw_model", "gru"),
            ("ds_name", "d"),
            ("new_model_name", "m"),
            ("num_epochs", "70"),
            ("target_attrib", "close"),
            ("hidden_dim", "5"),
            ("num_hidden_layers", "1"),
            ("time_lag", "0"),
            ("training_lookback", "10"),
        ],
        Opcode::ModelTrained => &[("model_name", "m"), ("loss", "0.01"), ("accuracy", "0.9")],
        Opcode::QueryModel => &[("model_name", "m"), ("input", "[0.1]")],
        Opcode::QueryResult => &[("model_name", "m"), ("output", "[1.5]")],
        Opcode::Reward => &[("reason", "dataset_usage"), ("ref_name", "d"), ("accuracy", "0.5")],
        Opcode::MultUpdate => &[("calc", "dataset"), ("old", "2"), ("new", "6")],
    };
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(op: &str, args: &[(&str, &str)]) -> NoteEnvelope {
        NoteEnvelope {
            op: op.to_string(),
            args: args
                .iter()
                .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
                .collect(),
        }
    }

    #[test]
    fn query_model_encodes_to_canonical_base64() {
        let e = env("<QUERY_MODEL>", &[("model_name", "m1"), ("input", "[1.0,2.0]")]);
        let canonical = r#"{"args":{"input":"[1.0,2.0]","model_name":"m1"},"op":"<QUERY_MODEL>"}"#;
        assert_eq!(e.canonical_json().unwrap(), canonical);
        // reference value computed with `printf %s '<canonical>' | base64 -w0`
        let expected = "eyJhcmdzIjp7ImlucHV0IjoiWzEuMCwyLjBdIiwibW9kZWxfbmFtZSI6Im0xIn0sIm9wIjoiPFFVRVJZX01PREVMPiJ9";
        assert_eq!(String::from_utf8(encode_note(&e).unwrap()).unwrap(), expected);
    }

    #[test]
    fn empty_args_round_trip() {
        let e = NoteEnvelope::new(Opcode::Reward);
        let back = decode_note(&encode_note(&e).unwrap()).unwrap();
        assert_eq!(back, e);
        assert!(back.args.is_empty());
    }

    #[test]
    fn size_cap_boundary() {
        // {"args":{"k":"<pad>"},"op":"<REWARD>"} has 32 bytes of framing
        let framing = r#"{"args":{"k":""},"op":"<REWARD>"}"#.len();
        let fits = env("<REWARD>", &[("k", &"x".repeat(MAX_NOTE_BYTES - framing))]);
        assert_eq!(fits.canonical_json().unwrap().len(), 1000);
        assert!(encode_note(&fits).is_ok());
        let over = env("<REWARD>", &[("k", &"x".repeat(MAX_NOTE_BYTES - framing + 1))]);
        assert_eq!(over.canonical_json().unwrap().len(), 1001);
        assert_eq!(
            encode_note(&over).unwrap_err(),
            ProtocolError::Oversize {
                size: 1001,
                limit: 1000
            }
        );
    }

    #[test]
    fn non_scalar_args_do_not_encode() {
        let mut e = NoteEnvelope::new(Opcode::QueryModel);
        e.args.insert("input".into(), serde_json::json!([1, 2]));
        assert_eq!(encode_note(&e).unwrap_err(), ProtocolError::NonScalar("input".into()));
    }

    #[test]
    fn decode_errors_are_typed() {
        let no_op = STANDARD.encode("{}");
        assert!(matches!(
            decode_note(no_op.as_bytes()),
            Err(ProtocolError::Malformed(_))
        ));
        assert!(matches!(decode_note(b"!!!"), Err(ProtocolError::Base64(_))));
        let not_json = STANDARD.encode("hello");
        assert!(matches!(
            decode_note(not_json.as_bytes()),
            Err(ProtocolError::Malformed(_))
        ));
        let bad_op = STANDARD.encode(r#"{"op":"<lower>","args":{}}"#);
        assert!(matches!(
            decode_note(bad_op.as_bytes()),
            Err(ProtocolError::InvalidOpcode(_))
        ));
    }

    #[test]
    fn decode_is_key_order_agnostic() {
        let a = STANDARD.encode(r#"{"op":"<DATASET_UP>","args":{"status":"ok","ds_name":"d"}}"#);
        let b = STANDARD.encode(r#"{"args":{"ds_name":"d","status":"ok"},"op":"<DATASET_UP>"}"#);
        assert_eq!(decode_note(a.as_bytes()).unwrap(), decode_note(b.as_bytes()).unwrap());
    }

    #[test]
    fn unknown_opcode_decodes_but_does_not_dispatch() {
        let e = env("<FLY_AWAY>", &[]);
        let back = decode_note(&encode_note(&e).unwrap()).unwrap();
        assert_eq!(back.op, "<FLY_AWAY>");
        assert!(matches!(back.opcode(), Err(ProtocolError::UnknownOpcode(_))));
    }

    #[test]
    fn every_request_has_one_response() {
        for op in Opcode::ALL {
            let pairs = Opcode::REQUESTS.iter().filter(|r| r.response() == Some(op)).count();
            assert_eq!(pairs, usize::from(op.is_response()));
            assert_eq!(op.is_request(), op.response().is_some());
        }
    }

    #[test]
    fn up_dataset_normalizes_size() {
        let a = validate_args(Opcode::UpDataset, &example_args(Opcode::UpDataset)).unwrap();
        assert_eq!(a.int("ds_size"), Some(5_000_000));
        assert_eq!(a.text("ds_link"), Some("local://d.csv"));
    }

    #[test]
    fn train_model_missing_raw_model() {
        let err = validate_args(Opcode::TrainModel, &BTreeMap::new()).unwrap_err();
        assert_eq!(
            err,
            ProtocolError::MissingArg {
                op: Opcode::TrainModel,
                key: "raw_model".into()
            }
        );
    }

    #[test]
    fn extras_are_preserved() {
        let mut args = example_args(Opcode::QueryModel);
        args.insert("extra".into(), Value::String("x".into()));
        let a = validate_args(Opcode::QueryModel, &args).unwrap();
        assert_eq!(a.text("extra"), Some("x"));
    }

    #[test]
    fn ill_typed_values_name_the_key() {
        let mut args = example_args(Opcode::UpDataset);
        args.insert("ds_size".into(), Value::String("five".into()));
        match validate_args(Opcode::UpDataset, &args).unwrap_err() {
            ProtocolError::IllTyped { key, .. } => assert_eq!(key, "ds_size"),
            e => panic!("{e:?}"),
        }
        let mut args = example_args(Opcode::TrainModel);
        args.insert("raw_model".into(), Value::String("cnn".into()));
        assert!(validate_args(Opcode::TrainModel, &args).is_err());
    }

    #[test]
    fn schemas_accept_examples_and_reject_each_deletion() {
        for op in Opcode::ALL {
            let args = example_args(op);
            validate_args(op, &args).unwrap_or_else(|e| panic!("{op}: {e}"));
            for key in required_args(op) {
                let mut cut = args.clone();
                cut.remove(key);
                assert!(
                    matches!(validate_args(op, &cut), Err(ProtocolError::MissingArg { .. })),
                    "{op} without {key}"
                );
            }
        }
    }

    #[test]
    fn error_responses_need_only_name_status_and_message() {
        let mut args = BTreeMap::new();
        args.insert("model_name".to_string(), Value::from("m"));
        args.insert("status".to_string(), Value::from("error"));
        assert!(matches!(
            validate_args(Opcode::ModelTrained, &args),
            Err(ProtocolError::MissingArg { .. })
        ));
        args.insert("error".to_string(), Value::from("unknown dataset"));
        assert!(validate_args(Opcode::ModelTrained, &args).is_ok());
        args.insert("status".to_string(), Value::from("ok"));
        assert!(validate_args(Opcode::ModelTrained, &args).is_err());
    }

    #[test]
    fn float_wire_text_round_trips() {
        for v in [0.0, 0.5, 0.987654321, 1e-9, 3.2e20, -4.25, f64::MIN_POSITIVE] {
            let text = float_to_wire(v);
            assert_eq!(text.parse::<f64>().unwrap(), v);
            assert!(text.parse::<Decimal>().is_ok(), "{text}");
            assert!(text.len() < 30);
        }
        assert_eq!(float_to_wire(0.75), "0.75");
    }

    #[test]
    fn query_input_forms() {
        assert_eq!(
            "[0.5, 1]".parse::<QueryInput>().unwrap(),
            QueryInput::Values(vec![0.5, 1.0])
        );
        assert_eq!(
            "dj:12".parse::<QueryInput>().unwrap(),
            QueryInput::Row {
                ds_name: "dj".into(),
                row: 12
            }
        );
        assert!("dj".parse::<QueryInput>().is_err());
        assert!(":3".parse::<QueryInput>().is_err());
        assert!("dj:-1".parse::<QueryInput>().is_err());
    }

    #[test]
    fn numeric_wire_values_are_accepted_as_text() {
        let mut args = example_args(Opcode::UpDataset);
        args.insert("ds_size".into(), serde_json::json!(42));
        assert_eq!(
            validate_args(Opcode::UpDataset, &args).unwrap().int("ds_size"),
            Some(42)
        );
    }
}
