//! Archetype time-series models: MLP, RNN, LSTM and GRU trained from
//! scratch with plain SGD on sliding windows.

mod blob;
mod data;
mod net;
mod store;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{DatastoreError, TableFrame, DEFAULT_TRAIN_FRACTION};
use crate::decimal::Decimal;

pub use blob::{decode_model, encode_model, BLOB_MAGIC};
pub use data::{feature_columns, feature_rows, windows, Normalization, Window};
pub use net::{Network, Shape, Trace};
pub use store::{ModelInfo, ModelMeta, ModelStore};

pub const LEARNING_RATE: f64 = 0.01;
pub const CLIP_NORM: f64 = 5.0;
const MAX_DIM: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown archetype {0:?}")]
    UnknownArchetype(String),
    #[error("invalid hyperparameter {name}: {value}")]
    InvalidHyperparams { name: &'static str, value: u64 },
    #[error("target column {0:?} is not numeric")]
    TargetNotNumeric(String),
    #[error("need at least {needed} rows, have {have}")]
    InsufficientRows { needed: usize, have: usize },
    #[error("no complete window to evaluate")]
    NoWindows,
    #[error("training diverged in epoch {epoch}; last finite loss {last_finite_loss:?}")]
    Diverged { epoch: u32, last_finite_loss: Option<f64> },
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("mlp models predict a single step only")]
    SingleStepOnly,
    #[error("corrupt model blob: {0}")]
    CorruptBlob(String),
    #[error("model blob dimensions inconsistent: header implies {expected} weights, body has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model {0:?} already registered")]
    Duplicate(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error(transparent)]
    Data(#[from] DatastoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Mlp,
    Rnn,
    Lstm,
    Gru,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Mlp, Archetype::Rnn, Archetype::Lstm, Archetype::Gru];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Mlp => "mlp",
            Archetype::Rnn => "rnn",
            Archetype::Lstm => "lstm",
            Archetype::Gru => "gru",
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != Archetype::Mlp
    }

    /// Gate blocks per layer (a dense layer counts as one).
    pub fn gate_count(self) -> usize {
        match self {
            Archetype::Mlp | Archetype::Rnn => 1,
            Archetype::Gru => 3,
            Archetype::Lstm => 4,
        }
    }

    pub fn complexity_multiplier(self) -> Decimal {
        let m = match self {
            Archetype::Mlp => "1.0",
            Archetype::Rnn => "1.2",
            Archetype::Gru => "1.6",
            Archetype::Lstm => "1.8",
        };
        m.parse().expect("literal")
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArchetype(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub num_epochs: u32,
    pub target_attrib: String,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub time_lag: usize,
    pub training_lookback: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_split_value: Option<usize>,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, u64, u64); 5] = [
            ("num_epochs", self.num_epochs as u64, 1),
            ("hidden_dim", self.hidden_dim as u64, 1),
            ("num_hidden_layers", self.num_hidden_layers as u64, 1),
            ("training_lookback", self.training_lookback as u64, 1),
            ("time_lag", self.time_lag as u64, 0),
        ];
        for (name, value, lo) in checks {
            if value < lo || value > MAX_DIM {
                return Err(ModelError::InvalidHyperparams { name, value });
            }
        }
        Ok(())
    }

    pub fn shape(&self, archetype: Archetype, input_dim: usize) -> Shape {
        Shape {
            archetype,
            input_dim,
            hidden_dim: self.hidden_dim,
            layers: self.num_hidden_layers,
            lookback: self.training_lookback,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub learning_rate: f64,
    /// Per-example gradient L2-norm cap for recurrent archetypes.
    pub clip_norm: Option<f64>,
    pub train_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: LEARNING_RATE,
            clip_norm: Some(CLIP_NORM),
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

impl TrainOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn unclipped(mut self) -> Self {
        self.clip_norm = None;
        self
    }
}

/// Validation loss (MSE, normalized space) and derived accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

/// `clamp(1 - sqrt(mse), 0, 1)`.
pub fn accuracy_from_mse(mse: f64) -> f64 {
    (1.0 - mse.sqrt()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyperparams: Hyperparams,
    pub features: Vec<String>,
    pub normalization: Normalization,
    pub net: Network,
}

/// An untrained model with identity normalization.
pub fn create_model(
    archetype: Archetype,
    input_dim: usize,
    hyperparams: &Hyperparams,
    seed: u64,
) -> Result<Model, ModelError> {
    hyperparams.validate()?;
    if input_dim == 0 {
        return Err(ModelError::InvalidHyperparams {
            name: "input_dim",
            value: 0,
        });
    }
    let net = Network::random(
        hyperparams.shape(archetype, input_dim),
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    Ok(Model {
        hyperparams: hyperparams.clone(),
        features: std::iter::once(hyperparams.target_attrib.clone())
            .chain((1..input_dim).map(|i| format!("feature_{i}")))
            .collect(),
        normalization: Normalization {
            min: vec![0.0; input_dim],
            max: vec![1.0; input_dim],
        },
        net,
    })
}

impl Model {
    pub fn archetype(&self) -> Archetype {
        self.net.shape().archetype
    }

    pub fn input_dim(&self) -> usize {
        self.net.shape().input_dim
    }

    pub fn lookback(&self) -> usize {
        self.hyperparams.training_lookback
    }

    /// `parameter_count × archetype multiplier`, exact.
    pub fn complexity(&self) -> Decimal {
        Decimal::from_u64(self.net.param_count() as u64).mul(&self.archetype().complexity_multiplier())
    }

    fn check_window(&self, window: &[Vec<f64>]) -> Result<(), ModelError> {
        let expected = self.lookback() * self.input_dim();
        let got: usize = window.iter().map(Vec::len).sum();
        if window.len() != self.lookback() || window.iter().any(|r| r.len() != self.input_dim()) {
            return Err(ModelError::ShapeMismatch { expected, got });
        }
        Ok(())
    }

    /// Splits a flat row-major list into `lookback` rows of `input_dim`.
    pub fn window_from_flat(&self, values: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        let expected = self.lookback() * self.input_dim();
        if values.len() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(values.chunks(self.input_dim()).map(<[f64]>::to_vec).collect())
    }

    fn normalized(&self, window: &[Vec<f64>]) -> Vec<Vec<f64>> {
        window.iter().map(|r| self.normalization.normalize_row(r)).collect()
    }

    /// Next target value after a raw (unnormalized) window.
    pub fn predict(&self, window: &[Vec<f64>]) -> Result<f64, ModelError> {
        self.check_window(window)?;
        let y = self.net.predict(&self.normalized(window));
        Ok(self.normalization.denormalize(0, y))
    }

    /// `steps` successive predictions. Each prediction is fed back as the
    /// target feature of the next input row; other features repeat the last
    /// observed row.
    pub fn predict_steps(&self, window: &[Vec<f64>], steps: usize) -> Result<Vec<f64>, ModelError> {
        if steps > 1 && !self.archetype().is_recurrent() {
            return Err(ModelError::SingleStepOnly);
        }
        self.check_window(window)?;
        let mut seq = self.normalized(window);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let y = self.net.predict(&seq);
            out.push(self.normalization.denormalize(0, y));
            let mut next = seq.last().expect("non-empty window").clone();
            next[0] = y;
            seq.push(next);
        }
        Ok(out)
    }

    /// `clamp(1 - |prediction - truth|, 0, 1)` in normalized target units.
    pub fn query_accuracy(&self, prediction: f64, truth: f64) -> f64 {
        let n = &self.normalization;
        (1.0 - (n.normalize(0, prediction) - n.normalize(0, truth)).abs()).clamp(0.0, 1.0)
    }

    fn evaluate_windows(&self, windows: &[Window]) -> Result<EvalReport, ModelError> {
        if windows.is_empty() {
            return Err(ModelError::NoWindows);
        }
        let mut sq = 0.0;
        let mut predictions = Vec::with_capacity(windows.len());
        let mut targets = Vec::with_capacity(windows.len());
        for w in windows {
            let y = self.net.predict(&w.inputs);
            sq += (y - w.target).powi(2);
            predictions.push(self.normalization.denormalize(0, y));
            targets.push(self.normalization.denormalize(0, w.target));
        }
        let loss = sq / windows.len() as f64;
        Ok(EvalReport {
            loss,
            accuracy: accuracy_from_mse(loss),
            predictions,
            targets,
        })
    }

    /// Scores every complete window of `frame` using the stored scaling.
    pub fn evaluate(&self, frame: &TableFrame) -> Result<EvalReport, ModelError> {
        let rows: Vec<Vec<f64>> = feature_rows(frame, &self.features)?
            .iter()
            .map(|r| self.normalization.normalize_row(r))
            .collect();
        self.evaluate_windows(&windows(&rows, self.lookback(), self.hyperparams.time_lag, 0))
    }

    /// Raw input window whose target is row `target_row` of `frame`, plus
    /// that row's target value.
    pub fn window_for_row(&self, frame: &TableFrame, target_row: usize) -> Result<(Vec<Vec<f64>>, f64), ModelError> {
        let span = self.lookback() + self.hyperparams.time_lag;
        if target_row < span || target_row >= frame.row_count() {
            return Err(ModelError::InsufficientRows {
                needed: span + 1,
                have: target_row.min(frame.row_count()),
            });
        }
        let rows = feature_rows(frame, &self.features)?;
        let window = rows[target_row - span..target_row - self.hyperparams.time_lag].to_vec();
        Ok((window, rows[target_row][0]))
    }
}

#[derive(Debug, Clone)]
pub struct Training {
    pub model: Model,
    pub report: EvalReport,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Trains on the time-ordered prefix of `frame` and evaluates on the rest.
/// Validation windows may reach back into the tail of the training rows
/// for their inputs, but every validation target is a validation row.
pub fn train(
    archetype: Archetype,
    frame: &TableFrame,
    hyperparams: &Hyperparams,
    opts: &TrainOptions,
) -> Result<Training, ModelError> {
    hyperparams.validate()?;
    let features = feature_columns(frame, &hyperparams.target_attrib)?;
    let lookback = hyperparams.training_lookback;
    let lag = hyperparams.time_lag;
    let span = lookback + lag;
    let needed = span + 2;
    if frame.row_count() < needed {
        return Err(ModelError::InsufficientRows {
            needed,
            have: frame.row_count(),
        });
    }
    let (train_frame, val_frame) = frame.train_validation_split(opts.train_fraction)?;
    let train_raw = feature_rows(&train_frame, &features)?;
    let val_raw = feature_rows(&val_frame, &features)?;
    if train_raw.len() <= span {
        return Err(ModelError::InsufficientRows {
            needed: span + 1,
            have: train_raw.len(),
        });
    }

    let normalization = Normalization::fit(&train_raw);
    let train_rows: Vec<Vec<f64>> = train_raw.iter().map(|r| normalization.normalize_row(r)).collect();
    let mut val_rows: Vec<Vec<f64>> = train_rows[train_rows.len() - span..].to_vec();
    val_rows.extend(val_raw.iter().map(|r| normalization.normalize_row(r)));
    let train_windows = windows(&train_rows, lookback, lag, 0);
    let val_windows = windows(&val_rows, lookback, lag, span);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = Network::random(hyperparams.shape(archetype, features.len()), &mut rng);
    let clip = opts.clip_norm.filter(|_| archetype.is_recurrent());
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut loss_history = Vec::with_capacity(hyperparams.num_epochs as usize);
    for epoch in 1..=hyperparams.num_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let w = &train_windows[i];
            let (loss, mut grad) = net.loss_and_gradient(&w.inputs, w.target);
            total += loss;
            if let Some(limit) = clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > limit {
                    let scale = limit / norm;
                    grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            for (p, g) in net.params_mut().iter_mut().zip(&grad) {
                *p -= opts.learning_rate * g;
            }
        }
        let mean = total / train_windows.len() as f64;
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Diverged {
                epoch,
                last_finite_loss: loss_history.last().copied(),
            });
        }
        loss_history.push(mean);
    }

    let model = Model {
        hyperparams: hyperparams.clone(),
        features,
        normalization,
        net,
    };
    let report = model.evaluate_windows(&val_windows)?;
    if !report.loss.is_finite() {
        return Err(ModelError::Diverged {
            epoch: hyperparams.num_epochs,
            last_finite_loss: loss_history.last().copied(),
        });
    }
    Ok(Training {
        model,
        report,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn hp(epochs: u32, hidden: usize, lookback: usize) -> Hyperparams {
        Hyperparams {
            num_epochs: epochs,
            target_attrib: "y".into(),
            hidden_dim: hidden,
            num_hidden_layers: 1,
            time_lag: 0,
            training_lookback: lookback,
            sub_split_value: None,
        }
    }

    fn line(n: usize) -> TableFrame {
        let mut s = String::from("y\n");
        for t in 0..n {
            s.push_str(&format!("{t}\n"));
        }
        TableFrame::parse_csv(s.as_bytes()).unwrap()
    }

    #[test]
    fn complexity_values() {
        let m = create_model(Archetype::Mlp, 1, &hp(1, 5, 10), 0).unwrap();
        assert_eq!(m.complexity(), "61".parse::<Decimal>().unwrap());
        let r = create_model(Archetype::Rnn, 1, &hp(1, 5, 10), 0).unwrap();
        assert_eq!(r.complexity(), "49.2".parse::<Decimal>().unwrap());
        let at = |a, h| create_model(a, 1, &hp(1, h, 1), 0).unwrap().complexity();
        assert!(at(Archetype::Lstm, 5) > at(Archetype::Gru, 5));
        assert!(at(Archetype::Gru, 5) > at(Archetype::Rnn, 5));
        assert!(at(Archetype::Rnn, 5) > at(Archetype::Mlp, 5));
        for a in Archetype::ALL {
            assert!(at(a, 10) > at(a, 5));
        }
    }

    #[test]
    fn hyperparam_bounds() {
        let mut h = hp(70, 5, 10);
        assert!(h.validate().is_ok());
        h.training_lookback = 0;
        assert!(matches!(
            h.validate(),
            Err(ModelError::InvalidHyperparams {
                name: "training_lookback",
                ..
            })
        ));
        let mut h = hp(70, 5, 10);
        h.num_epochs = 10_001;
        assert!(h.validate().is_err());
        assert!("cnn".parse::<Archetype>().is_err());
    }

    #[test]
    fn every_archetype_beats_the_mean_on_a_line() {
        let frame = line(100);
        for a in Archetype::ALL {
            let t = train(a, &frame, &hp(70, 5, 5), &TrainOptions::seeded(1)).unwrap();
            // variance of the whole series in normalized units: the loss of
            // always predicting its mean
            let n = &t.model.normalization;
            let series: Vec<f64> = (0..100).map(|v| n.normalize(0, v as f64)).collect();
            let mean = series.iter().sum::<f64>() / 100.0;
            let var_norm = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(t.report.loss < var_norm, "{a}: {} vs {var_norm}", t.report.loss);
            assert!(t.loss_history[69] < t.loss_history[0], "{a}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let frame = line(40);
        let a = train(Archetype::Gru, &frame, &hp(5, 3, 4), &TrainOptions::seeded(3)).unwrap();
        let b = train(Archetype::Gru, &frame, &hp(5, 3, 4), &TrainOptions::seeded(3)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn insufficient_rows() {
        let err = train(Archetype::Rnn, &line(5), &hp(1, 2, 10), &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::InsufficientRows { .. }));
    }

    #[test]
    fn query_matches_training_output() {
        let frame = line(30);
        let t = train(Archetype::Lstm, &frame, &hp(3, 3, 4), &TrainOptions::seeded(2)).unwrap();
        let (window, truth) = t.model.window_for_row(&frame, 29).unwrap();
        assert_eq!(truth, 29.0);
        let p = t.model.predict(&window).unwrap();
        let last = *t.report.predictions.last().unwrap();
        assert_eq!(p.to_bits(), last.to_bits());
        assert!(matches!(
            t.model.predict(&window[1..]),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn multi_step_only_for_recurrent() {
        let frame = line(30);
        let opts = TrainOptions::seeded(0);
        let mlp = train(Archetype::Mlp, &frame, &hp(2, 3, 4), &opts).unwrap().model;
        let (w, _) = mlp.window_for_row(&frame, 10).unwrap();
        assert!(matches!(mlp.predict_steps(&w, 3), Err(ModelError::SingleStepOnly)));
        assert_eq!(mlp.predict_steps(&w, 1).unwrap().len(), 1);
        let gru = train(Archetype::Gru, &frame, &hp(2, 3, 4), &opts).unwrap().model;
        let steps = gru.predict_steps(&w, 3).unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[0], gru.predict(&w).unwrap());
    }

    #[test]
    fn evaluation_rule() {
        assert_eq!(accuracy_from_mse(0.0), 1.0);
        assert_eq!(accuracy_from_mse(0.25), 0.5);
        assert_eq!(accuracy_from_mse(1.0), 0.0);
        assert_eq!(accuracy_from_mse(4.0), 0.0);
    }
}
