//! Blockchain-messaged marketplace for predictive models.
//!
//! Client and oracle nodes exchange requests and responses as notes on
//! ledger payments. The oracle stores datasets, trains archetype time-series
//! models (MLP, RNN, LSTM, GRU), answers queries, and pays rewards computed
//! from dataset size, model accuracy and oracle-set multipliers.

pub mod audit;
pub mod client;
pub mod config;
pub mod datastore;
pub mod decimal;
pub mod ledger;
pub mod models;
pub mod monitor;
pub mod net;
pub mod node;
pub mod oracle;
pub mod protocol;
pub mod tokenomics;

pub use decimal::Decimal;
