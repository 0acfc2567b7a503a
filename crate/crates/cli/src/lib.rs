//! Experiment runner for gradient-aware open-set separation: TOML experiment
//! configs, an append-only JSON-lines results ledger, result tables, synthetic
//! data export, and a self-verification suite.

pub mod check;
pub mod config;
mod error;
pub mod run;
pub mod table;

pub use error::{CliError, CliResult};
