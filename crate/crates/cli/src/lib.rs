//! Experiment runner behind the `pixcon` binary: config parsing, training
//! runs, multi-seed comparisons, oracle suites and embedding export.

pub mod compare;
pub mod config;
pub mod error;
pub mod export;
pub mod train;
pub mod verify;

pub use compare::{run_compare, CompareReport};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use export::run_export;
pub use train::{run_train, Summary};
pub use verify::{run_verify, Suite, VerifyReport};
