//! Experiment harness for state-space deep Gaussian process regression: synthetic signals,
//! Monte Carlo repetition of solvers, hyperparameter grid search, strain-file ingestion and
//! result emission.

pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod ingest;
pub mod output;
pub mod signals;

pub use config::{ExperimentConfig, OutputFormat, SolverKind};
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, ExperimentReport};
pub use grid::{grid_search, GridSpec};
