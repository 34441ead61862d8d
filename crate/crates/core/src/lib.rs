//! Deterministic federated-learning simulator: FedFOR and the usual baselines
//! (FedAvg, FedProx, FedCurv, FedPD/FedDyn, SCAFFOLD) under prior, covariate
//! and concept shift.

pub mod client;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod ledger;
pub mod metrics;
pub mod nn;
pub mod regularizer;
pub mod seed;
pub mod server;

pub use client::{HyperParams, Method};
pub use config::{parse_config, ExperimentConfig};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_single, summarize_dir};
pub use metrics::{RunHistory, SummaryTable};
pub use nn::{ModelSpec, ParamVector};
pub use server::{ClientPool, PoolMode, ServerState};
