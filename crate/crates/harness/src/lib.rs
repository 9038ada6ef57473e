//! Experiment driver for tree-gated exogenous ensembles: dataset export,
//! exogenous pretraining, single runs, the architecture ladder, gating and λ
//! sweeps, introspection exports and the gradient-check battery.
//!
//! Every run lives in `<out>/runs/<digest>/` where the digest is the SHA-256
//! of the canonical JSON form of its
//! [`ExperimentConfig`](thin_core::config::ExperimentConfig); pretrained
//! exogenous networks live in `<out>/exo/<digest>/` keyed the same way.

pub mod experiments;
pub mod generate;
pub mod introspect;
pub mod runs;
pub mod stats;
pub mod table;

pub use runs::{Harness, RunResult, RunStatus, RunTemplate};
pub use table::{Check, ResultTable};

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<thin_core::Error>() {
        Some(thin_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

/// Shorthand for a configuration error.
pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    thin_core::Error::Config(msg.into()).into()
}
