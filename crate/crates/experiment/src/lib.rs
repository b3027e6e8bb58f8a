//! Configuration-driven experiment runner: ingest, profile, train,
//! evaluate and ablate, with digest-checked manifests for every stage.
//!
//! Output layout under the workspace output directory:
//!
//! - `ingest/`: split logs, sequences, catalog, stats, malformed-row report;
//! - `profile/`: profile cache, frozen target store, projection summary;
//! - `runs/{variant}-{digest12}-s{seed}/`: checkpoints, trajectory;
//! - `eval/`, `reports/`: per-run metrics, aggregates, results table;
//! - `ablation/`: the alpha x dynamic-beta table;
//! - `selection/`: validation scores of the `[grid]` points.
//!
//! Each stage directory holds a `manifest.json` with input and output
//! digests; a stage is skipped when its manifest still verifies.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod runner;

pub use config::{expand_grid, ExperimentConfig};
pub use error::{CliError, Result};
pub use manifest::{Manifest, RunLock};
pub use pipeline::{
    cmd_ingest, cmd_profile, cmd_profile_with, load_ingest, load_targets, Workspace,
};
pub use runner::{
    cmd_ablate, cmd_evaluate, cmd_select, cmd_train, cmd_verify, evaluate_run, reproduce_run,
    train_run, AblationOutcome, RunInputs, RunSpec, SelectionOutcome,
};
