#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use seqdistill::toy::{self, ToyConfig};
use seqdistill_experiment::Workspace;

/// Small clustered dataset, fast enough to train in well under a second.
pub fn small_toy() -> ToyConfig {
    ToyConfig {
        num_users: 40,
        num_items: 24,
        num_clusters: 3,
        min_len: 8,
        max_len: 12,
        target_dim: 8,
        ..ToyConfig::default()
    }
}

/// Writes the small toy dataset under `root/data`.
pub fn write_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    toy::generate(&small_toy()).write(&dir).unwrap();
    dir
}

/// A file-sourced config; `extra` is appended verbatim and may override
/// whole sections that are not already present.
pub fn config_text(train: &str, extra: &str) -> String {
    format!(
        r#"
[data]
name = "small"
interactions = "data/interactions.tsv"
items = "data/items.tsv"
k_core = 2
max_len = 12

[model]
architecture = "causal"
hidden_dim = 8
num_layers = 1
num_heads = 2
dropout = 0.1

[train]
{train}

[pooling]
strategy = "mean"

[experiment]
seeds = [0, 1]
out_dir = "out"
{extra}
"#
    )
}

pub const FILE_PROFILE: &str = r#"
[profile]
source = "file"
targets_file = "data/targets.tsv"
"#;

pub const QUICK_TRAIN: &str = "epochs = 4\nbatch_size = 16\nlearning_rate = 5e-3";

/// Dataset plus config file in a fresh directory; returns the config path.
pub fn setup(root: &Path, train: &str, extra: &str) -> PathBuf {
    write_data(root);
    let path = root.join("config.toml");
    fs::write(&path, config_text(train, extra)).unwrap();
    path
}

pub fn workspace(config: &Path) -> Workspace {
    Workspace::open(config, None, false).unwrap()
}

pub fn workspace_at(config: &Path, out: &Path) -> Workspace {
    Workspace::open(config, Some(out.to_path_buf()), false).unwrap()
}
