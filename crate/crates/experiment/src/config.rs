//! Declarative experiment configuration.
//!
//! One TOML file with a section per pipeline stage:
//!
//! ```toml
//! [data]        # input files, column mapping, k-core, split, max_len
//! [profile]     # target source, prompt, LLM and encoder clients, projection
//! [model]       # transformer shape
//! [train]       # epochs, batch size, learning rate, clipping
//! [distill]     # alpha, dynamic beta, layer, phase-1 fraction
//! [pooling]     # required: strategy = "mean" | "exp", gamma
//! [eval]        # cut-offs
//! [experiment]  # seeds, output directory
//! [grid]        # optional hyperparameter grid over `train`
//! [ablation]    # alpha x dynamic-beta cells
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Environment interpolation is allowed only in `api_key` fields, and only
//! in the exact form `${NAME}`; the variable is read when a client is
//! built, so secrets never reach digests or manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use seqdistill::data::{LogFormat, MetaField};
use seqdistill::digest::sha256_hex;
use seqdistill::distill::{DistillationConfig, TrainConfig};
use seqdistill::model::{Architecture, ModelConfig, PoolingConfig};
use seqdistill::profile::{ProjectionMethod, RetryPolicy, UmapParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillSection,
    pub pooling: PoolingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset label used in reports.
    pub name: String,
    pub interactions: PathBuf,
    /// Optional item metadata table with an `item_id` column.
    #[serde(default)]
    pub items: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMapping,
    #[serde(default = "default_k_core")]
    pub k_core: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Largest tolerated fraction of malformed rows.
    #[serde(default = "default_malformed")]
    pub malformed_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default = "default_user")]
    pub user: String,
    #[serde(default = "default_item")]
    pub item: String,
    #[serde(default = "default_timestamp")]
    pub timestamp: String,
    #[serde(default = "default_rating")]
    pub rating: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            delimiter: default_delimiter(),
            has_header: true,
            user: default_user(),
            item: default_item(),
            timestamp: default_timestamp(),
            rating: default_rating(),
        }
    }
}

impl ColumnMapping {
    pub fn log_format(&self) -> LogFormat {
        LogFormat {
            delimiter: self.delimiter,
            has_header: self.has_header,
            user_column: self.user.clone(),
            item_column: self.item.clone(),
            timestamp_column: self.timestamp.clone(),
            rating_column: self.rating.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    /// Generate, encode and project profiles.
    Llm,
    /// Read precomputed targets (`user_id<TAB>v1,v2,...`).
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default = "default_source")]
    pub source: TargetSource,
    #[serde(default)]
    pub targets_file: Option<PathBuf>,
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default = "default_fields")]
    pub metadata_fields: Vec<MetaField>,
    #[serde(default)]
    pub rating_threshold: Option<f64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Write the store without users whose profile failed; training then
    /// masks their distillation term. Off: the stage fails and a rerun
    /// resumes from the cache.
    #[serde(default)]
    pub allow_failed_profiles: bool,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub projection: ProjectionSection,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            targets_file: None,
            domain: default_domain(),
            metadata_fields: default_fields(),
            rating_threshold: None,
            parallelism: default_parallelism(),
            retry: RetryPolicy::default(),
            allow_failed_profiles: false,
            llm: LlmSection::default(),
            encoder: EncoderSection::default(),
            projection: ProjectionSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    #[serde(default)]
    pub mock: bool,
    #[serde(default = "default_llm_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_llm_model")]
    pub model: String,
    /// `${NAME}` of the environment variable holding the key.
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            mock: false,
            endpoint: default_llm_endpoint(),
            model: default_llm_model(),
            api_key: None,
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default)]
    pub mock: bool,
    #[serde(default = "default_encoder_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_encoder_model")]
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_encoder_dim")]
    pub dim: usize,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    #[serde(default = "default_encoder_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            mock: false,
            endpoint: default_encoder_endpoint(),
            model: default_encoder_model(),
            api_key: None,
            dim: default_encoder_dim(),
            prefix: default_prefix(),
            batch_size: default_encoder_batch(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    #[serde(default = "default_method")]
    pub method: ProjectionMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub umap: UmapParams,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            seed: 0,
            umap: UmapParams::default(),
        }
    }
}

/// [`ModelConfig`] minus the fields derived from the data (`num_items`,
/// `max_len`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
}

/// [`DistillationConfig`] minus pooling, which has its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub use_dynamic_beta: bool,
    #[serde(default = "default_beta_eps")]
    pub beta_eps: f64,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default = "default_phase1")]
    pub phase1_fraction: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            use_dynamic_beta: true,
            beta_eps: default_beta_eps(),
            layer: None,
            phase1_fraction: default_phase1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: default_k() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            out_dir: default_out(),
        }
    }
}

/// Absent lists keep the base value; present lists must be non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// `select` scores grid points on the training records at or after
    /// this temporal fraction of the training split, after training on
    /// the records before it.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub learning_rate: Option<Vec<f64>>,
    #[serde(default)]
    pub batch_size: Option<Vec<usize>>,
    #[serde(default)]
    pub dropout: Option<Vec<f64>>,
    #[serde(default)]
    pub num_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub num_heads: Option<Vec<usize>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            validation_fraction: default_validation_fraction(),
            learning_rate: None,
            batch_size: None,
            dropout: None,
            num_layers: None,
            num_heads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_alpha_grid")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_beta_grid")]
    pub dynamic_beta: Vec<bool>,
    /// Defaults to `experiment.seeds`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha_grid(),
            dynamic_beta: default_beta_grid(),
            seeds: None,
        }
    }
}

fn default_k_core() -> usize {
    5
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_max_len() -> usize {
    50
}
fn default_malformed() -> f64 {
    0.01
}
fn default_delimiter() -> char {
    '\t'
}
fn default_true() -> bool {
    true
}
fn default_user() -> String {
    "user_id".into()
}
fn default_item() -> String {
    "item_id".into()
}
fn default_timestamp() -> String {
    "timestamp".into()
}
fn default_rating() -> Option<String> {
    Some("rating".into())
}
fn default_source() -> TargetSource {
    TargetSource::Llm
}
fn default_domain() -> String {
    "online catalog".into()
}
fn default_fields() -> Vec<MetaField> {
    vec![MetaField::Title, MetaField::Categories, MetaField::Genres]
}
fn default_parallelism() -> usize {
    4
}
fn default_llm_endpoint() -> String {
    "http://localhost:8000/v1/chat/completions".into()
}
fn default_llm_model() -> String {
    seqdistill::profile::HttpChatClient::DEFAULT_MODEL.into()
}
fn default_encoder_endpoint() -> String {
    "http://localhost:8001/v1/embeddings".into()
}
fn default_encoder_model() -> String {
    seqdistill::profile::HttpEmbeddingClient::DEFAULT_MODEL.into()
}
fn default_encoder_dim() -> usize {
    1024
}
fn default_prefix() -> String {
    "passage: ".into()
}
fn default_encoder_batch() -> usize {
    32
}
fn default_timeout() -> u64 {
    120
}
fn default_method() -> ProjectionMethod {
    ProjectionMethod::Umap
}
fn default_dropout() -> f64 {
    0.2
}
fn default_mask_prob() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    0.4
}
fn default_beta_eps() -> f64 {
    1e-8
}
fn default_phase1() -> f64 {
    0.5
}
fn default_k() -> Vec<usize> {
    vec![10, 20]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_validation_fraction() -> f64 {
    0.9
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.4, 0.6, 0.8]
}
fn default_beta_grid() -> Vec<bool> {
    vec![false, true]
}

/// Name of the environment variable in a `${NAME}` secret reference.
pub fn secret_var(reference: &str) -> Result<&str> {
    let name = reference
        .strip_prefix("${")
        .and_then(|r| r.strip_suffix('}'))
        .filter(|n| {
            let mut chars = n.chars();
            chars
                .next()
                .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
        .ok_or_else(|| {
            CliError::Config(format!(
                "api_key must have the form ${{NAME}}, got `{reference}`"
            ))
        })?;
    Ok(name)
}

fn check_interpolation(value: &toml::Value, path: &str) -> Result<()> {
    let secret_field = path.ends_with(".api_key") || path == "api_key";
    match value {
        toml::Value::String(s) if secret_field => secret_var(s).map(|_| ()),
        toml::Value::String(s) if s.contains("${") => Err(CliError::Config(format!(
            "`{path}`: environment interpolation is only allowed in api_key fields"
        ))),
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                check_interpolation(v, &p)?;
            }
            Ok(())
        }
        toml::Value::Array(a) => a.iter().try_for_each(|v| check_interpolation(v, path)),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        check_interpolation(&toml::Value::Table(raw), "")?;
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.name.trim().is_empty() {
            return bad("data.name is empty".into());
        }
        if self.data.k_core == 0 {
            return bad("data.k_core must be at least 1".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!(
                "data.train_fraction {} outside (0, 1)",
                self.data.train_fraction
            ));
        }
        if self.data.max_len < 2 {
            return bad("data.max_len must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.data.malformed_limit) {
            return bad("data.malformed_limit outside [0, 1]".into());
        }
        if self.profile.source == TargetSource::File && self.profile.targets_file.is_none() {
            return bad("profile.source = \"file\" needs profile.targets_file".into());
        }
        if self.profile.parallelism == 0 || self.profile.encoder.batch_size == 0 {
            return bad(
                "profile.parallelism and profile.encoder.batch_size must be positive".into(),
            );
        }
        self.model_config(1)?;
        self.train.validate()?;
        self.distillation_config().validate(self.model.num_layers)?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return bad("eval.k must be a non-empty list of positive cut-offs".into());
        }
        check_seeds("experiment.seeds", &self.experiment.seeds)?;
        if let Some(s) = &self.ablation.seeds {
            check_seeds("ablation.seeds", s)?;
        }
        if self.ablation.alpha.is_empty() || self.ablation.dynamic_beta.is_empty() {
            return bad("ablation grids must be non-empty".into());
        }
        if let Some(a) = self
            .ablation
            .alpha
            .iter()
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return bad(format!("ablation alpha {a} outside [0, 1]"));
        }
        let g = &self.grid;
        if !(g.validation_fraction > 0.0 && g.validation_fraction < 1.0) {
            return bad(format!(
                "grid.validation_fraction {} outside (0, 1)",
                g.validation_fraction
            ));
        }
        let empty = [
            ("learning_rate", g.learning_rate.as_ref().map(Vec::len)),
            ("batch_size", g.batch_size.as_ref().map(Vec::len)),
            ("dropout", g.dropout.as_ref().map(Vec::len)),
            ("num_layers", g.num_layers.as_ref().map(Vec::len)),
            ("num_heads", g.num_heads.as_ref().map(Vec::len)),
        ]
        .into_iter()
        .find(|(_, n)| *n == Some(0));
        if let Some((name, _)) = empty {
            return bad(format!("grid.{name} is empty"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_items: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            architecture: m.architecture,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            dropout: m.dropout,
            max_len: self.data.max_len,
            num_items,
            mask_prob: m.mask_prob,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn distillation_config(&self) -> DistillationConfig {
        let d = &self.distill;
        DistillationConfig {
            alpha: d.alpha,
            use_dynamic_beta: d.use_dynamic_beta,
            beta_eps: d.beta_eps,
            layer: d.layer,
            pooling: self.pooling,
            phase1_fraction: d.phase1_fraction,
        }
    }

    pub fn ablation_seeds(&self) -> &[u64] {
        self.ablation
            .seeds
            .as_deref()
            .unwrap_or(&self.experiment.seeds)
    }

    /// Digest of the whole configuration as parsed.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

fn check_seeds(what: &str, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CliError::Config(format!("{what} is empty")));
    }
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(CliError::Config(format!("{what} contains duplicates")));
    }
    Ok(())
}

/// SHA-256 of the compact JSON form of `value`.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config values serialize"))
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    /// `key=value` pairs of the gridded settings, for logs.
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cartesian product of the configured grids over the base config, in
/// lexicographic order of (learning rate, batch size, dropout, layers,
/// heads). Without grids the base config is the single point.
pub fn expand_grid(base: &ExperimentConfig) -> Vec<GridPoint> {
    let g = &base.grid;
    let lrs = g
        .learning_rate
        .clone()
        .unwrap_or_else(|| vec![base.train.learning_rate]);
    let bss = g
        .batch_size
        .clone()
        .unwrap_or_else(|| vec![base.train.batch_size]);
    let drops = g
        .dropout
        .clone()
        .unwrap_or_else(|| vec![base.model.dropout]);
    let layers = g
        .num_layers
        .clone()
        .unwrap_or_else(|| vec![base.model.num_layers]);
    let heads = g
        .num_heads
        .clone()
        .unwrap_or_else(|| vec![base.model.num_heads]);
    let mut out = Vec::new();
    for &lr in &lrs {
        for &bs in &bss {
            for &dr in &drops {
                for &nl in &layers {
                    for &nh in &heads {
                        let mut c = base.clone();
                        c.train.learning_rate = lr;
                        c.train.batch_size = bs;
                        c.model.dropout = dr;
                        c.model.num_layers = nl;
                        c.model.num_heads = nh;
                        c.grid = GridConfig {
                            validation_fraction: g.validation_fraction,
                            ..GridConfig::default()
                        };
                        out.push(GridPoint {
                            label: format!(
                                "lr={lr} batch_size={bs} dropout={dr} layers={nl} heads={nh}"
                            ),
                            config: c,
                        });
                    }
                }
            }
        }
    }
    out
}
