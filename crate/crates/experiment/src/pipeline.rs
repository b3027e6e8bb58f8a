//! Workspace layout and the ingest and profile stages.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use seqdistill::data::{
    build_sequences, dataset_stats, k_core_filter, read_interactions, read_item_metadata,
    read_sequences, temporal_split, user_item_sets, write_records, write_sequences, Catalog,
    DatasetStats, InteractionRecord, LogFormat, UserSequence,
};
use seqdistill::profile::llm::ProfileRequest;
use seqdistill::profile::{
    aggregate_metadata, encode_profiles, fit_projection, generate_profiles, render_prompt,
    HttpChatClient, HttpEmbeddingClient, LlmClient, MockEncoder, MockLlm, ProfileCache,
    ProjectionMethod, PromptTemplate, TargetStore, TextEncoder,
};
use serde::{Deserialize, Serialize};

use crate::config::{digest_json, secret_var, ExperimentConfig, TargetSource};
use crate::error::{CliError, Result};
use crate::manifest::{digest_file, digest_outputs, now_secs, Manifest, RunLock, CODE_VERSION};

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const CATALOG_FILE: &str = "catalog.json";
pub const STATS_FILE: &str = "stats.json";
pub const MALFORMED_FILE: &str = "malformed.tsv";
pub const CACHE_FILE: &str = "profiles.jsonl";
pub const PROJECTION_FILE: &str = "projection.json";

/// A loaded config plus where its inputs and outputs live.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: ExperimentConfig,
    /// Directory that relative config paths resolve against.
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Forces the mock LLM and mock encoder regardless of the config.
    pub mock_llm: bool,
}

impl Workspace {
    pub fn open(config_path: &Path, out: Option<PathBuf>, mock_llm: bool) -> Result<Self> {
        let config = ExperimentConfig::load(config_path)?;
        let base_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self::new(config, base_dir, out, mock_llm))
    }

    pub fn new(
        config: ExperimentConfig,
        base_dir: PathBuf,
        out: Option<PathBuf>,
        mock_llm: bool,
    ) -> Self {
        let out_dir = out.unwrap_or_else(|| base_dir.join(&config.experiment.out_dir));
        Self {
            config,
            base_dir,
            out_dir,
            mock_llm,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.out_dir.join("ingest")
    }

    pub fn profile_dir(&self) -> PathBuf {
        self.out_dir.join("profile")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.out_dir.join("ablation")
    }

    pub fn selection_dir(&self) -> PathBuf {
        self.out_dir.join("selection")
    }

    fn mock_llm_active(&self) -> bool {
        self.mock_llm || self.config.profile.llm.mock
    }

    fn mock_encoder_active(&self) -> bool {
        self.mock_llm || self.config.profile.encoder.mock
    }
}

fn existing_input(ws: &Workspace, path: &Path, what: &str) -> Result<PathBuf> {
    let p = ws.resolve(path);
    if !p.is_file() {
        return Err(CliError::Artifact(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total_rows: usize,
    pub malformed_rows: usize,
    pub raw: DatasetStats,
    /// After k-core filtering.
    pub filtered: DatasetStats,
    pub train: DatasetStats,
    pub test: DatasetStats,
    pub threshold: u64,
    pub sequences: usize,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub up_to_date: bool,
    pub stats: IngestStats,
}

/// Parses, filters and splits the interaction log into `out/ingest`.
/// Reruns with unchanged inputs and settings do no work.
pub fn cmd_ingest(ws: &Workspace) -> Result<IngestOutcome> {
    let data = &ws.config.data;
    let log_path = existing_input(ws, &data.interactions, "interaction log")?;
    let items_path = data
        .items
        .as_ref()
        .map(|p| existing_input(ws, p, "item metadata"))
        .transpose()?;
    let mut inputs = BTreeMap::from([("interactions".to_string(), digest_file(&log_path)?)]);
    if let Some(p) = &items_path {
        inputs.insert("items".into(), digest_file(p)?);
    }
    let dir = ws.ingest_dir();
    let config_digest = digest_json(data);
    if let Some(m) = Manifest::read(&dir)? {
        if m.config_digest == config_digest
            && m.stale_input(&inputs).is_none()
            && m.verify_outputs(&dir).is_none()
        {
            let stats = serde_json::from_slice(&fs::read(dir.join(STATS_FILE))?)?;
            info!("ingest: up-to-date");
            return Ok(IngestOutcome {
                up_to_date: true,
                stats,
            });
        }
    }
    let _lock = RunLock::acquire(&dir)?;
    let started = now_secs();
    let _ = fs::remove_file(Manifest::path(&dir));

    let format: LogFormat = data.columns.log_format();
    let parsed = read_interactions(BufReader::new(File::open(&log_path)?), &format)?;
    let mut report = BufWriter::new(File::create(dir.join(MALFORMED_FILE))?);
    writeln!(report, "line\treason")?;
    for (line, reason) in &parsed.malformed {
        writeln!(report, "{line}\t{reason}")?;
    }
    report.flush()?;
    if !parsed.malformed.is_empty() {
        warn!(
            "{} of {} rows malformed (first at line {}); see {}",
            parsed.malformed.len(),
            parsed.total_rows,
            parsed.malformed[0].0,
            dir.join(MALFORMED_FILE).display()
        );
    }
    parsed.check_malformed(data.malformed_limit)?;

    let metadata = match &items_path {
        Some(p) => read_item_metadata(BufReader::new(File::open(p)?), format.delimiter)?,
        None => HashMap::new(),
    };
    let filtered = k_core_filter(&parsed.records, data.k_core);
    let split = temporal_split(&filtered, data.train_fraction)?;
    let catalog = Catalog::build(&filtered, &metadata);
    let sequences = build_sequences(&split.train, &catalog, data.max_len);

    write_records(
        BufWriter::new(File::create(dir.join(TRAIN_FILE))?),
        &split.train,
    )?;
    write_records(
        BufWriter::new(File::create(dir.join(TEST_FILE))?),
        &split.test,
    )?;
    write_sequences(
        BufWriter::new(File::create(dir.join(SEQUENCES_FILE))?),
        &sequences,
    )?;
    fs::write(dir.join(CATALOG_FILE), serde_json::to_vec(&catalog)?)?;
    let stats = IngestStats {
        total_rows: parsed.total_rows,
        malformed_rows: parsed.malformed.len(),
        raw: dataset_stats(&parsed.records),
        filtered: dataset_stats(&filtered),
        train: dataset_stats(&split.train),
        test: dataset_stats(&split.test),
        threshold: split.threshold,
        sequences: sequences.len(),
    };
    fs::write(
        dir.join(STATS_FILE),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;

    let outputs = digest_outputs(
        &dir,
        &[
            TRAIN_FILE,
            TEST_FILE,
            SEQUENCES_FILE,
            CATALOG_FILE,
            STATS_FILE,
            MALFORMED_FILE,
        ],
    )?;
    Manifest {
        kind: "ingest".into(),
        config_digest,
        code_version: CODE_VERSION.into(),
        seed: None,
        started_at: started,
        finished_at: now_secs(),
        inputs,
        outputs,
        spec: Some(serde_json::to_value(data)?),
    }
    .write(&dir)?;
    Ok(IngestOutcome {
        up_to_date: false,
        stats,
    })
}

/// Verified ingest outputs.
#[derive(Debug, Clone)]
pub struct IngestArtifacts {
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub catalog: Catalog,
    pub sequences: Vec<UserSequence>,
    /// Training items per user, chronological and untruncated.
    pub histories: BTreeMap<String, Vec<usize>>,
    pub test_items: BTreeMap<String, Vec<usize>>,
    pub manifest: Manifest,
}

impl IngestArtifacts {
    pub fn sequences_digest(&self) -> &str {
        &self.manifest.outputs[SEQUENCES_FILE]
    }

    /// Digest identifying the split: train, test and catalog together.
    pub fn split_digest(&self) -> String {
        digest_json(&[
            &self.manifest.outputs[TRAIN_FILE],
            &self.manifest.outputs[TEST_FILE],
            &self.manifest.outputs[CATALOG_FILE],
        ])
    }
}

pub fn load_ingest(ws: &Workspace) -> Result<IngestArtifacts> {
    let dir = ws.ingest_dir();
    let manifest = Manifest::read(&dir)?.ok_or_else(|| {
        CliError::Artifact(format!(
            "no ingest artifacts in {}; run `seqdistill ingest` first",
            dir.display()
        ))
    })?;
    if let Some(reason) = manifest.verify_outputs(&dir) {
        return Err(CliError::Artifact(format!(
            "ingest artifacts in {} are stale ({reason}); rerun `seqdistill ingest`",
            dir.display()
        )));
    }
    if manifest.config_digest != digest_json(&ws.config.data) {
        return Err(CliError::Artifact(format!(
            "ingest artifacts in {} were built from a different [data] section; rerun `seqdistill ingest`",
            dir.display()
        )));
    }
    let fmt = LogFormat::default();
    let read_log = |name: &str| -> Result<Vec<InteractionRecord>> {
        let parsed = read_interactions(BufReader::new(File::open(dir.join(name))?), &fmt)?;
        if !parsed.malformed.is_empty() {
            return Err(CliError::Artifact(format!(
                "{name} has malformed rows; rerun `seqdistill ingest`"
            )));
        }
        Ok(parsed.records)
    };
    let train = read_log(TRAIN_FILE)?;
    let test = read_log(TEST_FILE)?;
    let mut catalog: Catalog = serde_json::from_slice(&fs::read(dir.join(CATALOG_FILE))?)?;
    catalog.reindex();
    let sequences = read_sequences(BufReader::new(File::open(dir.join(SEQUENCES_FILE))?))?;
    let histories = user_item_sets(&train, &catalog);
    let test_items = user_item_sets(&test, &catalog);
    Ok(IngestArtifacts {
        train,
        test,
        catalog,
        sequences,
        histories,
        test_items,
        manifest,
    })
}

#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub up_to_date: bool,
    pub store_digest: String,
    pub num_targets: usize,
    /// Profiles generated by the client in this invocation.
    pub generated: usize,
    pub cache_hits: usize,
}

fn profile_config_digest(ws: &Workspace) -> String {
    let c = &ws.config;
    digest_json(&serde_json::json!({
        "data": c.data,
        "profile": c.profile,
        "hidden_dim": c.model.hidden_dim,
        "mock_llm": ws.mock_llm_active(),
        "mock_encoder": ws.mock_encoder_active(),
    }))
}

fn profile_inputs(ws: &Workspace, ingest: &IngestArtifacts) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::from([
        (
            "sequences".to_string(),
            ingest.sequences_digest().to_string(),
        ),
        (
            "catalog".to_string(),
            ingest.manifest.outputs[CATALOG_FILE].clone(),
        ),
    ]);
    if ws.config.profile.source == TargetSource::File {
        let p = ws.config.profile.targets_file.as_ref().expect("validated");
        inputs.insert(
            "targets_file".into(),
            digest_file(&existing_input(ws, p, "targets file")?)?,
        );
    }
    Ok(inputs)
}

/// Builds the configured clients and runs [`cmd_profile_with`].
pub fn cmd_profile(ws: &Workspace) -> Result<ProfileOutcome> {
    let p = &ws.config.profile;
    let llm: Box<dyn LlmClient> = if ws.mock_llm_active() || p.source == TargetSource::File {
        Box::new(MockLlm::new())
    } else {
        let key = p.llm.api_key.as_deref().map(secret_var).transpose()?;
        check_secret(key)?;
        Box::new(HttpChatClient::new(
            &p.llm.endpoint,
            &p.llm.model,
            key,
            Duration::from_secs(p.llm.timeout_secs),
        ))
    };
    let encoder: Box<dyn TextEncoder> =
        if ws.mock_encoder_active() || p.source == TargetSource::File {
            Box::new(MockEncoder::new(p.encoder.dim.max(1)))
        } else {
            let key = p.encoder.api_key.as_deref().map(secret_var).transpose()?;
            check_secret(key)?;
            Box::new(HttpEmbeddingClient::new(
                &p.encoder.endpoint,
                &p.encoder.model,
                key,
                p.encoder.dim,
                &p.encoder.prefix,
                Duration::from_secs(p.encoder.timeout_secs),
            ))
        };
    cmd_profile_with(ws, llm.as_ref(), encoder.as_ref())
}

fn check_secret(var: Option<&str>) -> Result<()> {
    match var {
        Some(v) if std::env::var(v).is_err() => Err(CliError::Config(format!(
            "environment variable {v} (api_key) is not set"
        ))),
        _ => Ok(()),
    }
}

/// Produces the frozen target store in `out/profile`. Generated profiles
/// are cached per user and prompt, so an interrupted run resumes where it
/// stopped.
pub fn cmd_profile_with(
    ws: &Workspace,
    llm: &dyn LlmClient,
    encoder: &dyn TextEncoder,
) -> Result<ProfileOutcome> {
    let cfg = &ws.config;
    let p = &cfg.profile;
    let d = cfg.model.hidden_dim;
    // dimension checks come before any client call
    let file_targets = match p.source {
        TargetSource::File => {
            let path = existing_input(
                ws,
                p.targets_file.as_ref().expect("validated"),
                "targets file",
            )?;
            let store = TargetStore::read_tsv(BufReader::new(File::open(&path)?))?;
            if seqdistill::distill::TargetLookup::dim(&store) != d {
                return Err(CliError::Config(format!(
                    "targets in {} have dimension {} but model.hidden_dim is {d}",
                    path.display(),
                    seqdistill::distill::TargetLookup::dim(&store)
                )));
            }
            Some(store)
        }
        TargetSource::Llm => {
            let e = encoder.output_dim();
            let ok = match p.projection.method {
                ProjectionMethod::Identity => e == d,
                ProjectionMethod::Pca | ProjectionMethod::Umap => e > d,
            };
            if !ok {
                return Err(CliError::Config(format!(
                    "{:?} projection cannot map encoder dimension {e} to model.hidden_dim {d}",
                    p.projection.method
                )));
            }
            None
        }
    };

    let ingest = load_ingest(ws)?;
    let dir = ws.profile_dir();
    let inputs = profile_inputs(ws, &ingest)?;
    let config_digest = profile_config_digest(ws);
    if let Some(m) = Manifest::read(&dir)? {
        if m.config_digest == config_digest
            && m.stale_input(&inputs).is_none()
            && m.verify_outputs(&dir).is_none()
        {
            let store = TargetStore::read(&dir)?;
            info!("profile: up-to-date");
            return Ok(ProfileOutcome {
                up_to_date: true,
                store_digest: store.digest(),
                num_targets: store.len(),
                generated: 0,
                cache_hits: 0,
            });
        }
    }
    let _lock = RunLock::acquire(&dir)?;
    let started = now_secs();
    let _ = fs::remove_file(Manifest::path(&dir));

    let (store, description, generated, cache_hits) = match file_targets {
        Some(store) => (store, serde_json::json!({"source": "file"}), 0, 0),
        None => {
            let template = PromptTemplate::standard(
                p.domain.clone(),
                p.metadata_fields.clone(),
                p.rating_threshold,
            )?;
            let requests = ingest
                .sequences
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let doc = aggregate_metadata(s, &ingest.catalog, &template)?;
                    Ok(ProfileRequest {
                        user_id: s.user_id.clone(),
                        prompt: render_prompt(&doc, &template),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let cache = ProfileCache::open(&dir.join(CACHE_FILE))?;
            let report = generate_profiles(&requests, llm, &cache, p.parallelism, &p.retry)?;
            if let Some((user, reason)) = report.failures.first() {
                let msg = format!(
                    "{} of {} profiles failed (first: {user}: {reason}); {} profiles are cached in {}",
                    report.failures.len(),
                    requests.len(),
                    cache.len(),
                    dir.join(CACHE_FILE).display()
                );
                if !p.allow_failed_profiles {
                    return Err(CliError::External(format!("{msg}; rerun to resume")));
                }
                warn!("{msg}; those users train without a distillation target");
            }
            let encoded =
                encode_profiles(&report.profiles, encoder, p.encoder.batch_size, &p.retry)?;
            if let Some((user, reason)) = encoded.failures.first() {
                let msg = format!(
                    "{} profiles could not be encoded (first: {user}: {reason})",
                    encoded.failures.len()
                );
                if !p.allow_failed_profiles {
                    return Err(CliError::External(msg));
                }
                warn!("{msg}; those users train without a distillation target");
            }
            if encoded.user_ids.is_empty() {
                return Err(CliError::External(
                    "no profile could be generated and encoded".into(),
                ));
            }
            let projection = fit_projection(
                encoded.embeddings.view(),
                d,
                p.projection.method,
                p.projection.seed,
                &p.projection.umap,
            )?;
            let targets = projection.project(&encoded.user_ids, encoded.embeddings.view())?;
            let description = serde_json::json!({
                "source": "llm",
                "generator": llm.id(),
                "encoder": encoder.id(),
                "profiles": report.profiles.len(),
                "projection": projection.describe(),
            });
            let generated = report.profiles.len() - report.cache_hits;
            (
                TargetStore::from_targets(targets)?,
                description,
                generated,
                report.cache_hits,
            )
        }
    };
    let store_digest = store.write(&dir)?;
    fs::write(
        dir.join(PROJECTION_FILE),
        serde_json::to_string_pretty(&description)? + "\n",
    )?;
    let names = TargetStore::paths(&dir)
        .map(|p| p.file_name().expect("file").to_string_lossy().into_owned());
    let mut out_names: Vec<&str> = names.iter().map(String::as_str).collect();
    out_names.push(PROJECTION_FILE);
    Manifest {
        kind: "profile".into(),
        config_digest,
        code_version: CODE_VERSION.into(),
        seed: Some(p.projection.seed),
        started_at: started,
        finished_at: now_secs(),
        inputs,
        outputs: digest_outputs(&dir, &out_names)?,
        spec: Some(serde_json::json!({"store_digest": store_digest})),
    }
    .write(&dir)?;
    Ok(ProfileOutcome {
        up_to_date: false,
        store_digest,
        num_targets: store.len(),
        generated,
        cache_hits,
    })
}

/// The verified target store, or `None` when the profile stage has not
/// run.
pub fn load_targets(ws: &Workspace, ingest: &IngestArtifacts) -> Result<Option<TargetStore>> {
    let dir = ws.profile_dir();
    let Some(m) = Manifest::read(&dir)? else {
        return Ok(None);
    };
    if let Some(reason) = m.verify_outputs(&dir) {
        return Err(CliError::Artifact(format!(
            "target store in {} is stale ({reason}); rerun `seqdistill profile`",
            dir.display()
        )));
    }
    let inputs = profile_inputs(ws, ingest)?;
    if let Some(name) = m.stale_input(&inputs) {
        return Err(CliError::Artifact(format!(
            "target store in {} was built from different inputs ({name}); rerun `seqdistill profile`",
            dir.display()
        )));
    }
    if m.config_digest != profile_config_digest(ws) {
        return Err(CliError::Artifact(format!(
            "target store in {} was built with different profile settings; rerun `seqdistill profile`",
            dir.display()
        )));
    }
    Ok(Some(TargetStore::read(&dir)?))
}
