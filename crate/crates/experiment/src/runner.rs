//! Training runs, evaluation, the alpha/beta ablation and reproduction
//! checks.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::{info, warn};
use seqdistill::data::{build_sequences, user_item_sets, validation_split};
use seqdistill::distill::{
    two_phase_train, DistillationConfig, TargetLookup, TrainConfig, Variant,
};
use seqdistill::eval::{
    aggregate_seeds, evaluate, format_cell, mean_std, metric_keys, AggregateReport, MetricReport,
    MetricStat, ResultsTable,
};
use seqdistill::model::checkpoint::Checkpoint;
use seqdistill::model::{ModelConfig, SeqRecModel};
use seqdistill::profile::TargetStore;
use serde::{Deserialize, Serialize};

use crate::config::{digest_json, expand_grid};
use crate::error::{CliError, Result};
use crate::manifest::{digest_outputs, now_secs, Manifest, RunLock, CODE_VERSION};
use crate::pipeline::{load_ingest, load_targets, IngestArtifacts, Workspace};

pub const MODEL_FILE: &str = "model.ckpt";
pub const PHASE1_FILE: &str = "phase1.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub dataset: String,
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillationConfig,
}

impl RunSpec {
    pub fn new(
        config: &crate::config::ExperimentConfig,
        num_items: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            dataset: config.data.name.clone(),
            variant,
            seed,
            model: config.model_config(num_items)?,
            train: config.train.clone(),
            distill: config.distillation_config(),
        })
    }

    /// Digest of everything but the seed.
    pub fn config_digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("struct").remove("seed");
        digest_json(&v)
    }

    /// `{variant}-{first 12 digest chars}-s{seed}`.
    pub fn dir_name(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.variant.as_str(),
            &self.config_digest()[..12],
            self.seed
        )
    }
}

/// Verified artifacts a run reads.
pub struct RunInputs {
    pub ingest: IngestArtifacts,
    pub targets: Option<TargetStore>,
}

impl RunInputs {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let ingest = load_ingest(ws)?;
        let targets = load_targets(ws, &ingest)?;
        Ok(Self { ingest, targets })
    }

    /// Input digests recorded for a run. Baselines use the targets only to
    /// record the probe trajectory, so they depend on them only when
    /// present.
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::from([
            ("split".to_string(), self.ingest.split_digest()),
            (
                "sequences".to_string(),
                self.ingest.sequences_digest().to_string(),
            ),
        ]);
        if let Some(t) = &self.targets {
            m.insert("targets".into(), t.digest());
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub reused: bool,
    pub manifest: Manifest,
}

fn write_checkpoint(path: &Path, model: SeqRecModel, seed: u64, digest: &str) -> Result<()> {
    let ckpt = Checkpoint {
        model,
        seed,
        manifest_digest: Some(digest.to_string()),
    };
    ckpt.write(BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Trains `spec` into `dir` and returns the output digests.
fn execute(spec: &RunSpec, inputs: &RunInputs, dir: &Path) -> Result<BTreeMap<String, String>> {
    if spec.variant == Variant::Distilled && inputs.targets.is_none() {
        return Err(CliError::Artifact(
            "distilled training needs profile targets; run `seqdistill profile` first".into(),
        ));
    }
    let model = SeqRecModel::new(spec.model.clone(), spec.seed)?;
    let targets = inputs.targets.as_ref().map(|t| t as &dyn TargetLookup);
    let out = two_phase_train(
        model,
        &inputs.ingest.sequences,
        targets,
        &spec.distill,
        &spec.train,
        spec.variant,
        spec.seed,
    )?;
    let digest = spec.config_digest();
    let mut names = vec![MODEL_FILE, TRAJECTORY_FILE];
    if let Some(m) = out.phase1_model {
        write_checkpoint(&dir.join(PHASE1_FILE), m, spec.seed, &digest)?;
        names.push(PHASE1_FILE);
    }
    write_checkpoint(&dir.join(MODEL_FILE), out.model, spec.seed, &digest)?;
    fs::write(dir.join(TRAJECTORY_FILE), out.trajectory.to_jsonl())?;
    digest_outputs(dir, &names)
}

fn check_completed(dir: &Path, m: &Manifest, current: &BTreeMap<String, String>) -> Result<()> {
    if let Some(name) = m.stale_input(current) {
        return Err(CliError::Artifact(format!(
            "{} was trained on different artifacts ({name} changed); delete the run directory or use another --out",
            dir.display()
        )));
    }
    if let Some(reason) = m.verify_outputs(dir) {
        return Err(CliError::Artifact(format!(
            "{}: {reason}; delete the run directory to retrain",
            dir.display()
        )));
    }
    Ok(())
}

/// Trains one run unless a verified completed run already exists.
pub fn train_run(ws: &Workspace, inputs: &RunInputs, spec: &RunSpec) -> Result<RunOutcome> {
    let dir = ws.runs_dir().join(spec.dir_name());
    let current = inputs.digests();
    if let Some(m) = Manifest::read(&dir)? {
        check_completed(&dir, &m, &current)?;
        return Ok(RunOutcome {
            dir,
            reused: true,
            manifest: m,
        });
    }
    let _lock = RunLock::acquire(&dir)?;
    if let Some(m) = Manifest::read(&dir)? {
        check_completed(&dir, &m, &current)?;
        return Ok(RunOutcome {
            dir,
            reused: true,
            manifest: m,
        });
    }
    for f in [MODEL_FILE, PHASE1_FILE, TRAJECTORY_FILE] {
        let _ = fs::remove_file(dir.join(f));
    }
    info!("training {}", dir.display());
    let started = now_secs();
    let outputs = execute(spec, inputs, &dir)?;
    let manifest = Manifest {
        kind: "train".into(),
        config_digest: spec.config_digest(),
        code_version: CODE_VERSION.into(),
        seed: Some(spec.seed),
        started_at: started,
        finished_at: now_secs(),
        inputs: current,
        outputs,
        spec: Some(serde_json::to_value(spec)?),
    };
    manifest.write(&dir)?;
    Ok(RunOutcome {
        dir,
        reused: false,
        manifest,
    })
}

/// Trains every requested variant and seed, over the grid when `grid` is
/// set.
pub fn cmd_train(
    ws: &Workspace,
    variants: &[Variant],
    seeds: &[u64],
    grid: bool,
) -> Result<Vec<RunOutcome>> {
    let inputs = RunInputs::load(ws)?;
    let points = if grid {
        expand_grid(&ws.config)
    } else {
        vec![crate::config::GridPoint {
            label: String::new(),
            config: ws.config.clone(),
        }]
    };
    let mut out = Vec::new();
    for p in &points {
        if !p.label.is_empty() {
            info!("grid point {}", p.label);
        }
        for &v in variants {
            for &s in seeds {
                let spec = RunSpec::new(&p.config, inputs.ingest.catalog.num_items(), v, s)?;
                out.push(train_run(ws, &inputs, &spec)?);
            }
        }
    }
    Ok(out)
}

fn completed_run(ws: &Workspace, inputs: &RunInputs, spec: &RunSpec) -> Result<PathBuf> {
    let dir = ws.runs_dir().join(spec.dir_name());
    let m = Manifest::read(&dir)?.ok_or_else(|| {
        CliError::Artifact(format!(
            "no completed run in {}; run `seqdistill train --variant {} --seed {}` first",
            dir.display(),
            spec.variant.as_str(),
            spec.seed
        ))
    })?;
    check_completed(&dir, &m, &inputs.digests())?;
    Ok(dir)
}

/// Scores a completed run's final checkpoint on the test period.
pub fn evaluate_run(ws: &Workspace, inputs: &RunInputs, spec: &RunSpec) -> Result<MetricReport> {
    let dir = completed_run(ws, inputs, spec)?;
    let ckpt = Checkpoint::read(BufReader::new(File::open(dir.join(MODEL_FILE))?))?;
    let (num_users, metrics) = evaluate(
        &ckpt.model,
        &inputs.ingest.histories,
        &inputs.ingest.test_items,
        &ws.config.eval.k,
    )?;
    let report = MetricReport {
        dataset: spec.dataset.clone(),
        variant: spec.variant.as_str().to_string(),
        seed: spec.seed,
        config_digest: Some(spec.config_digest()),
        num_users,
        metrics,
    };
    let eval_dir = ws.eval_dir();
    fs::create_dir_all(&eval_dir)?;
    fs::write(
        eval_dir.join(format!("{}.json", spec.dir_name())),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub aggregates: Vec<AggregateReport>,
    pub table: String,
}

/// Per-seed reports, one aggregate per variant and the results table with
/// the uplift of the last variant over the first.
pub fn cmd_evaluate(ws: &Workspace, variants: &[Variant], seeds: &[u64]) -> Result<EvalOutcome> {
    let inputs = RunInputs::load(ws)?;
    let mut reports = Vec::new();
    let mut aggregates = Vec::new();
    for &v in variants {
        let mut per_variant = Vec::new();
        for &s in seeds {
            let spec = RunSpec::new(&ws.config, inputs.ingest.catalog.num_items(), v, s)?;
            per_variant.push(evaluate_run(ws, &inputs, &spec)?);
        }
        aggregates.push(aggregate_seeds(&per_variant)?);
        reports.extend(per_variant);
    }
    let counts: Vec<usize> = aggregates.iter().map(|a| a.seeds.len()).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        warn!("variants were evaluated over different seed counts {counts:?}");
    }
    let table = ResultsTable::build(&aggregates)?;
    let dir = ws.reports_dir();
    fs::create_dir_all(&dir)?;
    for a in &aggregates {
        fs::write(
            dir.join(format!("{}.json", a.variant)),
            serde_json::to_string_pretty(a)? + "\n",
        )?;
    }
    let text = table.to_text();
    fs::write(dir.join("table.txt"), &text)?;
    fs::write(dir.join("table.csv"), table.to_csv())?;
    Ok(EvalOutcome {
        reports,
        aggregates,
        table: text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dynamic_beta: bool,
    pub alpha: f64,
    /// Metric key, `ndcg@k` for the first configured cut-off.
    pub metric: String,
    pub stat: MetricStat,
    /// Run directory names, one per seed.
    pub runs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    /// Runs trained by this invocation.
    pub executed: usize,
    /// Completed runs found on disk and reused.
    pub reused: usize,
    pub table: String,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Header `β | α | NDCG@k`, one row per cell in configuration order.
pub fn ablation_rows(cells: &[AblationCell]) -> (Vec<String>, Vec<Vec<String>>) {
    let metric = cells
        .first()
        .map_or_else(|| "ndcg@10".to_string(), |c| c.metric.clone());
    let k = metric.split_once('@').map_or("10", |(_, k)| k);
    let header = vec!["β".to_string(), "α".to_string(), format!("NDCG@{k}")];
    let rows = cells
        .iter()
        .map(|c| {
            let value = if c.stat.n > 1 {
                format_cell(&c.stat)
            } else {
                format!("{:.4}", c.stat.mean)
            };
            vec![
                yes_no(c.dynamic_beta).to_string(),
                format!("{}", c.alpha),
                value,
            ]
        })
        .collect();
    (header, rows)
}

/// Trains and evaluates the distilled model for every (dynamic β, α) cell
/// over the ablation seeds. Completed cells are reused, so an interrupted
/// ablation resumes.
pub fn cmd_ablate(ws: &Workspace) -> Result<AblationOutcome> {
    let inputs = RunInputs::load(ws)?;
    if inputs.targets.is_none() {
        return Err(CliError::Artifact(
            "the ablation needs profile targets; run `seqdistill profile` first".into(),
        ));
    }
    let metric = metric_keys(&ws.config.eval.k[..1])[0].clone();
    let (mut executed, mut reused) = (0, 0);
    let mut cells = Vec::new();
    for &beta in &ws.config.ablation.dynamic_beta {
        for &alpha in &ws.config.ablation.alpha {
            let mut cfg = ws.config.clone();
            cfg.distill.alpha = alpha;
            cfg.distill.use_dynamic_beta = beta;
            let mut reports = Vec::new();
            let mut runs = Vec::new();
            for &seed in ws.config.ablation_seeds() {
                let spec = RunSpec::new(
                    &cfg,
                    inputs.ingest.catalog.num_items(),
                    Variant::Distilled,
                    seed,
                )?;
                let run = train_run(ws, &inputs, &spec)?;
                if run.reused {
                    reused += 1;
                } else {
                    executed += 1;
                }
                runs.push(spec.dir_name());
                reports.push(evaluate_run(ws, &inputs, &spec)?);
            }
            let agg = aggregate_seeds(&reports)?;
            let stat = *agg
                .metrics
                .get(&metric)
                .ok_or_else(|| CliError::Other(format!("metric {metric} missing")))?;
            cells.push(AblationCell {
                dynamic_beta: beta,
                alpha,
                metric: metric.clone(),
                stat,
                runs,
            });
        }
    }
    let (header, rows) = ablation_rows(&cells);
    let table = ResultsTable { header, rows };
    let dir = ws.ablation_dir();
    fs::create_dir_all(&dir)?;
    let text = table.to_text();
    fs::write(dir.join("table.txt"), &text)?;
    fs::write(dir.join("table.csv"), table.to_csv())?;
    fs::write(
        dir.join("cells.json"),
        serde_json::to_string_pretty(&cells)? + "\n",
    )?;
    Ok(AblationOutcome {
        cells,
        executed,
        reused,
        table: text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    /// Gridded settings as `key=value` pairs.
    pub point: String,
    pub variant: Variant,
    /// Metric key, `ndcg@k` for the first configured cut-off.
    pub metric: String,
    /// Validation score over the seeds.
    pub stat: MetricStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub validation_threshold: u64,
    pub rows: Vec<SelectionRow>,
    /// Index into `rows` of the best point per variant, in variant order.
    pub best: Vec<usize>,
    #[serde(skip)]
    pub table: String,
}

/// Scores every `[grid]` point on a validation period carved from the
/// training split: models train on the training records before
/// `grid.validation_fraction` and rank the items of the records after it.
/// The test period is never read. Ties keep the earlier point. Nothing is
/// cached; models live only in memory.
pub fn cmd_select(ws: &Workspace, variants: &[Variant], seeds: &[u64]) -> Result<SelectionOutcome> {
    let inputs = RunInputs::load(ws)?;
    if variants.contains(&Variant::Distilled) && inputs.targets.is_none() {
        return Err(CliError::Artifact(
            "selecting for the distilled variant needs profile targets; run `seqdistill profile` first".into(),
        ));
    }
    let ingest = &inputs.ingest;
    let split = validation_split(&ingest.train, ws.config.grid.validation_fraction)?;
    let fit = build_sequences(&split.train, &ingest.catalog, ws.config.data.max_len);
    let histories = user_item_sets(&split.train, &ingest.catalog);
    let held_out = user_item_sets(&split.test, &ingest.catalog);
    let targets = inputs.targets.as_ref().map(|t| t as &dyn TargetLookup);
    let metric = metric_keys(&ws.config.eval.k[..1])[0].clone();
    let mut rows = Vec::new();
    for p in expand_grid(&ws.config) {
        info!("scoring grid point {}", p.label);
        for &v in variants {
            let mut scores = Vec::new();
            for &s in seeds {
                let spec = RunSpec::new(&p.config, ingest.catalog.num_items(), v, s)?;
                let model = SeqRecModel::new(spec.model.clone(), s)?;
                let out = two_phase_train(model, &fit, targets, &spec.distill, &spec.train, v, s)?;
                let (_, m) = evaluate(&out.model, &histories, &held_out, &ws.config.eval.k)?;
                scores.push(m[&metric]);
            }
            let (mean, std) = mean_std(&scores);
            rows.push(SelectionRow {
                point: p.label.clone(),
                variant: v,
                metric: metric.clone(),
                stat: MetricStat {
                    mean,
                    std,
                    n: scores.len(),
                },
            });
        }
    }
    let best: Vec<usize> = variants
        .iter()
        .filter_map(|&v| {
            (0..rows.len())
                .filter(|&i| rows[i].variant == v)
                .reduce(|a, b| {
                    if rows[b].stat.mean > rows[a].stat.mean {
                        b
                    } else {
                        a
                    }
                })
        })
        .collect();
    let k = metric.split_once('@').map_or("10", |(_, k)| k);
    let table = ResultsTable {
        header: vec![
            "Variant".into(),
            "Point".into(),
            format!("Validation NDCG@{k}"),
            "Best".into(),
        ],
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                vec![
                    r.variant.as_str().to_string(),
                    r.point.clone(),
                    format_cell(&r.stat),
                    if best.contains(&i) {
                        "*".into()
                    } else {
                        String::new()
                    },
                ]
            })
            .collect(),
    };
    let outcome = SelectionOutcome {
        validation_threshold: split.threshold,
        rows,
        best,
        table: table.to_text(),
    };
    let dir = ws.selection_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("table.txt"), &outcome.table)?;
    fs::write(dir.join("table.csv"), table.to_csv())?;
    fs::write(
        dir.join("selection.json"),
        serde_json::to_string_pretty(&outcome)? + "\n",
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub run: PathBuf,
    /// Output files whose digest differs from the manifest.
    pub mismatched: Vec<String>,
}

impl Reproduction {
    pub fn matches(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Retrains a completed run from nothing but its manifest and the current
/// input artifacts, in a scratch directory, and compares output digests.
pub fn reproduce_run(ws: &Workspace, inputs: &RunInputs, run_dir: &Path) -> Result<Reproduction> {
    let m = Manifest::read(run_dir)?
        .ok_or_else(|| CliError::Artifact(format!("{} has no manifest", run_dir.display())))?;
    let spec: RunSpec = serde_json::from_value(m.spec.clone().ok_or_else(|| {
        CliError::Artifact(format!("{} records no run spec", run_dir.display()))
    })?)?;
    check_completed(run_dir, &m, &inputs.digests())?;
    let scratch =
        ws.out_dir
            .join("verify")
            .join(format!("{}-{}", spec.dir_name(), std::process::id()));
    fs::create_dir_all(&scratch)?;
    let result = execute(&spec, inputs, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    let outputs = result?;
    let mut mismatched: Vec<String> = m
        .outputs
        .iter()
        .filter(|(k, v)| outputs.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatched.extend(
        outputs
            .keys()
            .filter(|k| !m.outputs.contains_key(*k))
            .cloned(),
    );
    Ok(Reproduction {
        run: run_dir.to_path_buf(),
        mismatched,
    })
}

/// Reproduces the given runs, or every completed run when none is given.
pub fn cmd_verify(ws: &Workspace, runs: &[PathBuf]) -> Result<Vec<Reproduction>> {
    let inputs = RunInputs::load(ws)?;
    let dirs: Vec<PathBuf> = if runs.is_empty() {
        let mut d: Vec<PathBuf> = match fs::read_dir(ws.runs_dir()) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| Manifest::path(p).is_file())
                .collect(),
            Err(_) => Vec::new(),
        };
        d.sort();
        d
    } else {
        runs.to_vec()
    };
    dirs.iter().map(|d| reproduce_run(ws, &inputs, d)).collect()
}
