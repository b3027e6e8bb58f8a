//! Top-k ranking metrics, multi-seed aggregation and uplift tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{rank_scores, ModelError, SeqRecModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no user has both a training history and test items")]
    NoEligibleUsers,
    #[error("cannot aggregate reports of different {what}: `{a}` vs `{b}`")]
    Mixed {
        what: &'static str,
        a: String,
        b: String,
    },
    #[error("no reports to aggregate")]
    NoReports,
    #[error("baseline mean of {0} is zero")]
    ZeroBaseline(String),
    #[error("metric {0} missing from one of the reports")]
    MissingMetric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(relevant: &HashSet<usize>, k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    Ok(())
}

/// `|top-k ∩ relevant| / min(k, |relevant|)`.
pub fn recall_at_k(
    ranked: &[usize],
    relevant: &HashSet<usize>,
    k: usize,
) -> Result<f64, EvalError> {
    check(relevant, k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    Ok(hits as f64 / k.min(relevant.len()) as f64)
}

/// Binary-relevance NDCG: a hit at rank `r` (1-based) gains `1/log2(r+1)`.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64, EvalError> {
    check(relevant, k)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|r| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    Ok(dcg / idcg)
}

/// Anything that scores the full vocabulary for a batch of histories.
pub trait Scorer {
    fn num_items(&self) -> usize;
    /// `[histories, >= num_items + 1]` scores; column `i` scores item `i`.
    fn score(&self, histories: &[&[usize]]) -> Result<Array2<f64>, ModelError>;
}

impl Scorer for SeqRecModel {
    fn num_items(&self) -> usize {
        self.config().num_items
    }

    fn score(&self, histories: &[&[usize]]) -> Result<Array2<f64>, ModelError> {
        self.score_last(histories)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    #[serde(default)]
    pub config_digest: Option<String>,
    pub num_users: usize,
    /// Keys are `ndcg@k` and `recall@k`.
    pub metrics: BTreeMap<String, f64>,
}

pub fn metric_keys(k_list: &[usize]) -> Vec<String> {
    k_list
        .iter()
        .flat_map(|k| [format!("ndcg@{k}"), format!("recall@{k}")])
        .collect()
}

/// Per-user metrics averaged over eligible users, in user-id order.
///
/// `histories` holds each user's full training items (chronological) and
/// `test` their test-period items. Ranking excludes the user's training
/// items, so the relevant set is the test items not already in the
/// history; users left with no relevant item, or without history, are
/// skipped.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    histories: &BTreeMap<String, Vec<usize>>,
    test: &BTreeMap<String, Vec<usize>>,
    k_list: &[usize],
) -> Result<(usize, BTreeMap<String, f64>), EvalError> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let mut users = Vec::new();
    for (user, items) in test {
        let Some(hist) = histories.get(user).filter(|h| !h.is_empty()) else {
            continue;
        };
        let seen: HashSet<usize> = hist.iter().copied().collect();
        let relevant: HashSet<usize> = items
            .iter()
            .copied()
            .filter(|i| !seen.contains(i))
            .collect();
        if !relevant.is_empty() {
            users.push((hist.as_slice(), seen, relevant));
        }
    }
    if users.is_empty() {
        return Err(EvalError::NoEligibleUsers);
    }
    let keys = metric_keys(k_list);
    let mut sums = vec![0.0; keys.len()];
    let n_items = scorer.num_items();
    for chunk in users.chunks(128) {
        let hs: Vec<&[usize]> = chunk.iter().map(|u| u.0).collect();
        let scores = scorer.score(&hs)?;
        for (row, (_, seen, relevant)) in chunk.iter().enumerate() {
            let ranked = rank_scores(
                scores.row(row).as_slice().expect("contiguous"),
                n_items,
                seen,
            );
            for (j, &k) in k_list.iter().enumerate() {
                sums[2 * j] += ndcg_at_k(&ranked, relevant, k)?;
                sums[2 * j + 1] += recall_at_k(&ranked, relevant, k)?;
            }
        }
    }
    let n = users.len() as f64;
    Ok((
        users.len(),
        keys.into_iter()
            .zip(sums)
            .map(|(k, s)| (k, s / n))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricStat>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<AggregateReport, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    for r in &reports[1..] {
        if r.variant != first.variant {
            return Err(EvalError::Mixed {
                what: "variants",
                a: first.variant.clone(),
                b: r.variant.clone(),
            });
        }
        if r.dataset != first.dataset {
            return Err(EvalError::Mixed {
                what: "datasets",
                a: first.dataset.clone(),
                b: r.dataset.clone(),
            });
        }
    }
    let mut metrics = BTreeMap::new();
    for key in first.metrics.keys() {
        let values: Vec<f64> = reports
            .iter()
            .map(|r| {
                r.metrics
                    .get(key)
                    .copied()
                    .ok_or_else(|| EvalError::MissingMetric(key.clone()))
            })
            .collect::<Result<_, _>>()?;
        let (mean, std) = mean_std(&values);
        metrics.insert(
            key.clone(),
            MetricStat {
                mean,
                std,
                n: values.len(),
            },
        );
    }
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    Ok(AggregateReport {
        dataset: first.dataset.clone(),
        variant: first.variant.clone(),
        seeds,
        metrics,
    })
}

/// `100 * (treatment / baseline - 1)` per metric shared by both reports.
pub fn uplift(
    baseline: &AggregateReport,
    treatment: &AggregateReport,
) -> Result<BTreeMap<String, f64>, EvalError> {
    if baseline.dataset != treatment.dataset {
        return Err(EvalError::Mixed {
            what: "datasets",
            a: baseline.dataset.clone(),
            b: treatment.dataset.clone(),
        });
    }
    baseline
        .metrics
        .iter()
        .map(|(k, b)| {
            let t = treatment
                .metrics
                .get(k)
                .ok_or_else(|| EvalError::MissingMetric(k.clone()))?;
            if b.mean == 0.0 {
                return Err(EvalError::ZeroBaseline(k.clone()));
            }
            Ok((k.clone(), uplift_pct(b.mean, t.mean)))
        })
        .collect()
}

pub fn uplift_pct(baseline: f64, treatment: f64) -> f64 {
    100.0 * (treatment / baseline - 1.0)
}

/// `"0.0106 ±0.0004"`.
pub fn format_cell(stat: &MetricStat) -> String {
    format!("{:.4} ±{:.4}", stat.mean, stat.std)
}

/// Signed percentage with two decimals, e.g. `"+4.72%"`.
pub fn format_uplift(pct: f64) -> String {
    // avoid "-0.00%"
    let pct = if pct.abs() < 0.005 { 0.0 } else { pct };
    format!("{pct:+.2}%")
}

fn display_key(key: &str) -> String {
    match key.split_once('@') {
        Some(("ndcg", k)) => format!("NDCG@{k}"),
        Some(("recall", k)) => format!("Recall@{k}"),
        _ => key.to_string(),
    }
}

/// Rows: one per aggregate, then an uplift row of the last aggregate over
/// the first when there are at least two. Columns: metrics.
pub struct ResultsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ResultsTable {
    pub fn build(aggregates: &[AggregateReport]) -> Result<Self, EvalError> {
        let first = aggregates.first().ok_or(EvalError::NoReports)?;
        let keys: Vec<String> = first.metrics.keys().cloned().collect();
        let mut header = vec![first.dataset.clone()];
        header.extend(keys.iter().map(|k| display_key(k)));
        let mut rows = Vec::new();
        for a in aggregates {
            let mut row = vec![a.variant.clone()];
            for k in &keys {
                let s = a
                    .metrics
                    .get(k)
                    .ok_or_else(|| EvalError::MissingMetric(k.clone()))?;
                row.push(format_cell(s));
            }
            rows.push(row);
        }
        if aggregates.len() >= 2 {
            let up = uplift(first, aggregates.last().expect("len >= 2"))?;
            let mut row = vec!["Uplift (%)".to_string()];
            row.extend(keys.iter().map(|k| format_uplift(up[k])));
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let width: Vec<usize> = (0..cols)
            .map(|c| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:<w$}", w = width[c]))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        std::iter::once(&self.header)
            .chain(&self.rows)
            .map(|r| r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
