//! Two-phase training: distillation-regularized warm-up, then plain
//! next-item fine-tuning.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    loss_weights, DistillError, DistillationConfig, EpochRecord, LossTrajectory, Phase,
    TargetLookup,
};
use crate::autograd::Matrix;
use crate::data::UserSequence;
use crate::model::{Batch, Example, SeqRecModel};

fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            clip_norm: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DistillError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DistillError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Baseline runs skip the distillation phase but still record the
/// distillation loss and probe so trajectories are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Distilled,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" | "vanilla" => Ok(Self::Baseline),
            "distilled" => Ok(Self::Distilled),
            other => Err(format!(
                "unknown variant `{other}` (expected baseline or distilled)"
            )),
        }
    }
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Distilled => "distilled",
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Loss values and parameter gradients of one batch objective.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub l_model: f64,
    /// Mean over rows that have a target; `None` when none does.
    pub l_distill: Option<f64>,
    /// Coefficient used in the distillation phase.
    pub beta: Option<f64>,
    pub total: f64,
    pub grads: Vec<Matrix>,
}

/// Evaluates the objective of `phase` on one batch of examples and
/// backpropagates it. `targets[r]` is the frozen target of row `r`, if any.
///
/// In the distillation phase `beta` is computed from the current loss
/// values and enters the graph as a constant; `beta_override` replaces it.
/// In the finetune phase the distillation loss is only measured.
#[allow(clippy::too_many_arguments)]
pub fn phase_objective(
    model: &SeqRecModel,
    examples: &[Example],
    targets: &[Option<Vec<f64>>],
    distill: &DistillationConfig,
    phase: Phase,
    beta_override: Option<f64>,
    rng: Option<&mut dyn RngCore>,
) -> Result<ObjectiveOutput, DistillError> {
    assert_eq!(examples.len(), targets.len(), "one target slot per example");
    let cfg = model.config();
    let rows: Vec<&[usize]> = examples.iter().map(|e| e.input.as_slice()).collect();
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(1);
    let batch = Batch::new(&rows, len, cfg.vocab_size())?;
    let mut tape = model.record(batch, rng)?;

    let mut flat = Vec::new();
    let mut items = Vec::new();
    for (r, ex) in examples.iter().enumerate() {
        for &(pos, item) in &ex.targets {
            flat.push(r * len + pos);
            items.push(item);
        }
    }
    if flat.is_empty() {
        return Err(crate::model::ModelError::NoTargets.into());
    }
    let logits = tape.logits(flat);
    let lm = tape.graph.cross_entropy(logits, items);
    let l_model = tape.graph.scalar(lm);

    let with_target: Vec<usize> = (0..examples.len())
        .filter(|&r| targets[r].is_some())
        .collect();
    let ld = if with_target.is_empty() {
        None
    } else {
        let d = cfg.hidden_dim;
        let mut target = Matrix::zeros((examples.len(), d));
        for &r in &with_target {
            let t = targets[r].as_ref().expect("filtered");
            if t.len() != d {
                return Err(DistillError::DimensionMismatch {
                    expected: d,
                    got: t.len(),
                });
            }
            target
                .row_mut(r)
                .assign(&ndarray::ArrayView1::from(t.as_slice()));
        }
        let pooled = tape.pooled(distill.resolved_layer(cfg.num_layers), &distill.pooling)?;
        Some(tape.graph.mse(pooled, target, with_target))
    };
    let l_distill = ld.map(|v| tape.graph.scalar(v));

    let (root, beta) = match (phase, ld) {
        (Phase::Distill, Some(ld)) => {
            let (mut wd, wm, mut beta) = loss_weights(l_model, l_distill.expect("set"), distill);
            if let Some(b) = beta_override {
                beta = b;
                wd = distill.alpha * b;
            }
            (tape.graph.combine(vec![(ld, wd), (lm, wm)]), Some(beta))
        }
        (Phase::Distill, None) => (tape.graph.combine(vec![(lm, 1.0 - distill.alpha)]), None),
        (Phase::Finetune, _) => (tape.graph.combine(vec![(lm, 1.0)]), None),
    };
    let total = tape.graph.scalar(root);
    let mut g = tape.graph.backward(root);
    let grads = tape
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros(p.dim())))
        .collect();
    Ok(ObjectiveOutput {
        l_model,
        l_distill,
        beta,
        total,
        grads,
    })
}

fn lookup(targets: Option<&dyn TargetLookup>, user: &str) -> Option<Vec<f64>> {
    targets
        .and_then(|t| t.target(user))
        .map(|v| v.iter().map(|&x| x as f64).collect())
}

/// Mean distillation loss between the pooled representation (inference
/// mode) and the target, over users with both a probe input and a target.
pub fn probe_reconstruction(
    model: &SeqRecModel,
    sequences: &[UserSequence],
    targets: &dyn TargetLookup,
    distill: &DistillationConfig,
) -> Result<Option<f64>, DistillError> {
    let cfg = model.config();
    let layer = distill.resolved_layer(cfg.num_layers);
    let mut rows = Vec::new();
    let mut tgts = Vec::new();
    for s in sequences {
        if let (Some(input), Some(t)) = (model.probe_input(&s.items), targets.target(&s.user_id)) {
            if t.len() != cfg.hidden_dim {
                return Err(DistillError::DimensionMismatch {
                    expected: cfg.hidden_dim,
                    got: t.len(),
                });
            }
            rows.push(input);
            tgts.push(t.iter().map(|&x| x as f64).collect::<Vec<f64>>());
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (chunk, tchunk) in rows.chunks(256).zip(tgts.chunks(256)) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let len = refs.iter().map(|r| r.len()).max().expect("non-empty");
        let batch = Batch::new(&refs, len, cfg.vocab_size())?;
        let mut tape = model.record(batch, None)?;
        let pooled = tape.pooled(layer, &distill.pooling)?;
        let values = tape.graph.value(pooled);
        for (r, t) in tchunk.iter().enumerate() {
            sum += super::distill_loss(values.row(r).as_slice().expect("contiguous"), t)?;
        }
    }
    Ok(Some(sum / rows.len() as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SeqRecModel,
    pub trajectory: LossTrajectory,
    /// Model state at the end of the distillation phase, if it ran.
    pub phase1_model: Option<SeqRecModel>,
}

#[derive(Default)]
struct EpochStats {
    lm: f64,
    ld: f64,
    beta: f64,
    batches: usize,
    ld_batches: usize,
    beta_batches: usize,
}

/// Trains `model` on the user sequences. The run draws every random
/// number (shuffling, masking, dropout) from one generator seeded with
/// `seed`; distillation itself is deterministic, so vanilla and distilled
/// runs with the same seed consume identical streams.
pub fn two_phase_train(
    mut model: SeqRecModel,
    sequences: &[UserSequence],
    targets: Option<&dyn TargetLookup>,
    distill: &DistillationConfig,
    train: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<TrainOutcome, DistillError> {
    train.validate()?;
    let cfg = model.config().clone();
    distill.validate(cfg.num_layers)?;
    if let Some(t) = targets {
        let with = sequences
            .iter()
            .filter(|s| t.target(&s.user_id).is_some())
            .count();
        if with > 0 && t.dim() != cfg.hidden_dim {
            return Err(DistillError::DimensionMismatch {
                expected: cfg.hidden_dim,
                got: t.dim(),
            });
        }
        if 2 * with < sequences.len() {
            warn!(
                "targets missing for {} of {} training users",
                sequences.len() - with,
                sequences.len()
            );
        }
    }
    let phase1 = match (variant, targets) {
        (Variant::Distilled, Some(_)) => distill.phase1_epochs(train.epochs),
        _ => 0,
    };
    let user_targets: Vec<Option<Vec<f64>>> = sequences
        .iter()
        .map(|s| lookup(targets, &s.user_id))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params(), train.learning_rate);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut records = Vec::with_capacity(train.epochs);
    let mut phase1_model = None;

    for epoch in 0..train.epochs {
        let phase = if epoch < phase1 {
            Phase::Distill
        } else {
            Phase::Finetune
        };
        if epoch == phase1 && phase1 > 0 {
            phase1_model = Some(model.clone());
        }
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        for chunk in order.chunks(train.batch_size) {
            let mut examples = Vec::with_capacity(chunk.len());
            let mut tgts = Vec::with_capacity(chunk.len());
            for &u in chunk {
                if let Some(ex) = model.training_example(&sequences[u].items, &mut rng) {
                    examples.push(ex);
                    tgts.push(user_targets[u].clone());
                }
            }
            if examples.is_empty() {
                continue;
            }
            let mut out = phase_objective(
                &model,
                &examples,
                &tgts,
                distill,
                phase,
                None,
                Some(&mut rng as &mut dyn RngCore),
            )?;
            clip_global_norm(&mut out.grads, train.clip_norm);
            adam.update(model.params_mut(), &out.grads);
            stats.lm += out.l_model;
            stats.batches += 1;
            if let Some(ld) = out.l_distill {
                stats.ld += ld;
                stats.ld_batches += 1;
            }
            if let Some(b) = out.beta {
                stats.beta += b;
                stats.beta_batches += 1;
            }
        }
        if stats.batches == 0 {
            return Err(DistillError::NoTrainableUsers);
        }
        let probe = match targets {
            Some(t) => probe_reconstruction(&model, sequences, t, distill)?,
            None => None,
        };
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let record = EpochRecord {
            epoch,
            phase,
            l_model: stats.lm / stats.batches as f64,
            l_distill: mean(stats.ld, stats.ld_batches),
            beta: mean(stats.beta, stats.beta_batches),
            probe,
        };
        debug!(
            "epoch {epoch} {:?} l_model {:.4} l_distill {:?} beta {:?} probe {:?}",
            phase, record.l_model, record.l_distill, record.beta, record.probe
        );
        records.push(record);
    }
    Ok(TrainOutcome {
        model,
        trajectory: LossTrajectory {
            records,
            transition_epoch: phase1,
        },
        phase1_model,
    })
}
