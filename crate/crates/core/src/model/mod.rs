//! Transformer sequential recommenders.
//!
//! Two variants share one parameter layout:
//!
//! - [`Architecture::Causal`]: left-to-right attention, trained to predict
//!   the next item at every position (SASRec-style, full-softmax
//!   cross-entropy).
//! - [`Architecture::Masked`]: bidirectional attention over sequences with
//!   randomly masked positions, trained to recover the masked items
//!   (BERT4Rec-style). Ranking appends a mask token.
//!
//! Blocks are pre-norm with learned positional embeddings indexed by
//! recency (the most recent real position is 0), so right-padding never
//! shifts the positions of real items. The hidden state returned for layer
//! `k` is the residual stream after block `k`.

pub mod checkpoint;
pub mod pooling;

use std::collections::HashSet;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AttentionLayout, Graph, Matrix, Var};
use crate::data::PAD_INDEX;

pub use pooling::{exp_pool, mean_pool, pool, PoolingConfig, PoolingStrategy};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("item index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("row {0} has no real (non-padding) positions")]
    EmptyRow(usize),
    #[error("row {0} contains the padding index")]
    PaddingInside(usize),
    #[error("no valid target positions")]
    NoTargets,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Causal,
    Masked,
}

fn default_mask_prob() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Catalog size `M`; real items are `1..=M`.
    pub num_items: usize,
    /// Masking probability for the masked variant.
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
}

impl ModelConfig {
    /// Padding plus items, plus the mask token for the masked variant.
    pub fn vocab_size(&self) -> usize {
        match self.architecture {
            Architecture::Causal => self.num_items + 1,
            Architecture::Masked => self.num_items + 2,
        }
    }

    pub fn mask_token(&self) -> Option<usize> {
        match self.architecture {
            Architecture::Causal => None,
            Architecture::Masked => Some(self.num_items + 1),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.max_len == 0
        {
            return bad("hidden_dim, num_layers, num_heads and max_len must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size() <= 1 {
            return bad("vocabulary must contain at least one item".into());
        }
        if self.architecture == Architecture::Masked
            && !(self.mask_prob > 0.0 && self.mask_prob < 1.0)
        {
            return bad(format!("mask_prob {} outside (0, 1)", self.mask_prob));
        }
        Ok(())
    }
}

const ITEM_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

fn layer_base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// Names and shapes of every parameter, in storage order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = config.hidden_dim;
    let v = config.vocab_size();
    let ff = 4 * d;
    let mut out = vec![
        ("item_embedding".to_string(), (v, d)),
        ("position_embedding".to_string(), (config.max_len, d)),
    ];
    for l in 0..config.num_layers {
        let shapes = [
            (1, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, ff),
            (1, ff),
            (ff, d),
            (1, d),
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("block{l}.{name}"), shape));
        }
    }
    out.push(("final_ln.gain".into(), (1, d)));
    out.push(("final_ln.bias".into(), (1, d)));
    out.push(("output.weight".into(), (d, v)));
    out.push(("output.bias".into(), (1, v)));
    out
}

/// A right-padded batch of item index rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<usize>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

impl Batch {
    /// Pads every row to `len`. Rows longer than `len`, empty rows, padding
    /// inside a row and indices outside the vocabulary are rejected.
    pub fn new(rows: &[&[usize]], len: usize, vocab: usize) -> Result<Self, ModelError> {
        let mut items = vec![PAD_INDEX; rows.len() * len];
        let mut mask = vec![false; rows.len() * len];
        for (r, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(ModelError::EmptyRow(r));
            }
            if row.len() > len {
                return Err(ModelError::SequenceTooLong {
                    len: row.len(),
                    max_len: len,
                });
            }
            for (p, &item) in row.iter().enumerate() {
                if item == PAD_INDEX {
                    return Err(ModelError::PaddingInside(r));
                }
                if item >= vocab {
                    return Err(ModelError::IndexOutOfRange { index: item, vocab });
                }
                items[r * len + p] = item;
                mask[r * len + p] = true;
            }
        }
        Ok(Self {
            items,
            mask,
            rows: rows.len(),
            len,
        })
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.len..(r + 1) * self.len]
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_mask(r).iter().filter(|&&b| b).count()
    }

    /// Recency position of every slot: the last real item of a row is 0.
    fn positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.items.len()];
        for r in 0..self.rows {
            let m = self.row_len(r);
            for p in 0..m {
                out[r * self.len + p] = m - 1 - p;
            }
        }
        out
    }

    pub fn mask_matrix(&self) -> Array2<bool> {
        Array2::from_shape_vec((self.rows, self.len), self.mask.clone()).expect("mask shape")
    }
}

/// Per-layer hidden states of a forward pass.
#[derive(Debug, Clone)]
pub struct LayerHiddenStates {
    /// `layers[k - 1]` holds the `[batch, positions, d]` states after block `k`.
    pub layers: Vec<Array3<f64>>,
    pub mask: Array2<bool>,
}

impl LayerHiddenStates {
    /// States after block `k` (1-based).
    pub fn layer(&self, k: usize) -> Option<ArrayView3<'_, f64>> {
        k.checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .map(|a| a.view())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, positions, vocab]`.
    pub logits: Array3<f64>,
    pub hidden: LayerHiddenStates,
}

/// A recorded forward pass, ready for losses and backpropagation.
pub struct Tape {
    pub graph: Graph,
    /// Graph handles of the model parameters, in storage order.
    pub params: Vec<Var>,
    /// Residual stream after each block, `[batch * len, d]`.
    pub hidden: Vec<Var>,
    normed: Var,
    pub batch: Batch,
}

impl Tape {
    /// Output logits for the given flattened `batch * len` row indices.
    pub fn logits(&mut self, rows: Vec<usize>) -> Var {
        let n = self.params.len();
        let (w, b) = (self.params[n - 2], self.params[n - 1]);
        let x = self.graph.gather(self.normed, rows);
        let z = self.graph.matmul(x, w);
        self.graph.add_row(z, b)
    }

    /// Pools the hidden states of block `layer` (1-based) for every row.
    pub fn pooled(&mut self, layer: usize, pooling: &PoolingConfig) -> Result<Var, ModelError> {
        let h = *self
            .hidden
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| ModelError::InvalidConfig(format!("no hidden layer {layer}")))?;
        let mut groups = Vec::with_capacity(self.batch.rows);
        for r in 0..self.batch.rows {
            let w = pooling
                .weights(self.batch.row_mask(r))
                .ok_or(ModelError::EmptyRow(r))?;
            groups.push(
                w.into_iter()
                    .map(|(p, wt)| (r * self.batch.len + p, wt))
                    .collect(),
            );
        }
        Ok(self.graph.pool(h, groups))
    }
}

/// One training row: model input plus `(position, target item)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqRecModel {
    config: ModelConfig,
    params: Vec<Matrix>,
}

impl SeqRecModel {
    /// Randomly initialised model. Embeddings are `N(0, 1/d)`; weight
    /// matrices `N(0, 1/fan_in)` with residual output projections further
    /// scaled by `1/sqrt(2 * num_layers)`; gains 1, biases 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim as f64;
        let resid = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, (r, c))| {
                let std = if name.ends_with("embedding") {
                    1.0 / d.sqrt()
                } else if name.ends_with("gain") {
                    return Matrix::ones((r, c));
                } else if r == 1 {
                    return Matrix::zeros((r, c));
                } else if name.ends_with(".wo") || name.ends_with(".w2") {
                    resid / (r as f64).sqrt()
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Matrix::from_shape_fn((r, c), |_| normal.sample(&mut rng))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: Vec<Matrix>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.dim() != *shape {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    p.dim()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        parameter_layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = g.value(x).dim();
                let mask =
                    Matrix::from_shape_fn(
                        dim,
                        |_| {
                            if rng.random::<f64>() < p {
                                0.0
                            } else {
                                keep
                            }
                        },
                    );
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Records a forward pass. Dropout is active only when `rng` is given.
    pub fn record(
        &self,
        batch: Batch,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Tape, ModelError> {
        if batch.len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.len,
                max_len: self.config.max_len,
            });
        }
        for r in 0..batch.rows {
            if batch.row_len(r) == 0 {
                return Err(ModelError::EmptyRow(r));
            }
        }
        let vocab = self.config.vocab_size();
        if let Some(&bad) = batch.items.iter().find(|&&i| i >= vocab) {
            return Err(ModelError::IndexOutOfRange { index: bad, vocab });
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let emb = g.gather(params[ITEM_EMB], batch.items.clone());
        let pos = g.gather(params[POS_EMB], batch.positions());
        let mut x = g.add(emb, pos);
        x = self.dropout(&mut g, x, &mut rng);
        let causal = self.config.architecture == Architecture::Causal;
        let mut hidden = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let p = |i: usize| params[layer_base(l) + i];
            let a = g.layer_norm(x, p(LN1_G), p(LN1_B));
            let q = g.matmul(a, p(WQ));
            let q = g.add_row(q, p(BQ));
            let k = g.matmul(a, p(WK));
            let k = g.add_row(k, p(BK));
            let v = g.matmul(a, p(WV));
            let v = g.add_row(v, p(BV));
            let att = g.attention(
                q,
                k,
                v,
                AttentionLayout {
                    batch: batch.rows,
                    len: batch.len,
                    heads: self.config.num_heads,
                    key_mask: batch.mask.clone(),
                    causal,
                },
            );
            let o = g.matmul(att, p(WO));
            let o = g.add_row(o, p(BO));
            let o = self.dropout(&mut g, o, &mut rng);
            x = g.add(x, o);
            let f = g.layer_norm(x, p(LN2_G), p(LN2_B));
            let f = g.matmul(f, p(W1));
            let f = g.add_row(f, p(B1));
            let f = g.gelu(f);
            let f = g.matmul(f, p(W2));
            let f = g.add_row(f, p(B2));
            let f = self.dropout(&mut g, f, &mut rng);
            x = g.add(x, f);
            hidden.push(x);
        }
        let fbase = layer_base(self.config.num_layers);
        let normed = g.layer_norm(x, params[fbase], params[fbase + 1]);
        Ok(Tape {
            graph: g,
            params,
            hidden,
            normed,
            batch,
        })
    }

    /// Inference-mode forward pass over a batch of item rows, each padded to
    /// `max_len`.
    pub fn forward(&self, rows: &[&[usize]]) -> Result<ForwardOutput, ModelError> {
        let batch = Batch::new(rows, self.config.max_len, self.config.vocab_size())?;
        let (b, l, d) = (batch.rows, batch.len, self.config.hidden_dim);
        let mut tape = self.record(batch, None)?;
        let logits_var = tape.logits((0..b * l).collect());
        let v = self.config.vocab_size();
        let logits = tape
            .graph
            .value(logits_var)
            .clone()
            .into_shape_with_order((b, l, v))
            .expect("logits shape");
        let layers = tape
            .hidden
            .iter()
            .map(|&h| {
                tape.graph
                    .value(h)
                    .clone()
                    .into_shape_with_order((b, l, d))
                    .expect("hidden shape")
            })
            .collect();
        Ok(ForwardOutput {
            logits,
            hidden: LayerHiddenStates {
                layers,
                mask: tape.batch.mask_matrix(),
            },
        })
    }

    /// Builds the training row for one user history (already at most
    /// `max_len` long). Causal: inputs `s[..m-1]`, targets `s[1..]`; needs
    /// `m >= 2`. Masked: each position is replaced by the mask token with
    /// probability `mask_prob` (the last position if none was drawn).
    pub fn training_example(&self, history: &[usize], rng: &mut dyn RngCore) -> Option<Example> {
        let start = history.len().saturating_sub(self.config.max_len);
        let history = &history[start..];
        match self.config.architecture {
            Architecture::Causal => {
                if history.len() < 2 {
                    return None;
                }
                let m = history.len();
                Some(Example {
                    input: history[..m - 1].to_vec(),
                    targets: (0..m - 1).map(|t| (t, history[t + 1])).collect(),
                })
            }
            Architecture::Masked => {
                if history.is_empty() {
                    return None;
                }
                let mask = self.config.mask_token().expect("masked variant");
                let mut input = history.to_vec();
                let mut targets = Vec::new();
                for (t, slot) in input.iter_mut().enumerate() {
                    if rng.random::<f64>() < self.config.mask_prob {
                        targets.push((t, *slot));
                        *slot = mask;
                    }
                }
                if targets.is_empty() {
                    let t = input.len() - 1;
                    targets.push((t, input[t]));
                    input[t] = mask;
                }
                Some(Example { input, targets })
            }
        }
    }

    /// Input used to measure the pooled representation of a history
    /// without training noise: the causal training input (`s[..m-1]`) or the
    /// unmasked history for the masked variant.
    pub fn probe_input(&self, history: &[usize]) -> Option<Vec<usize>> {
        let start = history.len().saturating_sub(self.config.max_len);
        let history = &history[start..];
        match self.config.architecture {
            Architecture::Causal if history.len() >= 2 => {
                Some(history[..history.len() - 1].to_vec())
            }
            Architecture::Causal => None,
            Architecture::Masked if !history.is_empty() => Some(history.to_vec()),
            Architecture::Masked => None,
        }
    }

    /// Input used for next-item scoring: the latest `max_len` items, or the
    /// latest `max_len - 1` items plus the mask token for the masked variant.
    pub fn ranking_input(&self, history: &[usize]) -> Vec<usize> {
        match self.config.mask_token() {
            None => {
                let start = history.len().saturating_sub(self.config.max_len);
                history[start..].to_vec()
            }
            Some(mask) => {
                let keep = self.config.max_len - 1;
                let start = history.len().saturating_sub(keep);
                let mut v = history[start..].to_vec();
                v.push(mask);
                v
            }
        }
    }

    /// Final-position logits for each history, `[histories, vocab]`.
    pub fn score_last(&self, histories: &[&[usize]]) -> Result<Array2<f64>, ModelError> {
        let inputs: Vec<Vec<usize>> = histories.iter().map(|h| self.ranking_input(h)).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let len = refs.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
        let batch = Batch::new(&refs, len, self.config.vocab_size())?;
        let rows: Vec<usize> = (0..batch.rows)
            .map(|r| r * batch.len + batch.row_len(r) - 1)
            .collect();
        let mut tape = self.record(batch, None)?;
        let logits = tape.logits(rows);
        Ok(tape.graph.value(logits).clone())
    }

    /// Ranks the whole catalog for one history by descending final-position
    /// score, ties broken by ascending item index, dropping `exclude`.
    pub fn rank_items(
        &self,
        history: &[usize],
        exclude: &HashSet<usize>,
    ) -> Result<Vec<usize>, ModelError> {
        if self.config.num_items == 0 {
            return Err(ModelError::EmptyCatalog);
        }
        let scores = self.score_last(&[history])?;
        Ok(rank_scores(
            scores.row(0).as_slice().expect("contiguous"),
            self.config.num_items,
            exclude,
        ))
    }
}

/// Orders items `1..=num_items` by descending score, ties by index.
pub fn rank_scores(scores: &[f64], num_items: usize, exclude: &HashSet<usize>) -> Vec<usize> {
    let mut items: Vec<usize> = (1..=num_items).filter(|i| !exclude.contains(i)).collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// Mean cross-entropy over positions where `mask` is true.
/// `logits` is `[batch, positions, vocab]`, `targets` `[batch, positions]`.
pub fn next_item_loss(
    logits: ArrayView3<f64>,
    targets: ArrayView2<usize>,
    mask: ArrayView2<bool>,
) -> Result<f64, ModelError> {
    next_item_loss_with_grad(logits, targets, mask).map(|(l, _)| l)
}

/// [`next_item_loss`] and its gradient with respect to `logits`.
pub fn next_item_loss_with_grad(
    logits: ArrayView3<f64>,
    targets: ArrayView2<usize>,
    mask: ArrayView2<bool>,
) -> Result<(f64, Array3<f64>), ModelError> {
    let (b, l, v) = logits.dim();
    if targets.dim() != (b, l) || mask.dim() != (b, l) {
        return Err(ModelError::DimensionMismatch {
            expected: b * l,
            got: targets.len().min(mask.len()),
        });
    }
    let mut rows = Vec::new();
    let mut tgt = Vec::new();
    for r in 0..b {
        for p in 0..l {
            if mask[[r, p]] {
                let t = targets[[r, p]];
                if t >= v {
                    return Err(ModelError::IndexOutOfRange { index: t, vocab: v });
                }
                rows.push(r * l + p);
                tgt.push(t);
            }
        }
    }
    if rows.is_empty() {
        return Err(ModelError::NoTargets);
    }
    let flat = logits
        .to_owned()
        .into_shape_with_order((b * l, v))
        .expect("flatten");
    let mut g = Graph::new();
    let x = g.leaf(flat);
    let sel = g.gather(x, rows);
    let loss = g.cross_entropy(sel, tgt);
    let mut grads = g.backward(loss);
    let grad = grads
        .take(x)
        .unwrap_or_else(|| Matrix::zeros((b * l, v)))
        .into_shape_with_order((b, l, v))
        .expect("grad shape");
    Ok((g.scalar(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn config(arch: Architecture, layers: usize) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            hidden_dim: 8,
            num_layers: layers,
            num_heads: 2,
            dropout: 0.1,
            max_len: 6,
            num_items: 12,
            mask_prob: 0.2,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = config(Architecture::Causal, 1);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = config(Architecture::Causal, 1);
        c.num_items = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hidden_shape_contract() {
        let model = SeqRecModel::new(config(Architecture::Causal, 2), 1).unwrap();
        let out = model.forward(&[&[1, 2, 3]]).unwrap();
        assert_eq!(out.hidden.layers.len(), 2);
        for layer in &out.hidden.layers {
            assert_eq!(layer.dim(), (1, 6, 8));
            assert!(layer.iter().all(|x| x.is_finite()));
        }
        assert_eq!(out.logits.dim(), (1, 6, 13));
        assert_eq!(
            out.hidden.mask.row(0).to_vec(),
            vec![true, true, true, false, false, false]
        );
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let model = SeqRecModel::new(config(Architecture::Causal, 1), 1).unwrap();
        assert!(matches!(
            model.forward(&[&[]]),
            Err(ModelError::EmptyRow(0))
        ));
        assert!(matches!(
            model.forward(&[&[1, 99]]),
            Err(ModelError::IndexOutOfRange { index: 99, .. })
        ));
        assert!(matches!(
            model.forward(&[&[1, 2, 3, 4, 5, 6, 7]]),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn causal_logits_ignore_the_future() {
        let model = SeqRecModel::new(config(Architecture::Causal, 2), 7).unwrap();
        let base = [3, 1, 4, 1, 5, 9];
        let a = model.forward(&[&base]).unwrap();
        for t in 0..base.len() {
            let mut alt = base;
            alt[t] = if alt[t] == 2 { 3 } else { 2 };
            let b = model.forward(&[&alt]).unwrap();
            for p in 0..t {
                for v in 0..13 {
                    assert_eq!(a.logits[[0, p, v]], b.logits[[0, p, v]]);
                }
            }
            // and the perturbed position itself does change
            assert_ne!(a.logits[[0, t, 0]], b.logits[[0, t, 0]]);
        }
    }

    #[test]
    fn masked_variant_attends_both_ways() {
        let model = SeqRecModel::new(config(Architecture::Masked, 1), 7).unwrap();
        let a = model.forward(&[&[3, 1, 4]]).unwrap();
        let b = model.forward(&[&[3, 1, 5]]).unwrap();
        assert_ne!(a.logits[[0, 0, 0]], b.logits[[0, 0, 0]]);
    }

    #[test]
    fn padding_rows_do_not_leak_into_real_positions() {
        let model = SeqRecModel::new(config(Architecture::Masked, 2), 3).unwrap();
        let alone = model.forward(&[&[2, 5]]).unwrap();
        let batched = model.forward(&[&[2, 5], &[1, 2, 3, 4, 5, 6]]).unwrap();
        for p in 0..2 {
            for c in 0..8 {
                let x = alone.hidden.layers[1][[0, p, c]];
                let y = batched.hidden.layers[1][[0, p, c]];
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = SeqRecModel::new(config(Architecture::Causal, 2), 5).unwrap();
        let b = SeqRecModel::new(config(Architecture::Causal, 2), 5).unwrap();
        assert_eq!(a, b);
        let x = a.forward(&[&[1, 2, 3]]).unwrap();
        let y = b.forward(&[&[1, 2, 3]]).unwrap();
        assert_eq!(x.logits, y.logits);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 17;
        let logits = Array3::<f64>::zeros((2, 3, v));
        let targets = Array2::from_shape_fn((2, 3), |(r, p)| (r + p) % v);
        let mask = Array2::from_elem((2, 3), true);
        let loss = next_item_loss(logits.view(), targets.view(), mask.view()).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = Array3::<f64>::zeros((1, 1, 4));
            logits[[0, 0, 2]] = margin;
            let targets = Array2::from_elem((1, 1), 2);
            let mask = Array2::from_elem((1, 1), true);
            let loss = next_item_loss(logits.view(), targets.view(), mask.view()).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn loss_without_targets_errors() {
        let logits = Array3::<f64>::zeros((1, 2, 3));
        let targets = Array2::zeros((1, 2));
        let mask = Array2::from_elem((1, 2), false);
        assert!(matches!(
            next_item_loss(logits.view(), targets.view(), mask.view()),
            Err(ModelError::NoTargets)
        ));
    }

    #[test]
    fn loss_matches_log_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, l, v) = (3, 4, 9);
        let logits = Array::from_shape_fn((b, l, v), |_| rng.random_range(-3.0..3.0));
        let targets = Array2::from_shape_fn((b, l), |_| rng.random_range(0..v));
        let mask = Array2::from_shape_fn((b, l), |(r, p)| (r + p) % 3 != 0);
        let got = next_item_loss(logits.view(), targets.view(), mask.view()).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for r in 0..b {
            for p in 0..l {
                if !mask[[r, p]] {
                    continue;
                }
                let z: f64 = (0..v).map(|c| logits[[r, p, c]].exp()).sum();
                total -= (logits[[r, p, targets[[r, p]]]].exp() / z).ln();
                n += 1.0;
            }
        }
        assert!((got - total / n).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Array::from_shape_fn((2, 2, 3), |_| rng.random_range(-2.0..2.0));
        let targets = ndarray::array![[0usize, 2], [1, 1]];
        let mask = ndarray::array![[true, true], [false, true]];
        let (_, grad) =
            next_item_loss_with_grad(logits.view(), targets.view(), mask.view()).unwrap();
        let h = 1e-6;
        for idx in ndarray::indices((2, 2, 3)) {
            let mut p = logits.clone();
            p[idx] += h;
            let mut m = logits.clone();
            m[idx] -= h;
            let fp = next_item_loss(p.view(), targets.view(), mask.view()).unwrap();
            let fm = next_item_loss(m.view(), targets.view(), mask.view()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel <= 1e-4 || (a - numeric).abs() < 1e-10,
                "{idx:?}: {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn rigged_output_ranks_item_first() {
        let mut model = SeqRecModel::new(config(Architecture::Causal, 1), 2).unwrap();
        let n = model.params().len();
        model.params_mut()[n - 2].fill(0.0);
        model.params_mut()[n - 1].fill(0.0);
        model.params_mut()[n - 1][[0, 7]] = 10.0;
        let ranked = model.rank_items(&[1, 2], &HashSet::new()).unwrap();
        assert_eq!(ranked[0], 7);
        // remaining scores tie exactly: ascending index
        assert_eq!(&ranked[1..4], &[1, 2, 3]);
        assert_eq!(ranked.len(), 12);
    }

    #[test]
    fn ranking_matches_argsort_oracle() {
        let mut cfg = config(Architecture::Causal, 1);
        cfg.num_items = 20;
        let model = SeqRecModel::new(cfg, 9).unwrap();
        let history = [4, 8, 15, 16];
        let exclude: HashSet<usize> = history.iter().copied().collect();
        let ranked = model.rank_items(&history, &exclude).unwrap();
        let scores = model.score_last(&[&history]).unwrap();
        let mut oracle: Vec<(f64, usize)> = (1..=20)
            .filter(|i| !exclude.contains(i))
            .map(|i| (scores[[0, i]], i))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(
            ranked,
            oracle.into_iter().map(|(_, i)| i).collect::<Vec<_>>()
        );
    }

    #[test]
    fn equal_scores_break_ties_by_index() {
        let scores = vec![0.0, 1.0, 3.0, 3.0, 2.0];
        assert_eq!(rank_scores(&scores, 4, &HashSet::new()), vec![2, 3, 4, 1]);
    }

    #[test]
    fn training_examples() {
        let model = SeqRecModel::new(config(Architecture::Causal, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = model.training_example(&[5, 6, 7], &mut rng).unwrap();
        assert_eq!(ex.input, vec![5, 6]);
        assert_eq!(ex.targets, vec![(0, 6), (1, 7)]);
        assert!(model.training_example(&[5], &mut rng).is_none());

        let masked = SeqRecModel::new(config(Architecture::Masked, 1), 1).unwrap();
        let ex = masked.training_example(&[5, 6, 7], &mut rng).unwrap();
        let mask = masked.config().mask_token().unwrap();
        assert!(!ex.targets.is_empty());
        for &(t, item) in &ex.targets {
            assert_eq!(ex.input[t], mask);
            assert_eq!(item, [5, 6, 7][t]);
        }
        assert_eq!(
            masked.ranking_input(&[1, 2, 3, 4, 5, 6, 7]),
            vec![3, 4, 5, 6, 7, mask]
        );
    }
}
