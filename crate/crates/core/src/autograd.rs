//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are computed
//! eagerly when an op is recorded; [`Graph::backward`] walks the tape in
//! reverse. Only the ops needed by the sequence models and the losses are
//! provided, several of them fused (layer norm, multi-head attention,
//! softmax cross-entropy) with hand-written adjoints.
//!
//! Anything that is a plain `f64` outside the graph (for example the dynamic
//! loss-balancing coefficient) is a constant for differentiation.

use ndarray::{s, Array2, Axis};

pub type Matrix = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape information for the fused attention op. Queries, keys and values
/// are `[batch * len, dim]` matrices with heads laid out contiguously along
/// the columns.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    /// `batch * len` flags; `false` keys are never attended to.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

enum Op {
    Leaf,
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MulConst(Var, Matrix),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Matrix>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Pool {
        x: Var,
        groups: Vec<Vec<(usize, f64)>>,
    },
    Mse {
        x: Var,
        target: Matrix,
        rows: Vec<usize>,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Row-wise softmax with `-inf` entries treated as excluded. A row whose
/// entries are all excluded becomes all zeros.
fn softmax_rows_in_place(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = if *x == f64::NEG_INFINITY {
                0.0
            } else {
                (*x - max).exp()
            };
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Selects rows of `src` (with repetition).
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let value = self.nodes[src.0].value.select(Axis(0), &rows);
        self.push(value, Op::Gather { src, rows })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    /// `x + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        self.push(value, Op::AddRow(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Var {
        let value = &self.nodes[x.0].value * &c;
        self.push(value, Op::MulConst(x, c))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * &self.nodes[gain.0].value + &self.nodes[bias.0].value;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| gelu(v).0);
        self.push(value, Op::Gelu(x))
    }

    /// Scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (b_n, len, heads) = (layout.batch, layout.len, layout.heads);
        let dim = qv.ncols();
        assert_eq!(qv.nrows(), b_n * len, "attention rows");
        assert_eq!(dim % heads, 0, "dim divisible by heads");
        assert_eq!(layout.key_mask.len(), b_n * len, "key mask length");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((b_n * len, dim));
        let mut probs = Vec::with_capacity(b_n * heads);
        for b in 0..b_n {
            let rows = b * len..(b + 1) * len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut sc = qs.dot(&ks.t());
                for i in 0..len {
                    for j in 0..len {
                        let allowed = layout.key_mask[b * len + j] && (!layout.causal || j <= i);
                        sc[[i, j]] = if allowed {
                            sc[[i, j]] * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                }
                softmax_rows_in_place(&mut sc);
                out.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vs));
                probs.push(sc);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        assert!(!targets.is_empty(), "cross entropy over zero rows");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let n = targets.len() as f64;
        self.push(
            Matrix::from_elem((1, 1), loss / n),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Weighted sums of rows: output row `g` is `sum_w w * x[row]` over
    /// `groups[g]`.
    pub fn pool(&mut self, x: Var, groups: Vec<Vec<(usize, f64)>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros((groups.len(), xv.ncols()));
        for (g, members) in groups.iter().enumerate() {
            let mut dst = out.row_mut(g);
            for &(r, w) in members {
                dst.scaled_add(w, &xv.row(r));
            }
        }
        self.push(out, Op::Pool { x, groups })
    }

    /// Mean over `rows` of the per-row mean squared difference to `target`
    /// (same shape as `x`). Rows not listed do not contribute.
    pub fn mse(&mut self, x: Var, target: Matrix, rows: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.dim(), target.dim(), "mse shape");
        assert!(!rows.is_empty(), "mse over zero rows");
        let cols = xv.ncols() as f64;
        let total: f64 = rows
            .iter()
            .map(|&r| {
                xv.row(r)
                    .iter()
                    .zip(target.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / cols
            })
            .sum();
        let value = Matrix::from_elem((1, 1), total / rows.len() as f64);
        self.push(value, Op::Mse { x, target, rows })
    }

    /// Linear combination of scalar nodes with constant coefficients.
    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total: f64 = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Combine(terms))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward from a scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Gather { src, rows } => {
                let mut d = Matrix::zeros(self.nodes[src.0].value.dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                accumulate(&mut grads[src.0], d);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                accumulate(&mut grads[a.0], g.dot(&bv.t()));
                accumulate(&mut grads[b.0], av.t().dot(g));
            }
            Op::MulConst(x, c) => accumulate(&mut grads[x.0], g * c),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = &self.nodes[gain.0].value;
                accumulate(
                    &mut grads[gain.0],
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gv;
                let n = xhat.ncols() as f64;
                let mut dx = Matrix::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    let is = inv_std[r];
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = is / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                let d = ndarray::Zip::from(xv)
                    .and(g)
                    .map_collect(|&v, &gg| gg * gelu(v).1);
                accumulate(&mut grads[x.0], d);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (
                    &self.nodes[q.0].value,
                    &self.nodes[k.0].value,
                    &self.nodes[v.0].value,
                );
                let (len, heads) = (layout.len, layout.heads);
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.dim());
                let mut dk = Matrix::zeros(kv.dim());
                let mut dv = Matrix::zeros(vv.dim());
                for b in 0..layout.batch {
                    let rows = b * len..(b + 1) * len;
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            for (x, &pp) in row.iter_mut().zip(prow) {
                                *x -= pp * dot;
                            }
                        }
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows.clone(), cols])
                            .assign(&ds.t().dot(&qs));
                    }
                }
                accumulate(&mut grads[q.0], dq);
                accumulate(&mut grads[k.0], dk);
                accumulate(&mut grads[v.0], dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d.mapv_inplace(|x| x * scale);
                accumulate(&mut grads[logits.0], d);
            }
            Op::Pool { x, groups } => {
                let mut d = Matrix::zeros(self.nodes[x.0].value.dim());
                for (gi, members) in groups.iter().enumerate() {
                    for &(r, w) in members {
                        d.row_mut(r).scaled_add(w, &g.row(gi));
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::Mse { x, target, rows } => {
                let xv = &self.nodes[x.0].value;
                let scale = 2.0 * g[[0, 0]] / (rows.len() as f64 * xv.ncols() as f64);
                let mut d = Matrix::zeros(xv.dim());
                for &r in rows {
                    let diff = &xv.row(r) - &target.row(r);
                    d.row_mut(r).scaled_add(scale, &diff);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    // zero-weighted terms leave the upstream graph untouched
                    if c != 0.0 {
                        accumulate(&mut grads[v.0], g * c);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(loss)/d(input) against central differences for every entry
    /// of every input.
    fn check<F>(inputs: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let eval = |inputs: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
            let root = build(&mut g, &vars);
            g.scalar(root)
        };
        let h = 1e-6;
        for (vi, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[vi])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.dim()));
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = inputs.clone();
                plus[vi][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[vi][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    err < 1e-5,
                    "input {vi} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn sum_sq(g: &mut Graph, x: Var) -> Var {
        let rows = g.value(x).nrows();
        let zeros = Matrix::zeros(g.value(x).dim());
        g.mse(x, zeros, (0..rows).collect())
    }

    #[test]
    fn matmul_add_gelu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![
                random(&mut rng, 3, 4),
                random(&mut rng, 4, 2),
                random(&mut rng, 1, 2),
            ],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let b = g.add_row(m, v[2]);
                let a = g.gelu(b);
                sum_sq(g, a)
            },
        );
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random(&mut rng, 3, 5);
        check(
            vec![
                random(&mut rng, 3, 5),
                random(&mut rng, 1, 5),
                random(&mut rng, 1, 5),
            ],
            move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]);
                g.mse(y, target.clone(), vec![0, 2])
            },
        );
    }

    #[test]
    fn attention_grad_causal_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for causal in [true, false] {
            let layout = AttentionLayout {
                batch: 2,
                len: 3,
                heads: 2,
                key_mask: vec![true, true, false, true, false, false],
                causal,
            };
            check(
                vec![
                    random(&mut rng, 6, 4),
                    random(&mut rng, 6, 4),
                    random(&mut rng, 6, 4),
                ],
                move |g, v| {
                    let a = g.attention(v[0], v[1], v[2], layout.clone());
                    sum_sq(g, a)
                },
            );
        }
    }

    #[test]
    fn gather_pool_cross_entropy_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![random(&mut rng, 4, 3), random(&mut rng, 3, 5)],
            |g, v| {
                let x = g.gather(v[0], vec![0, 2, 2, 3]);
                let logits = g.matmul(x, v[1]);
                let ce = g.cross_entropy(logits, vec![1, 4, 0, 2]);
                let p = g.pool(x, vec![vec![(0, 0.25), (1, 0.75)], vec![(3, 1.0)]]);
                let d = sum_sq(g, p);
                g.combine(vec![(ce, 0.7), (d, 1.9)])
            },
        );
    }

    #[test]
    fn mul_const_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = array![[0.0, 2.0], [2.0, 2.0]];
        check(vec![random(&mut rng, 2, 2)], move |g, v| {
            let y = g.mul_const(v[0], mask.clone());
            sum_sq(g, y)
        });
    }

    #[test]
    fn fully_masked_query_rows_yield_zero() {
        let mut g = Graph::new();
        let q = g.leaf(Matrix::ones((2, 2)));
        let layout = AttentionLayout {
            batch: 1,
            len: 2,
            heads: 1,
            key_mask: vec![false, true],
            causal: true,
        };
        let out = g.attention(q, q, q, layout);
        assert!(g.value(out).row(0).iter().all(|&x| x == 0.0));
        assert!(g.value(out).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_weighted_terms_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_elem((1, 1), 2.0));
        let b = g.leaf(Matrix::from_elem((1, 1), 3.0));
        let c = g.combine(vec![(a, 0.0), (b, 1.0)]);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 1.0);
    }
}
