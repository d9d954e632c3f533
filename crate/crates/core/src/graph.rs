//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node; node indices are a
//! valid topological order, so `backward` is a single reverse sweep.
//!
//! Shape rules (no broadcasting anywhere):
//!
//! | op              | inputs                      | output          |
//! |-----------------|-----------------------------|-----------------|
//! | `matmul`        | `[m,k]`, `[k,n]`            | `[m,n]`         |
//! | `add/sub/mul`   | `[m,n]`, `[m,n]`            | `[m,n]`         |
//! | `add_bias`      | `[m,n]`, `[1,n]`            | `[m,n]` (row added to every row) |
//! | `transpose`     | `[m,n]`                     | `[n,m]`         |
//! | `softmax`       | `[m,n]`, mask of `m*n`      | `[m,n]`         |
//! | `mean_axis(0)`  | `[m,n]`                     | `[1,n]`         |
//! | `mean_axis(1)`  | `[m,n]`                     | `[m,1]`         |
//! | `gather_rows`   | `[v,n]`, ids `< v`          | `[len(ids),n]`  |
//! | `concat_cols`   | `[m,n_i]`...                | `[m,sum n_i]`   |
//! | `layer_norm`    | `[m,n]`, `[1,n]`, `[1,n]`   | `[m,n]`         |
//! | `bce`           | `[n,1]` or `[1,n]`          | `[1,1]`         |

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};

/// Additive logit offset applied to masked-out softmax positions.
pub const MASK_OFFSET: f64 = -1e30;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every registered parameter, in
/// registration order.
#[derive(Clone, Debug)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits into `(names starting with prefix, the rest)`.
    pub fn split_prefix(self, prefix: &str) -> (Gradients, Gradients) {
        let (a, b) = self.entries.into_iter().partition(|(n, _)| n.starts_with(prefix));
        (Gradients { entries: a }, Gradients { entries: b })
    }
}

#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the prediction clamped away from 0 and 1.
pub fn bce_term(label: f64, pred: f64) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -label * p.ln() - (1.0 - label) * (1.0 - p).ln()
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Usage(format!("variable {} does not belong to this graph", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a named trainable leaf. Names must be unique per graph.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.values(), tb.values(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let vals = ta.values().iter().zip(tb.values()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), vals)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let vals = ta.values().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(bias)?);
        require_matrix("add_bias", ta)?;
        if tb.shape() != [1, ta.cols()] {
            return Err(shape_err("add_bias", ta, tb));
        }
        let n = ta.cols();
        let vals = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.values()[i % n])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(t, Op::AddBias(a, bias)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        require_matrix("transpose", ta)?;
        let (m, n) = (ta.rows(), ta.cols());
        let t = Tensor::from_fn(n, m, |r, c| ta.get(c, r));
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let vals = ta.values().iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(t, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let vals = ta.values().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(t, Op::Relu(a)))
    }

    /// Row-wise softmax. `keep[i] == false` adds [`MASK_OFFSET`] to logit `i`
    /// (an exact zero after exponentiation). A row with every position
    /// masked produces an all-zero row.
    pub fn softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let ta = self.check(a)?;
        require_matrix("softmax", ta)?;
        if let Some(k) = keep {
            if k.len() != ta.len() {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = ta.row_slice(r);
            let kept = |c: usize| keep.is_none_or(|k| k[r * n + c]);
            if !(0..n).any(kept) {
                continue;
            }
            let logits: Vec<f64> = (0..n)
                .map(|c| if kept(c) { row[c] } else { row[c] + MASK_OFFSET })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..n {
                let e = (logits[c] - max).exp();
                out[r * n + c] = e;
                total += e;
            }
            for c in 0..n {
                out[r * n + c] /= total;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.check(a)?;
        require_matrix("mean_axis", ta)?;
        let (m, n) = (ta.rows(), ta.cols());
        let t = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(ta.row_slice(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::matrix(1, n, out)?
            }
            1 => {
                let out = (0..m)
                    .map(|r| ta.row_slice(r).iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::matrix(m, 1, out)?
            }
            _ => return Err(Error::Usage(format!("mean_axis: axis {axis} not in {{0,1}}"))),
        };
        Ok(self.push(t, Op::MeanAxis(a, axis)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a)))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.check(table)?;
        require_matrix("gather_rows", tt)?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows: empty id list".into()));
        }
        let (v, n) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!(
                    "gather_rows: id {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::matrix(ids.len(), n, out)?;
        Ok(self.push(t, Op::Gather(table, ids.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols: no inputs".into()))?;
        let m = self.check(*first)?.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.check(p)?;
            require_matrix("concat_cols", t)?;
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::matrix(m, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `lo..hi`.
    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let ta = self.check(a)?;
        require_matrix("slice_rows", ta)?;
        if lo >= hi || hi > ta.rows() {
            return Err(Error::Input(format!(
                "slice_rows {lo}..{hi} invalid for shape {:?}",
                ta.shape()
            )));
        }
        let n = ta.cols();
        let t = Tensor::matrix(hi - lo, n, ta.values()[lo * n..hi * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows(a, lo)))
    }

    /// Columns `lo..hi`.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let ta = self.check(a)?;
        require_matrix("slice_cols", ta)?;
        if lo >= hi || hi > ta.cols() {
            return Err(Error::Input(format!(
                "slice_cols {lo}..{hi} invalid for shape {:?}",
                ta.shape()
            )));
        }
        let t = Tensor::from_fn(ta.rows(), hi - lo, |r, c| ta.get(r, lo + c));
        Ok(self.push(t, Op::SliceCols(a, lo)))
    }

    /// Per-row normalization with learnable gain and bias (biased variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        require_matrix("layer_norm", tx)?;
        let (m, n) = (tx.rows(), tx.cols());
        if tg.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.values()[c] + tb.values()[c];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
        ))
    }

    /// Weighted mean binary cross-entropy: `(1/n) * sum_i w_i * e(y_i, p_i)`.
    /// `labels` and `weights` are constants; no gradient flows into them.
    pub fn bce(&mut self, pred: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let tp = self.check(pred)?;
        let n = tp.len();
        if n == 0 {
            return Err(Error::EmptyBatch("bce"));
        }
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "bce",
                lhs: tp.shape().to_vec(),
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let mut total = 0.0;
        for i in 0..n {
            total += weights[i] * bce_term(labels[i], tp.values()[i]);
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push(
            t,
            Op::Bce {
                pred,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a one-element output. Parameters the output does
    /// not depend on receive an exact zero gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output).map_err(|_| {
            Error::Usage("backward called on a variable that was never computed in this graph".into())
        })?;
        if out.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let entries = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[v.0].value));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gv = g.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros_like(&self.nodes[v.0].value));
            f(slot.values_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |da| matmul_a_bt_into(gv, tb.values(), m, n, k, da));
                acc(*b, &mut |db| matmul_at_b_into(ta.values(), gv, m, k, n, db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gv));
                acc(*b, &mut |d| add_into(d, gv));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gv));
                acc(*b, &mut |d| d.iter_mut().zip(gv).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).values(), self.value(*b).values());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += gv[j] * tb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += gv[j] * ta[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(gv).for_each(|(x, y)| *x += c * y)),
            Op::AddBias(a, b) => {
                acc(*a, &mut |d| add_into(d, gv));
                let n = self.value(*b).len();
                acc(*b, &mut |d| {
                    for (j, y) in gv.iter().enumerate() {
                        d[j % n] += y;
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                // output is [m,n] = input^T, input is [n,m]
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c * m + r] += gv[r * n + c];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.values();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += gv[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if x[j] > 0.0 {
                            d[j] += gv[j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                acc(*a, &mut |d| {
                    for r in 0..m {
                        let yr = y.row_slice(r);
                        let gr = &gv[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            d[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += if *axis == 0 {
                                gv[c] / m as f64
                            } else {
                                gv[r] / n as f64
                            };
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += gv[0])),
            Op::Gather(table, ids) => {
                let n = self.value(*table).cols();
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..n {
                            d[id * n + c] += gv[r * n + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += gv[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(a, lo) => {
                let n = node.value.cols();
                let start = lo * n;
                acc(*a, &mut |d| add_into(&mut d[start..start + gv.len()], gv));
            }
            Op::SliceCols(a, lo) => {
                let (m, w) = (node.value.rows(), node.value.cols());
                let n = self.value(*a).cols();
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..w {
                            d[r * n + lo + c] += gv[r * w + c];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let gvals = self.value(*gain).values();
                acc(*gain, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += gv[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += gv[r * n + c];
                        }
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gv[r * n + c] * gvals[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = gv[r * n + c] * gvals[c];
                            d[r * n + c] +=
                                inv_std[r] / nf * (nf * dh - sum_dh - xhat[r * n + c] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Bce {
                pred,
                labels,
                weights,
            } => {
                let p = self.value(*pred).values();
                let nf = p.len() as f64;
                acc(*pred, &mut |d| {
                    for j in 0..d.len() {
                        let pj = p[j];
                        // clamped region has zero slope
                        if pj <= PROB_EPS || pj >= 1.0 - PROB_EPS {
                            continue;
                        }
                        let y = labels[j];
                        d[j] += gv[0] * weights[j] / nf * (-y / pj + (1.0 - y) / (1.0 - pj));
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}
