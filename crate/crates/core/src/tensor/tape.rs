use std::sync::Arc;

use super::{matmul_into, matmul_nt_into, matmul_tn_into, SegmentIndex, Tensor};
use crate::error::{shape_err, Error, Result};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Variance floor used by [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    LeakyRelu(Var),
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<SegmentIndex>),
    SegmentMean(Var, Arc<SegmentIndex>),
    RowSoftmax(Var),
    Sum(Var),
    Mean(Var),
    /// Cached per-row inverse standard deviation.
    LayerNorm(Var, Vec<f64>),
    /// Cached row-wise class probabilities.
    SoftmaxCrossEntropy(Var, Arc<[usize]>, Tensor),
    SquaredError(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Element-level allocation accounting for one tape.
///
/// Counts `f64` value elements (forward values, op caches and backward
/// gradient buffers), not bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub current: usize,
    pub peak: usize,
    pub total: usize,
}

impl AllocStats {
    fn alloc(&mut self, n: usize) {
        self.current += n;
        self.total += n;
        self.peak = self.peak.max(self.current);
    }

    fn free(&mut self, n: usize) {
        self.current = self.current.saturating_sub(n);
    }
}

/// Append-only record of a differentiable computation.
///
/// A tape is meant to be built once per forward pass and dropped afterwards;
/// it is not `Sync` and must not be shared between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    alloc: AllocStats,
    op_count: u64,
}

/// Gradients of leaf parameters, indexed by their handles.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn alloc_stats(&self) -> AllocStats {
        self.alloc
    }

    pub fn peak_elements(&self) -> usize {
        self.alloc.peak
    }

    /// Restarts the high-water mark from the currently live element count.
    pub fn reset_peak(&mut self) {
        self.alloc.peak = self.alloc.current;
    }

    /// Arithmetic operations performed by forward ops so far.
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, flops: usize, cache: usize) -> Var {
        self.alloc.alloc(value.len() + cache);
        self.op_count += flops as u64;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, 0, 0)
    }

    /// Differentiable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true, 0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("({m}, {k}) x ({k2}, {n})")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(m, n, out)?, rg, 2 * m * k * n, 0))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let (rg, n) = (self.rg(&[a, b]), t.len());
        Ok(self.push(Op::Add(a, b), t, rg, n, 0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let (rg, n) = (self.rg(&[a, b]), t.len());
        Ok(self.push(Op::Sub(a, b), t, rg, n, 0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let (rg, n) = (self.rg(&[a, b]), t.len());
        Ok(self.push(Op::Mul(a, b), t, rg, n, 0))
    }

    /// Adds the `1 x d` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(b) != (1, d) {
            return Err(shape_err("add_row", format!("({n}, {d}) + {:?}", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut t = self.value(x).clone();
        for i in 0..n {
            for (o, &bv) in t.row_mut(i).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::AddRow(x, b), t, rg, n * d, 0))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        let (rg, n) = (self.rg(&[x]), t.len());
        self.push(Op::Scale(x, c), t, rg, n, 0)
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` is a column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(s) != (n, 1) {
            return Err(shape_err("scale_rows", format!("({n}, {d}) by {:?}", self.shape(s))));
        }
        let sv = self.value(s).data();
        let mut t = self.value(x).clone();
        for (i, &c) in sv.iter().enumerate() {
            t.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::ScaleRows(x, s), t, rg, n * d, 0))
    }

    /// Leaky rectifier with slope [`LEAKY_SLOPE`] on the negative side.
    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect();
        let t = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        let (rg, n) = (self.rg(&[x]), t.len());
        self.push(Op::LeakyRelu(x), t, rg, n, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let t = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        let (rg, n) = (self.rg(&[x]), t.len());
        self.push(Op::Relu(x), t, rg, n, 0)
    }

    /// Stacks tensors vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(rows, cols, data)?;
        let (rg, n) = (self.rg(parts), t.len());
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, rg, n, 0))
    }

    /// Places tensors side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} vs {rows} rows")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(rows, cols, data)?;
        let (rg, n) = (self.rg(parts), t.len());
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg, n, 0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let (rg, n) = (self.rg(&[x]), t.len());
        self.push(Op::Transpose(x), t, rg, n, 0)
    }

    /// Output row `i` is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let rows = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let t = self.value(x).select_rows(&idx);
        let (rg, n) = (self.rg(&[x]), t.len());
        Ok(self.push(Op::GatherRows(x, idx), t, rg, n, 0))
    }

    /// Row `i` of `x` is added into output row `idx[i]`; the output has
    /// `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Arc<[usize]>, out_rows: usize) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if idx.len() != rows {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{} indices for {rows} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(shape_err("scatter_add_rows", format!("index {bad} out of {out_rows} rows")));
        }
        let src = self.value(x);
        let mut t = Tensor::zeros(out_rows, d);
        for (i, &dst) in idx.iter().enumerate() {
            for (o, &v) in t.row_mut(dst).iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ScatterAddRows(x, idx), t, rg, rows * d, 0))
    }

    /// Softmax of a column, normalized independently within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<SegmentIndex>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols != 1 || rows != seg.entry_count() {
            return Err(shape_err(
                "segment_softmax",
                format!("({rows}, {cols}) values for {} entries", seg.entry_count()),
            ));
        }
        let t = segment_softmax_values(self.value(x).data(), &seg);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SegmentSoftmax(x, seg), Tensor::column(&t), rg, 4 * rows, 0))
    }

    /// Per-segment mean of the rows of `x`; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<SegmentIndex>) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if rows != seg.entry_count() {
            return Err(shape_err(
                "segment_mean",
                format!("{rows} rows for {} entries", seg.entry_count()),
            ));
        }
        let sizes = seg.sizes();
        let src = self.value(x);
        let mut t = Tensor::zeros(seg.segment_count(), d);
        for (i, &s) in seg.entries().iter().enumerate() {
            let inv = 1.0 / sizes[s] as f64;
            for (o, &v) in t.row_mut(s).iter_mut().zip(src.row(i)) {
                *o += v * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SegmentMean(x, seg), t, rg, 2 * rows * d, 0))
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        let (rg, n) = (self.rg(&[x]), t.len());
        self.push(Op::RowSoftmax(x), t, rg, 4 * n, 0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let (rg, n) = (self.rg(&[x]), self.value(x).len());
        self.push(Op::Sum(x), Tensor::scalar(s), rg, n, 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let (rg, n) = (self.rg(&[x]), t.len());
        Ok(self.push(Op::Mean(x), Tensor::scalar(m), rg, n, 0))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let d = t.cols() as f64;
        let mut inv_std = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * r);
            inv_std.push(r);
        }
        let (rg, n, cache) = (self.rg(&[x]), t.len(), inv_std.len());
        self.push(Op::LayerNorm(x, inv_std), t, rg, 5 * n, cache)
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if labels.len() != n || n == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} with {c} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        let cache = probs.len();
        Ok(self.push(
            Op::SoftmaxCrossEntropy(logits, labels, probs),
            Tensor::scalar(loss / n as f64),
            rg,
            4 * n * c,
            cache,
        ))
    }

    /// Mean of squared differences against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        same_shape("squared_error", self.value(pred), &target)?;
        if target.is_empty() {
            return Err(shape_err("squared_error", "empty tensor"));
        }
        let p = self.value(pred);
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let (rg, n, cache) = (self.rg(&[pred]), p.len(), target.len());
        Ok(self.push(Op::SquaredError(pred, target), Tensor::scalar(s), rg, 3 * n, cache))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns gradients for every differentiable leaf that influences the
    /// loss. Gradient buffers are counted by the allocation tracker while they
    /// are live.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Self { nodes, alloc, .. } = self;
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let mut leaf_grads: Vec<Option<Tensor>> = Vec::new();
        leaf_grads.resize_with(nodes.len(), || None);

        grads[loss.0] = Some(Tensor::scalar(1.0));
        alloc.alloc(1);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                alloc.free(g.len());
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor| accumulate(nodes, &mut grads, alloc, v, t);
            backprop_node(nodes, node, &g, &mut acc);
            alloc.free(g.len());
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], alloc: &mut AllocStats, v: Var, t: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => {
            alloc.alloc(t.len());
            *slot = Some(t);
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.shape();
            let n = tb.cols();
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), tb.data(), &mut da, m, n, k);
                acc(*a, Tensor::new(m, k, da).expect("shape"));
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                matmul_tn_into(ta.data(), g.data(), &mut db, m, k, n);
                acc(*b, Tensor::new(k, n, db).expect("shape"));
            }
        }
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, map(g, |v| -v));
        }
        Op::Mul(a, b) => {
            acc(*a, zip(g, val(*b), |x, y| x * y));
            acc(*b, zip(g, val(*a), |x, y| x * y));
        }
        Op::AddRow(x, b) => {
            acc(*x, g.clone());
            let mut db = Tensor::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (o, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            acc(*b, db);
        }
        Op::Scale(x, c) => acc(*x, map(g, |v| v * c)),
        Op::ScaleRows(x, s) => {
            let (tx, ts) = (val(*x), val(*s));
            if nodes[x.0].requires_grad {
                let mut dx = g.clone();
                for (i, &c) in ts.data().iter().enumerate() {
                    dx.row_mut(i).iter_mut().for_each(|v| *v *= c);
                }
                acc(*x, dx);
            }
            if nodes[s.0].requires_grad {
                let ds: Vec<f64> = (0..g.rows())
                    .map(|i| g.row(i).iter().zip(tx.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*s, Tensor::column(&ds));
            }
        }
        Op::LeakyRelu(x) => acc(
            *x,
            zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { LEAKY_SLOPE * gv }),
        ),
        Op::Relu(x) => acc(*x, zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                acc(p, Tensor::new(r, c, slice).expect("shape"));
                offset += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                let piece = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                acc(p, piece);
                offset += c;
            }
        }
        Op::Transpose(x) => acc(*x, g.transpose()),
        Op::GatherRows(x, idx) => {
            let (r, c) = val(*x).shape();
            let mut dx = Tensor::zeros(r, c);
            for (i, &src) in idx.iter().enumerate() {
                for (o, &v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            acc(*x, dx);
        }
        Op::ScatterAddRows(x, idx) => acc(*x, g.select_rows(idx)),
        Op::SegmentSoftmax(x, seg) => {
            let y = out.data();
            let mut dot = vec![0.0; seg.segment_count()];
            for (i, &s) in seg.entries().iter().enumerate() {
                dot[s] += y[i] * g.data()[i];
            }
            let dx: Vec<f64> = seg
                .entries()
                .iter()
                .enumerate()
                .map(|(i, &s)| y[i] * (g.data()[i] - dot[s]))
                .collect();
            acc(*x, Tensor::column(&dx));
        }
        Op::SegmentMean(x, seg) => {
            let sizes = seg.sizes();
            let d = g.cols();
            let mut dx = Tensor::zeros(seg.entry_count(), d);
            for (i, &s) in seg.entries().iter().enumerate() {
                let inv = 1.0 / sizes[s] as f64;
                for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(s)) {
                    *o = v * inv;
                }
            }
            acc(*x, dx);
        }
        Op::RowSoftmax(x) => {
            let mut dx = Tensor::zeros(out.rows(), out.cols());
            for i in 0..out.rows() {
                let (y, gr) = (out.row(i), g.row(i));
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                    *o = y[j] * (gr[j] - dot);
                }
            }
            acc(*x, dx);
        }
        Op::Sum(x) => {
            let (r, c) = val(*x).shape();
            acc(*x, Tensor::filled(r, c, g.item()));
        }
        Op::Mean(x) => {
            let (r, c) = val(*x).shape();
            acc(*x, Tensor::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::LayerNorm(x, inv_std) => {
            let d = out.cols() as f64;
            let mut dx = Tensor::zeros(out.rows(), out.cols());
            for (i, &r) in inv_std.iter().enumerate() {
                let (y, gr) = (out.row(i), g.row(i));
                let g_mean = gr.iter().sum::<f64>() / d;
                let gy_mean = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
                for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                    *o = r * (gr[j] - g_mean - y[j] * gy_mean);
                }
            }
            acc(*x, dx);
        }
        Op::SoftmaxCrossEntropy(x, labels, probs) => {
            let scale = g.item() / labels.len() as f64;
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                let row = dx.row_mut(i);
                row[l] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            acc(*x, dx);
        }
        Op::SquaredError(x, target) => {
            let scale = 2.0 * g.item() / target.len() as f64;
            acc(*x, zip(val(*x), target, |p, t| scale * (p - t)));
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Max-subtracted softmax within each segment.
pub(crate) fn segment_softmax_values(x: &[f64], seg: &SegmentIndex) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; seg.segment_count()];
    for (&v, &s) in x.iter().zip(seg.entries()) {
        max[s] = max[s].max(v);
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(seg.entries())
        .map(|(&v, &s)| (v - max[s]).exp())
        .collect();
    let mut sum = vec![0.0; seg.segment_count()];
    for (&e, &s) in out.iter().zip(seg.entries()) {
        sum[s] += e;
    }
    for (o, &s) in out.iter_mut().zip(seg.entries()) {
        *o /= sum[s];
    }
    out
}
