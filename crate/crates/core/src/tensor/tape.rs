use rand::Rng;

use super::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{FsanError, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

/// Derivative of an elementwise map, given input `x` and output `y`.
pub type ElementwiseGrad = fn(x: f64, y: f64) -> f64;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elementwise(Var, ElementwiseGrad),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowMin(Var, Vec<usize>),
    MaxAll(Var, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormCols {
        x: Var,
        /// Per-column divisor actually applied (norm, or eps when the norm is below eps).
        denom: Vec<f64>,
        below_eps: Vec<bool>,
    },
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, usize),
    ConcatCols(Vec<Var>),
    Dropout(Var, Vec<f64>),
    SpanSums {
        x: Var,
        spans: Vec<(usize, usize)>,
        normalize: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation, differentiated in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FsanError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(FsanError::Shape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a matrix"),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id }
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", ta)?;
        let (k2, n) = matrix("matmul", tb)?;
        if k != k2 {
            return Err(FsanError::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        matrix("transpose", t)?;
        let out = t.transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = matrix("add_row", ta)?;
        if tr.len() != n {
            return Err(FsanError::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(&mut self, a: Var, f: fn(f64) -> f64, df: ElementwiseGrad) -> Var {
        let out = self.value(a).map(f);
        self.push(out, Op::Elementwise(a, df), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(FsanError::Domain {
                op: "log",
                reason: format!("input {bad} is not positive; clamp first"),
            });
        }
        Ok(self.elementwise(a, f64::ln, |x, _| 1.0 / x))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Minimum of each row; the gradient goes to the first minimal entry.
    pub fn row_min(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() > 2 {
            matrix("row_min", t)?;
        }
        let (r, c) = (t.rows(), t.cols());
        let mut mins = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            arg.push(best);
            mins.push(row[best]);
        }
        Ok(self.push(Tensor::vector(mins), Op::RowMin(a, arg), &[a]))
    }

    /// Largest element; the gradient goes to the first maximal entry.
    pub fn max_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut best = 0;
        for (j, &v) in t.data().iter().enumerate().skip(1) {
            if v > t.data()[best] {
                best = j;
            }
        }
        let out = Tensor::scalar(t.data()[best]);
        self.push(out, Op::MaxAll(a, best), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix("softmax_rows", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise layer normalization (population variance) followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = matrix("layer_norm", t)?;
        if d < 2 {
            return Err(FsanError::Shape {
                shape: t.shape().to_vec(),
                reason: "layer_norm needs at least 2 features".into(),
            });
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(FsanError::dim("layer_norm", t.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &t.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![r, d], out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every column to unit Euclidean norm; columns with norm below
    /// `eps` are divided by `eps` instead.
    pub fn l2_normalize_columns(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix("l2_normalize_columns", t)?;
        let mut denom = vec![0.0; c];
        let mut below_eps = vec![false; c];
        for j in 0..c {
            let norm = (0..r).map(|i| t.at(i, j).powi(2)).sum::<f64>().sqrt();
            below_eps[j] = norm < eps;
            denom[j] = if below_eps[j] { eps } else { norm };
        }
        let mut out = t.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] /= denom[j];
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(
            out,
            Op::L2NormCols {
                x,
                denom,
                below_eps,
            },
            &[x],
        ))
    }

    /// Rows `indices` of a matrix, in order; repeats allowed (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix("gather_rows", t)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(FsanError::Input(format!("row index {bad} out of range for {r} rows")));
        }
        if indices.is_empty() {
            return Err(FsanError::Input("gather_rows needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn select_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix("select_cols", t)?;
        if len == 0 || start + len > c {
            return Err(FsanError::Input(format!(
                "column range {start}..{} out of bounds for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data);
        Ok(self.push(out, Op::SelectCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| FsanError::Input("concat_cols needs at least one input".into()))?;
        let (r, _) = matrix("concat_cols", self.value(*first))?;
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            let (pr, pc) = matrix("concat_cols", t)?;
            if pr != r {
                return Err(FsanError::dim("concat_cols", self.value(*first).shape(), t.shape()));
            }
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let pc = t.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + pc].copy_from_slice(t.row(i));
            }
            off += pc;
        }
        let out = Tensor::from_parts(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Inverted dropout: zeroes each entry with probability `p`, scales survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    /// For an `m×n` matrix and inclusive column spans, the `m×spans.len()`
    /// matrix of per-row span sums (or span means when `normalize`).
    pub fn span_sums(&mut self, a: Var, spans: &[(usize, usize)], normalize: bool) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix("span_sums", t)?;
        if let Some(&(s, e)) = spans.iter().find(|&&(s, e)| s > e || e >= c) {
            return Err(FsanError::Input(format!("span ({s},{e}) invalid for {c} columns")));
        }
        let k = spans.len();
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            let row = t.row(i);
            for (q, &(s, e)) in spans.iter().enumerate() {
                let v: f64 = row[s..=e].iter().sum();
                out[i * k + q] = if normalize { v / (e - s + 1) as f64 } else { v };
            }
        }
        let out = Tensor::from_parts(vec![r, k], out);
        Ok(self.push(
            out,
            Op::SpanSums {
                x: a,
                spans: spans.to_vec(),
                normalize,
            },
            &[a],
        ))
    }

    /// Allows [`Tape::backward`] to run again on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(FsanError::Contract(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(FsanError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.id].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            let target = &self.nodes[v.id];
            if !target.requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(t) => {
                    for (x, d) in t.data_mut().iter_mut().zip(delta) {
                        *x += d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(target.value.shape().to_vec(), delta));
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, matmul_bt_raw(gd, tb.data(), m, n, k));
                acc(*b, matmul_at_raw(ta.data(), gd, m, k, n));
            }
            Op::Transpose(a) => {
                acc(*a, g.transpose().into_data());
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, gd.to_vec());
                let n = val(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                acc(*row, dr);
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => acc(*a, gd.to_vec()),
            Op::Elementwise(a, df) => {
                let x = val(*a).data();
                let y = node.value.data();
                acc(
                    *a,
                    gd.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                acc(
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![gd[0] / n as f64; n]);
            }
            Op::RowMin(a, arg) => {
                let t = val(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (i, &j) in arg.iter().enumerate() {
                    d[i * c + j] = gd[i];
                }
                acc(*a, d);
            }
            Op::MaxAll(a, idx) => {
                let mut d = vec![0.0; val(*a).len()];
                d[*idx] = gd[0];
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((dj, yj), gj) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dj = yj * (gj - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gn = val(*gain).data();
                let d = gn.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (i, is) in inv_std.iter().enumerate() {
                    let grow = &gd[i * d..(i + 1) * d];
                    let hrow = &xhat[i * d..(i + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gn[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gn[j];
                        dx[i * d + j] =
                            is / d as f64 * (d as f64 * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::L2NormCols {
                x,
                denom,
                below_eps,
            } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    if below_eps[j] {
                        for i in 0..r {
                            dx[i * c + j] = gd[i * c + j] / denom[j];
                        }
                        continue;
                    }
                    let dot: f64 = (0..r).map(|i| y.at(i, j) * gd[i * c + j]).sum();
                    for i in 0..r {
                        dx[i * c + j] = (gd[i * c + j] - y.at(i, j) * dot) / denom[j];
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows(a, idx) => {
                let t = val(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (q, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[q * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::SelectCols(a, start) => {
                let t = val(*a);
                let (r, c) = (t.rows(), t.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + pc]);
                    }
                    acc(*p, d);
                    off += pc;
                }
            }
            Op::Dropout(a, mask) => acc(*a, gd.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::SpanSums {
                x,
                spans,
                normalize,
            } => {
                // Each span adds its gradient to columns s..=e; use a difference array per row.
                let t = val(*x);
                let (r, c) = (t.rows(), t.cols());
                let k = spans.len();
                let mut d = vec![0.0; r * c];
                let mut diff = vec![0.0; c + 1];
                for i in 0..r {
                    diff.iter_mut().for_each(|v| *v = 0.0);
                    for (q, &(s, e)) in spans.iter().enumerate() {
                        let mut gq = gd[i * k + q];
                        if *normalize {
                            gq /= (e - s + 1) as f64;
                        }
                        diff[s] += gq;
                        diff[e + 1] -= gq;
                    }
                    let mut run = 0.0;
                    for j in 0..c {
                        run += diff[j];
                        d[i * c + j] = run;
                    }
                }
                acc(*x, d);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
