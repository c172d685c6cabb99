//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse insertion order (a valid reverse topological order) and
//! accumulates gradients into every node that requires one.

use std::sync::Arc;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, transpose_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    StopGradient,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    RepeatRows(Var),
    Relu(Var),
    MaskedSoftmax(Var, Arc<[bool]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RelShift(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<f64>,
        n_active: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward` call. `None` for nodes
    /// that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// True when the node was created by [`Tape::stop_gradient`].
    pub fn is_stop_gradient(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::StopGradient)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Passes the value through and blocks every gradient behind it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false, "stop_gradient")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Scalar-tensor product, the only broadcast the tape supports implicitly.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    /// Adds a row vector (any shape with `cols` elements) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("add_row")?;
        if self.value(row).numel() != c {
            return Err(Error::dim(
                "add_row",
                format!("row of {} values for {} columns", self.value(row).numel(), c),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        let bias = self.value(row).data();
        for i in 0..r {
            for (o, b) in data[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += b;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    /// Stacks `times` copies of a `1×n` matrix.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("repeat_rows")?;
        if r != 1 {
            return Err(Error::dim("repeat_rows", format!("expected one row, got {r}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(vec![times, c], data)?;
        let rg = self.rg(a);
        self.push(out, Op::RepeatRows(a), rg, "repeat_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// Row-wise softmax over entries where `allowed` is true; disallowed
    /// entries come out exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, allowed: Arc<[bool]>) -> Result<Var> {
        let out = masked_softmax_values(self.value(scores), &allowed)?;
        let rg = self.rg(scores);
        self.push(out, Op::MaskedSoftmax(scores, allowed), rg, "masked_softmax")
    }

    /// Normalizes over the last axis with the biased variance estimator, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", format!("affine params must have {d} values")));
        }
        let rows = vx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Gathers rows of `table` (V×d) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).require_matrix("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { token: id, vocab: v });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row mismatch {r} vs {rows}")));
            }
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            let c = vp.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(vp.row(r));
            }
            offset += c;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg, "slice_cols")
    }

    /// Left-shifts row `i` of an `L × (M+L)` matrix by `L-1-i` and zero-fills
    /// the vacated tail (see [`rel_shift_values`]).
    pub fn rel_shift(&mut self, a: Var) -> Result<Var> {
        let out = rel_shift_values(self.value(a))?;
        let rg = self.rg(a);
        self.push(out, Op::RelShift(a), rg, "rel_shift")
    }

    /// Mean negative log-likelihood (nats) over active rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let (rows, v) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != rows || active.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} flags", targets.len(), active.len()),
            ));
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(Error::InvalidLoss("no active positions".into()));
        }
        let lg = self.value(logits);
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::Vocab { token: t, vocab: v });
            }
            let row = lg.row(r);
            let lse = log_sum_exp(row);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            if active[r] {
                total += lse - row[t];
            }
        }
        let out = Tensor::scalar(total / n_active as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
                n_active,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    /// Back-propagates from a scalar `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Back-propagates from a scalar `loss` with seed gradient `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        contribution(slot, &self.nodes);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Split borrows: grads are written through `accumulate`, node values
        // are read through the slice handed to the closure.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let out_shape = self.nodes[idx].value.shape().to_vec();
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.cols();
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| gemm_nt(m, n, k, g, nodes[b.0].value.data(), ga));
                self.accumulate(b, |gb, nodes| gemm_tn(k, m, n, nodes[a.0].value.data(), g, gb));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.rows();
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| gemm_nn(m, n, k, g, nodes[b.0].value.data(), ga));
                self.accumulate(b, |gb, nodes| gemm_tn(n, m, k, g, nodes[a.0].value.data(), gb));
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(&self.nodes[a.0].value);
                let mut t = vec![0.0; m * n];
                transpose_into(n, m, g, &mut t);
                self.accumulate(*a, |ga, _| add_into(ga, &t));
            }
            Op::Reshape(a) => self.accumulate(*a, |ga, _| add_into(ga, g)),
            Op::Add(a, b) => {
                self.accumulate(*a, |ga, _| add_into(ga, g));
                self.accumulate(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |ga, _| add_into(ga, g));
                self.accumulate(*b, |gb, _| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *o += x * y;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, |ga, _| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = out_shape[1];
                self.accumulate(*a, |ga, _| add_into(ga, g));
                self.accumulate(*row, |gr, _| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::RepeatRows(a) => {
                let c = out_shape[1];
                self.accumulate(*a, |ga, _| {
                    for chunk in g.chunks(c) {
                        add_into(ga, chunk);
                    }
                });
            }
            Op::Relu(a) => {
                self.accumulate(*a, |ga, nodes| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(scores, allowed) => {
                let y = self.nodes[idx].value.data().to_vec();
                let c = out_shape[1];
                self.accumulate(*scores, |gs, _| {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            if allowed[r * c + j] {
                                gs[r * c + j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = inv_std.len();
                self.accumulate(*bias, |gb, _| {
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                });
                self.accumulate(*gain, |gg, _| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                let gain = *gain;
                self.accumulate(*x, |gx, nodes| {
                    let gv = nodes[gain.0].value.data();
                    let inv_d = 1.0 / d as f64;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let v = g[r * d + j] * gv[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r]
                                * (dxhat[j] - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out_shape[1];
                self.accumulate(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let seg = &g[offset..offset + n];
                    self.accumulate(p, |gp, _| add_into(gp, seg));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    let rows = self.nodes[p.0].value.rows();
                    self.accumulate(p, |gp, _| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out_shape[1];
                let start = *start;
                self.accumulate(*a, |ga, _| add_into(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let len = out_shape[1];
                let start = *start;
                let a = *a;
                let c = self.nodes[a.0].value.cols();
                self.accumulate(a, |ga, _| {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        add_into(&mut ga[r * c + start..r * c + start + len], chunk);
                    }
                });
            }
            Op::RelShift(a) => {
                let (l, k) = (out_shape[0], out_shape[1]);
                self.accumulate(*a, |ga, _| rel_shift_backward(l, k, g, ga));
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                n_active,
            } => {
                let v = self.nodes[logits.0].value.cols();
                let scale = g[0] / *n_active as f64;
                self.accumulate(*logits, |gl, _| {
                    for (r, &t) in targets.iter().enumerate() {
                        if !active[r] {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(*a, |ga, _| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Softmax over allowed entries of each row, computed on plain values.
pub fn masked_softmax_values(scores: &Tensor, allowed: &[bool]) -> Result<Tensor> {
    let (r, c) = scores.require_matrix("masked_softmax")?;
    if allowed.len() != r * c {
        return Err(Error::dim(
            "masked_softmax",
            format!("mask has {} entries for {}x{}", allowed.len(), r, c),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = scores.row(i);
        let mask = &allowed[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if mask[j] && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: i });
        }
        let mut total = 0.0;
        for j in 0..c {
            if mask[j] {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
        }
        for j in 0..c {
            out[i * c + j] /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Row `i` of the output takes input columns starting at `L-1-i`; entries
/// past column `M+i` are zero. `L` is the row count, `M+L` the column count.
pub fn rel_shift_values(input: &Tensor) -> Result<Tensor> {
    let (l, k) = input.require_matrix("rel_shift")?;
    if k < l {
        return Err(Error::dim("rel_shift", format!("{l} rows need at least {l} columns, got {k}")));
    }
    let m = k - l;
    let mut out = vec![0.0; l * k];
    for i in 0..l {
        let shift = l - 1 - i;
        let valid = m + i + 1;
        out[i * k..i * k + valid].copy_from_slice(&input.row(i)[shift..shift + valid]);
    }
    Tensor::new(vec![l, k], out)
}

fn rel_shift_backward(l: usize, k: usize, g: &[f64], ga: &mut [f64]) {
    let m = k - l;
    for i in 0..l {
        let shift = l - 1 - i;
        let valid = m + i + 1;
        add_into(&mut ga[i * k + shift..i * k + shift + valid], &g[i * k..i * k + valid]);
    }
}
