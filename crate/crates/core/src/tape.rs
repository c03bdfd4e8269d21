//! Whole-tensor reverse-mode autodiff.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep is a reverse scan. Leaves created
//! with [`Tape::param`] collect gradients; [`Tape::constant`] leaves do not.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gelu, gelu_grad, gemm, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SliceRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Surfaces the first non-finite value seen (checked in debug/test builds).
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul", value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul_nt", value, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_with(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push("add", value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_with(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push("sub", value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push("mul", value, Op::Mul(a, b), rg))
    }

    /// Broadcast-add a length-`C` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(shape_err(format!(
                "add_row: {} columns vs bias of {}",
                c,
                self.value(row).len()
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(c) {
            for (v, bb) in chunk.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push("add_row", value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar expects a one-element multiplier"));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push("mul_scalar", value, Op::MulScalar(x, s), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xt = self.value(x);
        let (r, c) = (xt.rows(), xt.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm gain/bias length differs from last axis"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xt.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (r, v) = (lt.rows(), lt.cols());
        if targets.len() != r {
            return Err(shape_err(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
        }
        let mut probs = lt.data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / r as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row gather: output row `i` is `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {i} outside table of {r}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            "gather",
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// First `end` rows of a matrix.
    pub fn slice_rows(&mut self, x: Var, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(0, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push("slice_rows", value, Op::SliceRows(x), rg))
    }

    /// First `end` columns of a matrix.
    pub fn slice_cols(&mut self, x: Var, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if end == 0 || end > c {
            return Err(shape_err(format!("column prefix {end} of {c}")));
        }
        let mut out = Vec::with_capacity(r * end);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[..end]);
        }
        let value = Tensor::new(vec![r, end], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push("slice_cols", value, Op::SliceCols(x, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push("reshape", value, Op::Reshape(x), rg))
    }

    /// Causal scaled dot-product attention over `heads` column blocks.
    ///
    /// `q`, `k`, `v` are `[batch·seq × heads·head_dim]`; row `b·seq + t` is token
    /// `t` of sequence `b`, and head `h` occupies columns `h·head_dim..`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return Err(shape_err("attention: q/k/v shapes differ"));
        }
        let width = qt.cols();
        if qt.rows() != batch * seq || heads == 0 || width % heads != 0 {
            return Err(shape_err(format!(
                "attention: {:?} for batch {batch}, seq {seq}, {heads} heads",
                qt.shape()
            )));
        }
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + off..][..hd];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * width + off..][..hd];
                        prow[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * width + off..][..hd];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * width + off..][..hd];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qt.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bt.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ, A: m×k, B: n×k
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bt.data(), false, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, at.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_with(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_with(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![d]).unwrap());
                }
            }
            Op::Gelu(x) => {
                let dx = g.zip_with(self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_with(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let r = g.rows();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let d = g.data()[i * c + j];
                            dg[j] += d * xhat[i * c + j];
                            db[j] += d;
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::new(bs, db).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            dx[i * c + j] =
                                inv_std[i] / cf * (cf * dh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lt = self.value(*logits);
                let v = lt.cols();
                let r = targets.len();
                let scale = g.item() / r as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= 1.0;
                }
                for x in d.iter_mut() {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lt.shape().to_vec(), d).unwrap());
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (row, &i) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    for (a, b) in dst.iter_mut().zip(g.row(row)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::SliceRows(x) => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.shape());
                d.data_mut()[..g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols(x, end) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    d.data_mut()[i * c..i * c + end].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let c = t.cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for i in 0..t.rows() {
                            d.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), d).unwrap());
                    }
                    off += c;
                }
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.item()));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qt.cols();
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd, gd) = (qt.data(), kt.data(), vt.data(), g.data());
                let mut dq = vec![0.0; qt.len()];
                let mut dk = vec![0.0; qt.len()];
                let mut dv = vec![0.0; qt.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * hd;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            let gi = &gd[(b * seq + i) * width + off..][..hd];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &vd[(b * seq + j) * width + off..][..hd];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dot += dp[j] * prow[j];
                                let dvj = &mut dv[(b * seq + j) * width + off..][..hd];
                                for (d, gg) in dvj.iter_mut().zip(gi) {
                                    *d += prow[j] * gg;
                                }
                            }
                            let qrow = (b * seq + i) * width + off;
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + j) * width + off;
                                for e in 0..hd {
                                    dq[qrow + e] += ds * kd[krow + e];
                                    dk[krow + e] += ds * qd[qrow + e];
                                }
                            }
                        }
                    }
                }
                let shape = qt.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), dq).unwrap());
                self.accumulate(grads, *k, Tensor::new(shape.clone(), dk).unwrap());
                self.accumulate(grads, *v, Tensor::new(shape, dv).unwrap());
            }
        }
    }
}

/// Per-row cross-entropy of a logits matrix, without a tape.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let v = logits.cols();
    if targets.len() != logits.rows() {
        return Err(shape_err("cross_entropy_rows: target count differs from rows"));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t >= v {
                return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t])
        })
        .collect()
}
