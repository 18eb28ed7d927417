//! Tape-based reverse-mode automatic differentiation.
//!
//! Forward calls append a node holding its value and the handles it read.
//! [`Tape::backward`] walks the nodes in reverse, so every use of a value
//! contributes its adjoint exactly once and reuse accumulates additively.
//! A tape lives for one training step and is dropped afterwards.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{self, gelu, gelu_grad, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One softmax-retrieval term: the score at `(row, positive)` competes with
/// the scores at `(row, negatives[..])`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalTerm {
    pub row: usize,
    pub positive: usize,
    pub negatives: Rc<[usize]>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Rc<[f64]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: tensor::LayerNormCache,
    },
    Gelu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        flagged: Vec<bool>,
    },
    Sum(Var),
    WeightedSum(Var, Rc<[f64]>),
    RetrievalNll {
        scores: Var,
        terms: Rc<[RetrievalTerm]>,
        tau: f64,
    },
    BceWithLogits {
        logits: Var,
        labels: Rc<[f64]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a parameter; its adjoint flows back to
    /// the store on [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a length-`d` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    /// Multiplies row `r` by `factors[r]`; used with 0/1 factors to zero rows.
    /// Zeroed entries are `+0.0` whatever the sign of the input.
    pub fn row_scale(&mut self, x: Var, factors: Rc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(Error::shape("row_scale", xv.shape(), &[factors.len()]));
        }
        let mut out = xv.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v = *v * f + 0.0;
            }
        }
        Ok(self.push(out, Op::RowScale(x, factors)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() || len == 0 {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape().len() != 2 {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            if r >= xv.rows() {
                return Err(Error::shape("gather_rows", xv.shape(), &[r]));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows(x, rows)))
    }

    /// Row softmax over `allowed` entries only; rows with nothing allowed
    /// produce zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (out, _) = tensor::masked_softmax_rows(self.value(x), allowed)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (out, norms, flagged) = tensor::l2_normalize(self.value(x));
        self.push(out, Op::L2Normalize { x, norms, flagged })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ weights[i] · x[i]` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape("weighted_sum", xv.shape(), &[weights.len()]));
        }
        let s = xv.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Sum over terms of `-log softmax` of the positive among
    /// `{positive} ∪ negatives`, with logits `score / tau`.
    pub fn retrieval_nll(&mut self, scores: Var, terms: Rc<[RetrievalTerm]>, tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let s = self.value(scores);
        let (rows, cols) = (s.rows(), s.cols());
        let mut total = 0.0;
        for group in term_groups(&terms) {
            let head = &group[0];
            if head.row >= rows || head.negatives.iter().any(|&c| c >= cols) || group.iter().any(|t| t.positive >= cols) {
                return Err(Error::shape("retrieval_nll", s.shape(), &[head.row, head.positive]));
            }
            let row = s.row(head.row);
            let neg = NegativePool::new(row, &head.negatives, tau);
            total += group.iter().map(|t| neg.term(row[t.positive] / tau).0).sum::<f64>();
        }
        Ok(self.push(Tensor::scalar(total), Op::RetrievalNll { scores, terms, tau }))
    }

    /// Sum of binary cross-entropy terms with logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<[f64]>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() {
            return Err(Error::shape("bce_with_logits", z.shape(), &[labels.len()]));
        }
        let total = z.data().iter().zip(labels.iter()).map(|(&z, &y)| softplus(z) - y * z).sum();
        Ok(self.push(Tensor::scalar(total), Op::BceWithLogits { logits, labels }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", out.shape(), &[1]));
        }
        if !out.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("tape node {}", output.0)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    send(*a, g.matmul_nt(bv)?);
                    send(*b, av.matmul_tn(&g)?);
                }
                Op::MatMulNt(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    send(*a, g.matmul(bv)?);
                    send(*b, g.matmul_tn(av)?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(x, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(*bias, Tensor::new(bshape, gb)?);
                    send(*x, g);
                }
                Op::Scale(x, s) => send(*x, g.scale(*s)),
                Op::RowScale(x, f) => {
                    let mut gx = g;
                    for (r, &fr) in f.iter().enumerate() {
                        for v in gx.row_mut(r) {
                            *v *= fr;
                        }
                    }
                    send(*x, gx);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut gp = Tensor::zeros(pv.shape());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        send(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let gp = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        send(p, gp);
                    }
                }
                Op::GatherRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    send(*x, gx);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
                            *out = yr[j] * (gr[j] - inner);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let gain_v = self.value(*gain);
                    let d = g.cols();
                    let mut gx = Tensor::zeros(g.shape());
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xhat = cache.normalized.row(r);
                        let s = cache.inv_std[r];
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gain_v.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
                            *out = s * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    send(*x, gx);
                    send(*gain, Tensor::new(gain_v.shape().to_vec(), ggain)?);
                    let bshape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(bshape, gbias)?);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data().iter().zip(xv.data()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::L2Normalize { x, norms, flagged } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..y.rows() {
                        if flagged[r] {
                            continue;
                        }
                        let yr = y.row(r);
                        let inner: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        let n = norms[r];
                        for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
                            *out = (g.row(r)[j] - yr[j] * inner) / n;
                        }
                    }
                    send(*x, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    send(*x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::WeightedSum(x, w) => {
                    let xv = self.value(*x);
                    let up = g.data()[0];
                    let data = w.iter().map(|wi| wi * up).collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::RetrievalNll { scores, terms, tau } => {
                    let s = self.value(*scores);
                    let upstream = g.data()[0];
                    let mut gs = Tensor::zeros(s.shape());
                    for group in term_groups(terms) {
                        let head = &group[0];
                        let row = s.row(head.row);
                        let neg = NegativePool::new(row, &head.negatives, *tau);
                        let mut neg_coef = 0.0;
                        let mut pos_grads = Vec::with_capacity(group.len());
                        for t in group {
                            let (_, w_pos, w_negs) = neg.term(row[t.positive] / tau);
                            neg_coef += w_negs;
                            pos_grads.push((t.positive, upstream * (w_pos - 1.0) / tau));
                        }
                        let gr = gs.row_mut(head.row);
                        for (c, g) in pos_grads {
                            gr[c] += g;
                        }
                        for &c in head.negatives.iter() {
                            gr[c] += upstream * (row[c] / tau - neg.max).exp() * neg_coef / tau;
                        }
                    }
                    send(*scores, gs);
                }
                Op::BceWithLogits { logits, labels } => {
                    let z = self.value(*logits);
                    let upstream = g.data()[0];
                    let data = z.data().iter().zip(labels.iter()).map(|(&z, &y)| upstream * (sigmoid(z) - y)).collect();
                    send(*logits, Tensor::new(z.shape().to_vec(), data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t).expect("adjoint shape matches value"),
        slot @ None => *slot = Some(t),
    }
}

/// Maximal runs of terms sharing a row and the same negative list.
fn term_groups(terms: &[RetrievalTerm]) -> impl Iterator<Item = &[RetrievalTerm]> {
    terms.chunk_by(|a, b| a.row == b.row && (Rc::ptr_eq(&a.negatives, &b.negatives) || a.negatives == b.negatives))
}

/// Shifted partition sum over a shared negative set.
struct NegativePool {
    max: f64,
    sum: f64,
}

impl NegativePool {
    fn new(row: &[f64], negatives: &[usize], tau: f64) -> Self {
        let max = negatives.iter().map(|&c| row[c] / tau).fold(f64::NEG_INFINITY, f64::max);
        let sum = negatives.iter().map(|&c| (row[c] / tau - max).exp()).sum();
        Self { max, sum }
    }

    /// `(loss, softmax weight of the positive, factor k)`; negative `c` has
    /// weight `exp(z_c − max) · k`.
    fn term(&self, z_pos: f64) -> (f64, f64, f64) {
        if self.sum == 0.0 {
            return (0.0, 1.0, 0.0);
        }
        let m = self.max.max(z_pos);
        let shift = (self.max - m).exp();
        let denom = (z_pos - m).exp() + self.sum * shift;
        (m + denom.ln() - z_pos, (z_pos - m).exp() / denom, shift / denom)
    }
}

/// Adjoints of every node reachable from the backward root.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter adjoints into the store's gradient slots.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            let Op::Param(id) = node.op else { continue };
            let Some(g) = self.grads.get(idx).and_then(Option::as_ref) else { continue };
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(existing) => existing.add_assign(g).expect("param grad shape"),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}
