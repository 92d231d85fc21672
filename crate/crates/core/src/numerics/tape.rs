//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, enough saved state to run its vector-Jacobian
//! product. Node order is a topological order, so the backward pass is a
//! single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::array::{gemm, Operand};
use super::Array;
use crate::error::{contract_err, dim_err, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape description for one fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// Row-major `q_len x kv_len` visibility; `None` means fully visible.
    pub mask: Option<Rc<Vec<bool>>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    Relu(Var),
    Log(Var, f64),
    XLogX(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GroupMeanRows(Var, usize),
    RowCosine(Var, Var),
    Sum(Var),
    Softmax(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape. Values are immutable once recorded.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, Var>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for a registered parameter id, if it was reached.
    pub fn param(&self, param_id: usize) -> Option<&Array> {
        self.params.get(&param_id).and_then(|v| self.get(*v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A tape that never records backward state; all values are constants.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter id.
    pub fn leaf(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers parameter `id`; repeated calls return the same node so every
    /// use of a shared parameter accumulates into one gradient.
    pub fn param(&self, id: usize, value: &Array, trainable: bool) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.borrow().get(&id).copied()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMul(a, b), self.any_grad(&[a, b])))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(dim_err!("{name}: shapes {:?} and {:?}", x.shape(), y.shape()));
        }
        Ok(x.zip_map(y, f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.any_grad(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.any_grad(&[a, b])))
    }

    /// Adds a row vector (`[cols]` or `[1, cols]`) to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            if bv.len() != xv.cols() {
                return Err(dim_err!(
                    "add_row: bias of {} entries for {} columns",
                    bv.len(),
                    xv.cols()
                ));
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(bv.len()) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(out, Op::AddRow(x, bias), self.any_grad(&[x, bias])))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), self.any_grad(&[x]))
    }

    pub fn scale(&self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), self.any_grad(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), self.any_grad(&[x]))
    }

    pub fn abs(&self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), self.any_grad(&[x]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), self.any_grad(&[x]))
    }

    /// Natural log with the argument floored at `floor` (gradient is zero
    /// below the floor).
    pub fn log_floor(&self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log(x, floor), self.any_grad(&[x]))
    }

    /// `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&self, x: Var) -> Var {
        let out = self.value(x).map(xlogx);
        self.push(out, Op::XLogX(x), self.any_grad(&[x]))
    }

    /// Row-wise RMS normalization scaled by `gain` (`[cols]`).
    pub fn rms_norm(&self, x: Var, gain: Var) -> Result<Var> {
        let (out, inv_rms) = {
            let nodes = self.nodes.borrow();
            let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
            let cols = xv.cols();
            if gv.len() != cols {
                return Err(dim_err!("rms_norm: gain {} vs {} columns", gv.len(), cols));
            }
            let mut out = xv.clone();
            let mut inv = Vec::with_capacity(xv.rows());
            for row in out.data_mut().chunks_mut(cols) {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                let r = 1.0 / (ms + RMS_EPS).sqrt();
                for (o, g) in row.iter_mut().zip(gv.data()) {
                    *o *= r * g;
                }
                inv.push(r);
            }
            (out, inv)
        };
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(
            out,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: if rg { inv_rms } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Fused scaled-dot-product multi-head attention.
    ///
    /// `q` is `(batch*q_len) x d`, `k` and `v` are `(batch*kv_len) x d`.
    /// Masked entries receive zero probability; every query row must see at
    /// least one key.
    pub fn attention(&self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let d = qv.cols();
            if kv.cols() != d || vv.cols() != d {
                return Err(dim_err!("attention: width mismatch"));
            }
            if qv.rows() != spec.batch * spec.q_len
                || kv.rows() != spec.batch * spec.kv_len
                || vv.rows() != kv.rows()
            {
                return Err(dim_err!(
                    "attention: rows ({}, {}, {}) do not match batch {} x ({}, {})",
                    qv.rows(),
                    kv.rows(),
                    vv.rows(),
                    spec.batch,
                    spec.q_len,
                    spec.kv_len
                ));
            }
            if spec.heads == 0 || d % spec.heads != 0 {
                return Err(dim_err!("attention: {} heads do not divide width {}", spec.heads, d));
            }
            if let Some(m) = &spec.mask {
                if m.len() != spec.q_len * spec.kv_len {
                    return Err(dim_err!("attention: mask size {}", m.len()));
                }
                for i in 0..spec.q_len {
                    if !m[i * spec.kv_len..(i + 1) * spec.kv_len].iter().any(|&b| b) {
                        return Err(contract_err!("attention mask row {i} sees nothing"));
                    }
                }
            }
            attention_forward(qv.data(), kv.data(), vv.data(), d, &spec)
        };
        let rg = self.any_grad(&[q, k, v]);
        let shape = vec![spec.batch * spec.q_len, self.value(q).cols()];
        let out = Array::from_vec(shape, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs: if rg { probs } else { Vec::new() },
                spec,
            },
            rg,
        ))
    }

    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let cols = xv.cols();
            let rows = xv.rows();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx.iter() {
                if r >= rows {
                    return Err(dim_err!("gather_rows: row {r} of {rows}"));
                }
                data.extend_from_slice(xv.row(r));
            }
            Array::from_vec(vec![idx.len(), cols], data)?
        };
        Ok(self.push(out, Op::GatherRows(x, idx), self.any_grad(&[x])))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(dim_err!("concat_rows: {} vs {} columns", v.cols(), cols));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Array::from_vec(vec![rows, cols], data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.any_grad(parts)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.any_grad(&[x])))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&self, x: Var, group: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if group == 0 || xv.rows() % group != 0 {
                return Err(dim_err!("group_mean_rows: {} rows, group {group}", xv.rows()));
            }
            let cols = xv.cols();
            let n = xv.rows() / group;
            let mut out = Array::zeros(&[n, cols]);
            for g in 0..n {
                for r in 0..group {
                    let src = xv.row(g * group + r);
                    for (o, s) in out.data_mut()[g * cols..(g + 1) * cols].iter_mut().zip(src) {
                        *o += s / group as f64;
                    }
                }
            }
            out
        };
        Ok(self.push(out, Op::GroupMeanRows(x, group), self.any_grad(&[x])))
    }

    /// Cosine similarity of matching rows, `rows x 1`; zero rows give 0.
    pub fn row_cosine(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(dim_err!("row_cosine: {:?} vs {:?}", av.shape(), bv.shape()));
            }
            let data = (0..av.rows())
                .map(|r| cosine(av.row(r), bv.row(r)))
                .collect();
            Array::from_vec(vec![av.rows(), 1], data)?
        };
        Ok(self.push(out, Op::RowCosine(a, b), self.any_grad(&[a, b])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), self.any_grad(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax()?;
        Ok(self.push(out, Op::Softmax(x), self.any_grad(&[x])))
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: usize, spec: &AttnSpec) -> (Vec<f64>, Vec<f64>) {
    let (tq, tk, h) = (spec.q_len, spec.kv_len, spec.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; spec.batch * tq * d];
    let mut probs = vec![0.0; spec.batch * h * tq * tk];
    for b in 0..spec.batch {
        for head in 0..h {
            let off = head * dh;
            for i in 0..tq {
                let qi = &q[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                let p = &mut probs[((b * h + head) * tq + i) * tk..((b * h + head) * tq + i + 1) * tk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    let visible = spec.mask.as_ref().is_none_or(|m| m[i * tk + j]);
                    if visible {
                        let kj = &k[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        p[j] = s;
                        max = max.max(s);
                    } else {
                        p[j] = f64::NEG_INFINITY;
                    }
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = if pj.is_finite() { (*pj - max).exp() } else { 0.0 };
                    total += *pj;
                }
                let o = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= total;
                    if *pj != 0.0 {
                        let vj = &v[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += *pj * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

fn accumulate(grads: &mut [Option<Array>], nodes: &[Node], target: Var, g: Array) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Array>], nodes: &[Node], target: Var) -> &'a mut Array {
    grads[target.0].get_or_insert_with(|| Array::zeros(nodes[target.0].value.shape()))
}

fn backward_node(nodes: &[Node], i: usize, g: &Array, grads: &mut [Option<Array>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[a.0].requires_grad {
                let slot = grad_slot(grads, nodes, *a);
                gemm(
                    Operand::plain(g.data(), m, n),
                    Operand::transposed(bv.data(), k, n),
                    slot.data_mut(),
                    1.0,
                );
            }
            if nodes[b.0].requires_grad {
                let slot = grad_slot(grads, nodes, *b);
                gemm(
                    Operand::transposed(av.data(), m, k),
                    Operand::plain(g.data(), m, n),
                    slot.data_mut(),
                    1.0,
                );
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if nodes[a.0].requires_grad {
                accumulate(grads, nodes, *a, g.zip_map(bv, |x, y| x * y));
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, nodes, *b, g.zip_map(av, |x, y| x * y));
            }
        }
        Op::AddRow(x, bias) => {
            accumulate(grads, nodes, *x, g.clone());
            if nodes[bias.0].requires_grad {
                let cols = g.cols();
                let mut gb = Array::zeros(nodes[bias.0].value.shape());
                for row in g.data().chunks(cols) {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, *bias, gb);
            }
        }
        Op::Affine(x, scale) => accumulate(grads, nodes, *x, g.map(|v| v * scale)),
        Op::Silu(x) => {
            let xv = &nodes[x.0].value;
            let gx = g.zip_map(xv, |gv, v| {
                let s = sigmoid(v);
                gv * s * (1.0 + v * (1.0 - s))
            });
            accumulate(grads, nodes, *x, gx);
        }
        Op::Sigmoid(x) => {
            let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
            accumulate(grads, nodes, *x, gx);
        }
        Op::Abs(x) => {
            let gx = g.zip_map(&nodes[x.0].value, |gv, v| gv * v.signum() * f64::from(v != 0.0));
            accumulate(grads, nodes, *x, gx);
        }
        Op::Relu(x) => {
            let gx = g.zip_map(&nodes[x.0].value, |gv, v| if v > 0.0 { gv } else { 0.0 });
            accumulate(grads, nodes, *x, gx);
        }
        Op::Log(x, floor) => {
            let gx = g.zip_map(&nodes[x.0].value, |gv, v| if v > *floor { gv / v } else { 0.0 });
            accumulate(grads, nodes, *x, gx);
        }
        Op::XLogX(x) => {
            let gx = g.zip_map(&nodes[x.0].value, |gv, v| if v > 0.0 { gv * (v.ln() + 1.0) } else { 0.0 });
            accumulate(grads, nodes, *x, gx);
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
            let cols = xv.cols();
            let mut gx = Array::zeros(xv.shape());
            let mut gg = Array::zeros(gv.shape());
            for (r, ((xr, gr), out)) in xv
                .data()
                .chunks(cols)
                .zip(g.data().chunks(cols))
                .zip(gx.data_mut().chunks_mut(cols))
                .enumerate()
            {
                let inv = inv_rms[r];
                let mut dot = 0.0;
                for c in 0..cols {
                    let xhat = xr[c] * inv;
                    gg.data_mut()[c] += gr[c] * xhat;
                    dot += gr[c] * gv.data()[c] * xhat;
                }
                let mean = dot / cols as f64;
                for c in 0..cols {
                    let xhat = xr[c] * inv;
                    out[c] = inv * (gr[c] * gv.data()[c] - xhat * mean);
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *gain, gg);
        }
        Op::Attention { q, k, v, spec, probs } => {
            let (gq, gk, gv) = attention_backward(
                nodes[q.0].value.data(),
                nodes[k.0].value.data(),
                nodes[v.0].value.data(),
                g.data(),
                probs,
                g.cols(),
                spec,
            );
            let d = g.cols();
            let qshape = [spec.batch * spec.q_len, d];
            let kshape = [spec.batch * spec.kv_len, d];
            accumulate(grads, nodes, *q, Array::from_vec(qshape.to_vec(), gq).expect("shape"));
            accumulate(grads, nodes, *k, Array::from_vec(kshape.to_vec(), gk).expect("shape"));
            accumulate(grads, nodes, *v, Array::from_vec(kshape.to_vec(), gv).expect("shape"));
        }
        Op::GatherRows(x, idx) => {
            if nodes[x.0].requires_grad {
                let cols = g.cols();
                let slot = grad_slot(grads, nodes, *x);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut slot.data_mut()[src * cols..(src + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if nodes[p.0].requires_grad {
                    let part = Array::from_vec(
                        nodes[p.0].value.shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .expect("shape");
                    accumulate(grads, nodes, *p, part);
                }
                offset += n;
            }
        }
        Op::Reshape(x) => {
            let gx = g.clone().reshape(nodes[x.0].value.shape()).expect("same length");
            accumulate(grads, nodes, *x, gx);
        }
        Op::GroupMeanRows(x, group) => {
            let xv = &nodes[x.0].value;
            let cols = xv.cols();
            let mut gx = Array::zeros(xv.shape());
            for r in 0..xv.rows() {
                let src = g.row(r / group);
                for (o, v) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                    *o = v / *group as f64;
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::RowCosine(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let cols = av.cols();
            let mut ga = Array::zeros(av.shape());
            let mut gb = Array::zeros(bv.shape());
            for r in 0..av.rows() {
                let (x, y) = (av.row(r), bv.row(r));
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let c = node.value.data()[r];
                let gr = g.data()[r];
                for j in 0..cols {
                    ga.data_mut()[r * cols + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                    gb.data_mut()[r * cols + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                }
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Sum(x) => {
            let gx = Array::full(nodes[x.0].value.shape(), g.item());
            accumulate(grads, nodes, *x, gx);
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let cols = y.cols();
            let mut gx = Array::zeros(y.shape());
            for ((yr, gr), out) in y
                .data()
                .chunks(cols)
                .zip(g.data().chunks(cols))
                .zip(gx.data_mut().chunks_mut(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    out[c] = yr[c] * (gr[c] - dot);
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
    }
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    d: usize,
    spec: &AttnSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (tq, tk, h) = (spec.q_len, spec.kv_len, spec.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tk];
    for b in 0..spec.batch {
        for head in 0..h {
            let off = head * dh;
            for i in 0..tq {
                let qrow = (b * tq + i) * d + off;
                let gi = &g[qrow..qrow + dh];
                let p = &probs[((b * h + head) * tq + i) * tk..((b * h + head) * tq + i + 1) * tk];
                let mut dot = 0.0;
                for j in 0..tk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = (b * tk + j) * d + off;
                    let vj = &v[vrow..vrow + dh];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += p[j] * dp[j];
                    for (o, gg) in gv[vrow..vrow + dh].iter_mut().zip(gi) {
                        *o += p[j] * gg;
                    }
                }
                for j in 0..tk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (b * tk + j) * d + off;
                    for t in 0..dh {
                        gq[qrow + t] += ds * k[krow + t];
                        gk[krow + t] += ds * q[qrow + t];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let t = Tape::new();
        let x = t.leaf(Array::zeros(&[3]));
        let s = t.sigmoid(x);
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = Tape::new();
        let x = t.leaf(Array::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn shared_param_accumulates() {
        let t = Tape::new();
        let w = Array::scalar(2.0);
        let a = t.param(7, &w, true);
        let b = t.param(7, &w, true);
        assert_eq!(a, b);
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(7).unwrap().item(), 4.0);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let t = Tape::inference();
        let x = t.leaf(Array::scalar(1.0));
        assert!(!t.requires_grad(x));
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let t = Tape::new();
        let x = t.leaf(Array::zeros(&[2, 4]));
        let spec = AttnSpec {
            batch: 1,
            q_len: 2,
            kv_len: 2,
            heads: 2,
            mask: Some(Rc::new(vec![true, false, false, false])),
        };
        assert!(t.attention(x, x, x, spec).is_err());
    }
}
