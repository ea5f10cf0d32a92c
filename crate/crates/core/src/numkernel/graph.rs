//! Recorded forward passes over the fixed kernel set, with reverse-mode
//! gradients for each recorded op.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, LayerNormCache};
use super::{KernelError, Matrix, ParamId, ParamStore};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    graph: u64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Softmax(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    Inner(Var, Var),
}

#[derive(Debug)]
struct Node<'s> {
    value: Cow<'s, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// A forward pass in progress. Parameter values are borrowed from the store.
#[derive(Debug)]
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    id: u64,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Matrix>,
    inputs: BTreeMap<usize, Matrix>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn input(&self, var: Var) -> Option<&Matrix> {
        self.inputs.get(&var.idx)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `scale * grad` into the store's gradient accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) -> Result<(), KernelError> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g, scale)?;
        }
        Ok(())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), params: BTreeMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Cow<'s, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx: self.nodes.len() - 1, graph: self.id }
    }

    fn node(&self, v: Var) -> &Node<'s> {
        debug_assert_eq!(v.graph, self.id, "variable from a different graph");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.node(v).value
    }

    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Input, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let store = self.store;
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Param(id), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, KernelError> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// Embedding lookup: rows of a parameter table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var, KernelError> {
        let table = self.store.value(id);
        if let Some(&bad) = rows.iter().find(|&&r| r >= table.rows()) {
            return Err(KernelError::IndexOutOfRange { index: bad, bound: table.rows() });
        }
        let value = table.select_rows(rows);
        Ok(self.push(Cow::Owned(value), Op::Gather { param: id, rows: rows.to_vec() }, self.store.is_trainable(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b), ng))
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::Add(a, b), ng))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, KernelError> {
        let r = self.value(row);
        if r.rows() != 1 {
            return Err(KernelError::Shape { op: "add_row", left: self.value(a).shape(), right: r.shape() });
        }
        let mut v = self.value(a).clone();
        v.add_row_in_place(r.row(0))?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Cow::Owned(v), Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), ng)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, KernelError> {
        let (g, b) = (self.value(gain), self.value(bias));
        if g.rows() != 1 || b.rows() != 1 {
            return Err(KernelError::Shape { op: "layer_norm", left: g.shape(), right: b.shape() });
        }
        let (v, cache) = ops::layer_norm_cached(self.value(x), g.row(0), b.row(0), eps)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Cow::Owned(v), Op::LayerNorm { x, gain, bias, cache }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var, causal: Option<usize>) -> Var {
        let v = match causal {
            Some(off) => ops::softmax_rows_causal(self.value(x), off),
            None => ops::softmax_rows(self.value(x)),
        };
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::Softmax(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = ops::gelu(self.value(x));
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::Gelu(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let m = self.value(x);
        if len == 0 || start + len > m.rows() {
            return Err(KernelError::IndexOutOfRange { index: start + len, bound: m.rows() });
        }
        let v = m.slice_rows(start, len);
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(v), Op::SliceRows { x, start }, ng))
    }

    /// Scaled dot-product attention with optional causal offset.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: Option<usize>) -> Result<Var, KernelError> {
        let d = self.value(q).cols() as f64;
        let s = self.matmul_nt(q, k)?;
        let s = self.scale(s, 1.0 / d.sqrt());
        let a = self.softmax_rows(s, causal);
        self.matmul(a, v)
    }

    /// Fused softmax + mean negative log-likelihood; returns a `1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, KernelError> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(Matrix::from_raw(1, 1, vec![loss])),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Frobenius inner product `Σ a ⊙ b` as a `1×1` value.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(KernelError::Shape { op: "inner", left: x.shape(), right: y.shape() });
        }
        let s = ops::dot(x.data(), y.data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(Matrix::from_raw(1, 1, vec![s])), Op::Inner(a, b), ng))
    }

    /// Reverse pass from a scalar (`1×1`) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(KernelError::MissingForwardState);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(KernelError::Shape { op: "backward", left: self.value(loss).shape(), right: (1, 1) });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(id) => add_into(out.params.entry(*id), g),
                Op::Gather { param, rows } => {
                    let table = self.store.value(*param);
                    let acc = out.params.entry(*param).or_insert_with(|| Matrix::zeros(table.rows(), table.cols()));
                    for (r, &row) in rows.iter().enumerate() {
                        for (a, b) in acc.row_mut(row).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, ops::matmul_nt(&g, self.value(*b))?);
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, ops::matmul_tn(self.value(*a), &g)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, ops::matmul(&g, self.value(*b))?);
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, ops::matmul_tn(&g, self.value(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        send(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        send(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut s = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (acc, v) in s.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        send(&mut grads, *row, Matrix::from_raw(1, s.len(), s));
                    }
                    if self.ng(*a) {
                        send(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, g.scale(*s));
                    }
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gain).row(0), &g);
                    if self.ng(*gain) {
                        send(&mut grads, *gain, Matrix::from_raw(1, dg.len(), dg));
                    }
                    if self.ng(*bias) {
                        send(&mut grads, *bias, Matrix::from_raw(1, db.len(), db));
                    }
                    if self.ng(*x) {
                        send(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    // Masked entries have y = 0, so they receive zero gradient.
                    send(&mut grads, *x, ops::softmax_rows_backward(&node.value, &g));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let d = Matrix::from_raw(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(xv.data()).map(|(gv, &xi)| gv * ops::gelu_grad_scalar(xi)).collect(),
                    );
                    send(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).rows();
                        if self.ng(*p) {
                            send(&mut grads, *p, g.slice_rows(start, n));
                        }
                        start += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(&mut grads, *x, d);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    send(&mut grads, *logits, ops::cross_entropy_backward(probs, targets, g.get(0, 0)));
                }
                Op::Inner(a, b) => {
                    let s = g.get(0, 0);
                    if self.ng(*a) {
                        send(&mut grads, *a, self.value(*b).scale(s));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, self.value(*a).scale(s));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_into(slot: std::collections::btree_map::Entry<'_, ParamId, Matrix>, g: Matrix) {
    use std::collections::btree_map::Entry;
    match slot {
        Entry::Vacant(v) => {
            v.insert(g);
        }
        Entry::Occupied(mut o) => {
            for (a, b) in o.get_mut().data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn send(grads: &mut [Option<Matrix>], to: Var, g: Matrix) {
    match &mut grads[to.idx] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
