//! Reverse-mode automatic differentiation over a Wengert-style tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse construction order, so topological order holds by
//! construction. Each node also records the multiply-accumulate count of its
//! forward computation under the scope active when it was built; the profiler
//! cross-checks its closed-form counts against these measurements.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows_inplace, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Mean { x: Var, outer: usize, len: usize, inner: usize },
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<S> },
    Attention(Box<AttnSaved<S>>),
}

#[derive(Debug)]
struct AttnSaved<S> {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
    n_q: usize,
    n_k: usize,
    scale: S,
    /// Per-head softmax weights, laid out `[group][head][n_q][n_k]`.
    weights: Vec<S>,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
    visit_order: Vec<usize>,
    scope: &'static str,
    macs: BTreeMap<&'static str, u64>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            visit_order: Vec::new(),
            scope: "other",
            macs: BTreeMap::new(),
        }
    }

    /// Clears every node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.visit_order.clear();
        self.macs.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the cost-accounting scope for subsequent ops; returns the previous one.
    pub fn set_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    /// MACs recorded per scope since the last reset.
    pub fn macs_by_scope(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, macs: u64) -> Var {
        if macs > 0 {
            *self.macs.entry(self.scope).or_insert(0) += macs;
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, 0)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// `a[.. × k] · b[k × n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = self.value(a).as_matrix_dims();
        let n = sb[1];
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![S::zero(); m * n];
        S::gemm_acc(m, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, (m * k * n) as u64))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose: expected a matrix, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg, 0))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip(a, b, "add", |x, y| x + y)?;
        let n = t.numel() as u64;
        Ok(self.push(t, Op::Add(a, b), rg, n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip(a, b, "mul", |x, y| x * y)?;
        let n = t.numel() as u64;
        Ok(self.push(t, Op::Mul(a, b), rg, n))
    }

    /// Adds a `[1 × n]` (or `[n]`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (_, n) = vx.as_matrix_dims();
        if vr.numel() != n {
            return Err(shape_err("add_row", vx.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = vx
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        let macs = t.numel() as u64;
        Ok(self.push(t, Op::AddRow(x, row), rg, macs))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        let n = t.numel() as u64;
        self.push(t, Op::Scale(x, c), rg, n)
    }

    fn map(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        let n = t.numel() as u64;
        self.push(t, op, rg, n)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, S::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, n) = vx.as_matrix_dims();
        if n == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let mut data = vx.data().to_vec();
        softmax_rows_inplace(&mut data, n);
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        let macs = t.numel() as u64;
        Ok(self.push(t, Op::Softmax(x), rg, macs))
    }

    /// Arithmetic mean along `axis`, keeping that axis with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean: axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::Shape(format!("mean over empty axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = vx.data();
        let denom = S::from_f64(len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / denom;
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(&[x]);
        let macs = vx.numel() as u64;
        Ok(self.push(Tensor::new(oshape, out)?, Op::Mean { x, outer, len, inner }, rg, macs))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: S = vx.data().iter().copied().sum();
        let macs = vx.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1], vec![s]).expect("scalar"), Op::Sum(x), rg, macs)
    }

    /// Stacks matrices along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = self.value(*first).as_matrix_dims();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if c != n {
                return Err(shape_err("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg, 0))
    }

    /// Joins matrices side by side; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = self.value(*first).as_matrix_dims();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if r != m {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), rg, 0))
    }

    /// Selects rows (last axis = columns) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.as_matrix_dims();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Shape(format!("gather_rows: row {i} out of range for {m} rows")));
            }
            data.extend_from_slice(&vx.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
            0,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.as_matrix_dims();
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols: {start}+{len} exceeds {n} columns")));
        }
        let data = (0..m)
            .flat_map(|i| vx.data()[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg, 0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg, 0))
    }

    /// `-log softmax(logits)[label]` as a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = self.value(logits);
        let c = vl.numel();
        if label >= c {
            return Err(Error::Data(format!("label {label} out of range for {c} classes")));
        }
        let mut probs = vl.data().to_vec();
        let max = probs.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + probs.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        let loss = lse - vl.data()[label];
        softmax_rows_inplace(&mut probs, c);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy { logits, label, probs },
            rg,
            c as u64,
        ))
    }

    /// Grouped multi-head scaled dot-product attention with no learned maps.
    ///
    /// `q: [G·n_q × D_k]`, `k: [G·n_k × D_k]`, `v: [G·n_k × D_v]`. Group `g`
    /// attends only within its own rows; head `h` uses column block `h` of
    /// width `D_k/heads` (keys) and `D_v/heads` (values). Returns the
    /// attended output `[G·n_q × D_v]` and the head-averaged weights
    /// `[G·n_q × n_k]`, which are not differentiable.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        scale: S,
    ) -> Result<(Var, Tensor<S>)> {
        let (rq, dk) = self.value(q).as_matrix_dims();
        let (rk, dk2) = self.value(k).as_matrix_dims();
        let (rv, dv) = self.value(v).as_matrix_dims();
        if groups == 0 || heads == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(Error::Shape(format!(
                "attention: {rq} query rows / {rk} key rows not divisible into {groups} groups"
            )));
        }
        if dk != dk2 || rk != rv {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} do not align",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if dk % heads != 0 || dv % heads != 0 {
            return Err(Error::Config(format!(
                "attention: feature dims {dk}/{dv} not divisible by {heads} heads"
            )));
        }
        let (n_q, n_k) = (rq / groups, rk / groups);
        let (hk, hv) = (dk / heads, dv / heads);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![S::zero(); groups * heads * n_q * n_k];
        let mut out = vec![S::zero(); rq * dv];
        let mut avg = vec![S::zero(); rq * n_k];
        let inv_heads = S::from_f64(1.0 / heads as f64);
        for g in 0..groups {
            for h in 0..heads {
                let wbase = (g * heads + h) * n_q * n_k;
                for i in 0..n_q {
                    let qrow = &qd[(g * n_q + i) * dk + h * hk..][..hk];
                    let w = &mut weights[wbase + i * n_k..wbase + (i + 1) * n_k];
                    for (j, wj) in w.iter_mut().enumerate() {
                        let krow = &kd[(g * n_k + j) * dk + h * hk..][..hk];
                        let dot: S = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        *wj = dot * scale;
                    }
                    softmax_rows_inplace(w, n_k);
                    let orow = &mut out[(g * n_q + i) * dv + h * hv..][..hv];
                    for (j, &wj) in w.iter().enumerate() {
                        let vrow = &vd[(g * n_k + j) * dv + h * hv..][..hv];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + wj * x;
                        }
                    }
                    let arow = &mut avg[(g * n_q + i) * n_k..][..n_k];
                    for (a, &wj) in arow.iter_mut().zip(w.iter()) {
                        *a = *a + wj * inv_heads;
                    }
                }
            }
        }
        let macs = (groups * n_q * n_k * (dk + dv + heads)) as u64;
        let rg = self.rg(&[q, k, v]);
        let saved = AttnSaved { q, k, v, groups, heads, n_q, n_k, scale, weights };
        let var = self.push(Tensor::new(vec![rq, dv], out)?, Op::Attention(Box::new(saved)), rg, macs);
        Ok((var, Tensor::new(vec![rq, n_k], avg)?))
    }

    /// Back-propagates from the scalar `output`. Errors if called twice without [`Tape::reset`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if self.value(output).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(vec![S::one()]);
        self.visit_order.clear();
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.visit_order.push(idx);
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = va.as_matrix_dims();
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                if let Some(ga) = slot(grads, nodes, *a) {
                    // dA[m×k] += dC[m×n] · Bᵀ
                    S::gemm_acc(m, n, k, g, n as isize, 1, bd, 1, n as isize, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    // dB[k×n] += Aᵀ · dC
                    S::gemm_acc(k, m, n, ad, 1, k as isize, g, n as isize, 1, gb);
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, nodes, *a, g);
                add_into(grads, nodes, *b, g);
            }
            Op::AddRow(x, r) => {
                add_into(grads, nodes, *x, g);
                let n = nodes[r.0].value.numel();
                if let Some(gr) = slot(grads, nodes, *r) {
                    for chunk in g.chunks(n) {
                        for (d, &s) in gr.iter_mut().zip(chunk) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d = *d + gg * y;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d = *d + gg * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d = *d + s * *c;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((d, &gg), &t) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + gg * (S::one() - t * t);
                    }
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((d, &gg), &t) in gx.iter_mut().zip(g).zip(y) {
                        if t > S::zero() {
                            *d = *d + gg;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, n) = node.value.as_matrix_dims();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((dr, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yy * (gg - dot);
                        }
                    }
                }
            }
            Op::Mean { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let denom = S::from_f64(len as f64);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] = gx[base + i] + g[o * inner + i] / denom;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    add_into(grads, nodes, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.as_matrix_dims().1;
                    if let Some(gp) = slot(grads, nodes, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.as_matrix_dims().1;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = node.value.as_matrix_dims();
                let n = nodes[x.0].value.as_matrix_dims().1;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] = gx[i * n + start + j] + g[i * len + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(grads, nodes, *x, g),
            Op::CrossEntropy { logits, label, probs } => {
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for (d, &p) in gl.iter_mut().zip(probs) {
                        *d = *d + p * g[0];
                    }
                    gl[*label] = gl[*label] - g[0];
                }
            }
            Op::Attention(saved) => {
                let (gq, gk, gv) = attention_backward(nodes, saved, g);
                add_into(grads, nodes, saved.q, &gq);
                add_into(grads, nodes, saved.k, &gk);
                add_into(grads, nodes, saved.v, &gv);
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var, src: &[S]) {
    if let Some(d) = slot(grads, nodes, v) {
        for (d, &s) in d.iter_mut().zip(src) {
            *d = *d + s;
        }
    }
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    s: &AttnSaved<S>,
    g: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (qv, kv, vv) = (&nodes[s.q.0].value, &nodes[s.k.0].value, &nodes[s.v.0].value);
    let dk = qv.as_matrix_dims().1;
    let dv = vv.as_matrix_dims().1;
    let (hk, hv) = (dk / s.heads, dv / s.heads);
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut gq = vec![S::zero(); qd.len()];
    let mut gk = vec![S::zero(); kd.len()];
    let mut gv = vec![S::zero(); vd.len()];
    let mut dw = vec![S::zero(); s.n_k];
    for grp in 0..s.groups {
        for h in 0..s.heads {
            let wbase = (grp * s.heads + h) * s.n_q * s.n_k;
            for i in 0..s.n_q {
                let w = &s.weights[wbase + i * s.n_k..wbase + (i + 1) * s.n_k];
                let go = &g[(grp * s.n_q + i) * dv + h * hv..][..hv];
                for j in 0..s.n_k {
                    let voff = (grp * s.n_k + j) * dv + h * hv;
                    let vrow = &vd[voff..voff + hv];
                    dw[j] = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                    for (d, &o) in gv[voff..voff + hv].iter_mut().zip(go) {
                        *d = *d + w[j] * o;
                    }
                }
                let dot: S = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                let qoff = (grp * s.n_q + i) * dk + h * hk;
                for j in 0..s.n_k {
                    let ds = w[j] * (dw[j] - dot) * s.scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let koff = (grp * s.n_k + j) * dk + h * hk;
                    for c in 0..hk {
                        gq[qoff + c] = gq[qoff + c] + ds * kd[koff + c];
                        gk[koff + c] = gk[koff + c] + ds * qd[qoff + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
