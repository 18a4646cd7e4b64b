//! Wengert-list tape. Nodes are appended in evaluation order, so walking the
//! list backwards is a valid topological order and visits each node once.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Constant,
    Detach,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, selected: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A recording of tensor operations for reverse-mode differentiation.
///
/// A graph is confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    first_nonfinite: Option<usize>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape if nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Index of the first node whose value came out non-finite. Only tracked
    /// in debug builds.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(self.nodes.len());
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detach, false)
    }

    /// `a[..., m, k] @ b[k, n]` or batched `a[..., m, k] @ b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2: {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if k != k2 || !(lead_b.is_empty() || lead_a == lead_b) {
            return Err(Error::Shape(format!("matmul {sa:?} @ {sb:?}")));
        }
        let batch: usize = lead_a.iter().product();
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let boff = if lead_b.is_empty() { 0 } else { bi * k * n };
                kernels::gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, name: &str) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(Error::Shape(format!(
                "{name}: {:?} does not broadcast into {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let nb = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x + y, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x - y, "sub")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x * y, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vec![S::zero(); vx.numel()];
        for (i, o) in out.chunks_mut(c.max(1)).enumerate() {
            kernels::softmax_row(vx.row(i), o);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.last_dim();
        if vg.shape() != [d] {
            return Err(Error::Shape(format!(
                "rms_norm gain {:?} vs last dim {d}",
                vg.shape()
            )));
        }
        let eps = S::lit(eps);
        let inv_d = S::one() / S::lit(d as f64);
        let rows = vx.rows();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![S::zero(); vx.numel()];
        for i in 0..rows {
            let row = vx.row(i);
            let ms = row.iter().fold(S::zero(), |acc, &v| acc + v * v) * inv_d;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..d {
                out[i * d + j] = row[j] * r * vg.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gather rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::Shape("embedding table must be rank 2".into()));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} >= vocab size {v}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the selected rows of `-log softmax(logits[row])[targets[row]]`.
    ///
    /// `targets` has one entry per row; `selected` lists the rows that count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], selected: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs {} targets",
                vl.shape(),
                targets.len()
            )));
        }
        if selected.is_empty() {
            return Err(Error::Empty("cross_entropy with no selected rows".into()));
        }
        let v = vl.shape()[1];
        let mut total = S::zero();
        for &r in selected {
            let t = *targets
                .get(r)
                .ok_or_else(|| Error::Input(format!("selected row {r} out of range")))?;
            if t >= v {
                return Err(Error::Input(format!("target {t} >= vocab size {v}")));
            }
            let row = vl.row(r);
            total += kernels::logsumexp(row) - row[t];
        }
        let value = Tensor::scalar(total / S::lit(selected.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                selected: selected.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.sum() / S::lit(vx.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!("concat leading axes differ: {s:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis (the adjoint of concat).
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if start + len > c {
            return Err(Error::Shape(format!("narrow {start}+{len} > {c}")));
        }
        let rows = vx.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::full(self.value(output).shape(), S::one()));
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Sum of `g` over the leading blocks that `target` was broadcast across.
    fn reduce_to(&self, g: &Tensor<S>, target: Var) -> Tensor<S> {
        let shape = self.value(target).shape();
        if g.shape() == shape {
            return g.clone();
        }
        let nb = shape.iter().product::<usize>().max(1);
        let mut out = vec![S::zero(); nb];
        for chunk in g.data().chunks(nb) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Tensor::new(shape.to_vec(), out).expect("target shape")
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = va.numel() / (m * k).max(1);
                let b_shared = sb.len() == 2;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![S::zero(); va.numel()];
                    for bi in 0..batch {
                        let boff = if b_shared { 0 } else { bi * k * n };
                        kernels::gemm_nt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[boff..boff + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); vb.numel()];
                    for bi in 0..batch {
                        let boff = if b_shared { 0 } else { bi * k * n };
                        kernels::gemm_tn(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db).expect("shape"));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let db = self.reduce_to(g, *b);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let db = self.reduce_to(&g.map(|x| -x), *b);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.numel().max(1);
                if self.nodes[a.0].requires_grad {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * vb.data()[i % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let prod: Vec<S> = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    let prod = Tensor::new(va.shape().to_vec(), prod).expect("shape");
                    let db = self.reduce_to(&prod, *b);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => {
                let dx = g.data().iter().zip(node.value.data()).map(|(&a, &y)| a * y).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                let dx = g.data().iter().zip(vx.data()).map(|(&a, &v)| a / v).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&a, &v)| a * kernels::silu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut dx = vec![S::zero(); y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let d = vx.last_dim();
                let inv_d = S::one() / S::lit(d as f64);
                let mut dx = vec![S::zero(); vx.numel()];
                let mut dgain = vec![S::zero(); d];
                for (r, &rr) in inv_rms.iter().enumerate() {
                    let (xr, gr) = (vx.row(r), g.row(r));
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot += gr[j] * vg.data()[j] * xr[j];
                        dgain[j] += gr[j] * xr[j] * rr;
                    }
                    let coef = rr * rr * rr * inv_d * dot;
                    for j in 0..d {
                        dx[r * d + j] = rr * vg.data()[j] * gr[j] - coef * xr[j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx).expect("shape"));
                }
                if self.nodes[gain.0].requires_grad {
                    self.accumulate(grads, *gain, Tensor::new(vec![d], dgain).expect("shape"));
                }
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut dt = vec![S::zero(); vt.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for (o, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(t)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(vt.shape().to_vec(), dt).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                targets,
                selected,
            } => {
                let vl = self.value(*logits);
                let v = vl.shape()[1];
                let scale = g.item() / S::lit(selected.len() as f64);
                let mut dl = vec![S::zero(); vl.numel()];
                let mut probs = vec![S::zero(); v];
                for &r in selected {
                    kernels::softmax_row(vl.row(r), &mut probs);
                    let out = &mut dl[r * v..(r + 1) * v];
                    for (o, &p) in out.iter_mut().zip(&probs) {
                        *o += p * scale;
                    }
                    out[targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vl.shape().to_vec(), dl).expect("shape"));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let c = g.item() / S::lit(vx.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(vx.shape(), c));
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let w = vp.last_dim();
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(vp.numel());
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(vp.shape().to_vec(), dp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Narrow { x, start } => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let len = g.last_dim();
                let mut dx = vec![S::zero(); vx.numel()];
                for r in 0..g.rows() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx).expect("shape"));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).expect("same numel"));
            }
        }
    }
}
