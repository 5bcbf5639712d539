//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede the
//! nodes that consume them, so a single reverse sweep visits each node once.
//! Nodes whose inputs do not require gradients are still recorded (their
//! values are needed downstream) but are skipped during the sweep.

use std::cell::{Ref, RefCell};

use super::tensor::{axpy, dot, matmul_into, sum_f64, Element, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Silu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Sum(usize),
    Mean(usize),
    SqNormRows(usize),
    ClampAbove { v: usize, bound: usize },
    ConcatCols(Vec<usize>),
    EmbedMean { table: usize, ids: Vec<Vec<usize>> },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Confined to one thread.
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    strict: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
pub struct Gradients<E = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss with respect to `var`, when it lies on a
    /// differentiable path.
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor<E>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// `log(1 + exp(u))` without overflow.
#[inline]
fn softplus<E: Element>(u: E) -> E {
    u.max(E::zero()) + (-u.abs()).exp().ln_1p()
}

fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    an: usize,
    b: &[usize],
    bn: usize,
) -> Result<Vec<usize>, AutodiffError> {
    if a == b {
        Ok(a.to_vec())
    } else if bn == 1 {
        Ok(a.to_vec())
    } else if an == 1 {
        Ok(b.to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn binary_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, shape: Vec<usize>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast output")
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    /// A tape in the process-wide default mode, see [`super::set_strict_default`].
    pub fn new() -> Self {
        Self::with_strict(super::strict_default())
    }

    /// A tape that rejects non-finite inputs and results.
    pub fn strict() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict: true,
        }
    }

    pub fn with_strict(strict: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(
        &self,
        op_name: &'static str,
        value: Tensor<E>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_, E>, AutodiffError> {
        if self.strict && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record an input tensor.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Result<Var<'_, E>, AutodiffError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Result<Var<'_, E>, AutodiffError> {
        self.leaf(value, false)
    }

    /// Concatenate rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, E>]) -> Result<Var<'t, E>, AutodiffError> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or(AutodiffError::Empty { op: "concat_cols" })?.id].value;
            if first.shape().len() != 2 {
                return Err(AutodiffError::Rank {
                    op: "concat_cols",
                    expected: 2,
                    shape: first.shape().to_vec(),
                });
            }
            let rows = first.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: first.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                widths.push(s[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
                }
            }
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::new(vec![rows, total], data)?, rg)
        };
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Row `r` of the result is the mean of `table[ids[r][j]]` over `j`.
    pub fn embed_mean<'t>(&'t self, table: Var<'t, E>, ids: &[Vec<usize>]) -> Result<Var<'t, E>, AutodiffError> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            if t.shape().len() != 2 {
                return Err(AutodiffError::Rank {
                    op: "embed_mean",
                    expected: 2,
                    shape: t.shape().to_vec(),
                });
            }
            let (vocab, dim) = (t.shape()[0], t.shape()[1]);
            let mut data = vec![E::zero(); ids.len() * dim];
            for (r, row_ids) in ids.iter().enumerate() {
                if row_ids.is_empty() {
                    return Err(AutodiffError::Empty { op: "embed_mean" });
                }
                let mut acc = vec![0.0f64; dim];
                for &id in row_ids {
                    if id >= vocab {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: "embed_mean",
                            index: id,
                            len: vocab,
                        });
                    }
                    for (a, v) in acc.iter_mut().zip(&t.data()[id * dim..(id + 1) * dim]) {
                        *a += v.to_f64().unwrap_or(f64::NAN);
                    }
                }
                let inv = 1.0 / row_ids.len() as f64;
                for (o, a) in data[r * dim..(r + 1) * dim].iter_mut().zip(acc) {
                    *o = E::from_f64_lossy(a * inv);
                }
            }
            (Tensor::new(vec![ids.len(), dim], data)?, nodes[table.id].requires_grad)
        };
        self.push(
            "embed_mean",
            value,
            Op::EmbedMean {
                table: table.id,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each call returns fresh gradients; accumulation across calls happens in
    /// [`super::ParameterStore::accumulate_grads`].
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>, AutodiffError> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(AutodiffError::Empty { op: "backward" });
        }
        let root = &nodes[loss.id].value;
        if root.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![E::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let rg = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -E::one()
                    } else {
                        E::one()
                    };
                    if rg(*a) {
                        let ga = reduce_broadcast(&g, nodes[*a].value.numel(), E::one());
                        accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let gb = reduce_broadcast(&g, nodes[*b].value.numel(), sign);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let full = g.len();
                    let at = |xs: &[E], i: usize| if xs.len() == 1 { xs[0] } else { xs[i] };
                    if rg(*a) {
                        let prod: Vec<E> = (0..full).map(|i| g[i] * at(bv, i)).collect();
                        accumulate(&mut grads, *a, reduce_broadcast(&prod, av.len(), E::one()));
                    }
                    if rg(*b) {
                        let prod: Vec<E> = (0..full).map(|i| g[i] * at(av, i)).collect();
                        accumulate(&mut grads, *b, reduce_broadcast(&prod, bv.len(), E::one()));
                    }
                }
                Op::Scale(a, c) => {
                    let c = E::from_f64_lossy(*c);
                    accumulate(&mut grads, *a, g.iter().map(|&v| v * c).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if rg(*a) {
                        accumulate(&mut grads, *a, grad_lhs(&g, bv.data(), m, k, n));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, grad_rhs(av.data(), &g, m, k, n));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                    if rg(*x) {
                        accumulate(&mut grads, *x, grad_lhs(&g, wv.data(), m, k, n));
                    }
                    if rg(*w) {
                        accumulate(&mut grads, *w, grad_rhs(xv.data(), &g, m, k, n));
                    }
                    if rg(*b) {
                        let mut gb = vec![E::zero(); n];
                        for i in 0..m {
                            for (o, &v) in gb.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Silu(a) => {
                    let xv = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (E::one() + x * (E::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    let ga = g.iter().zip(yv).map(|(&gi, &y)| gi * y * (E::one() - y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let xv = nodes[*a].value.data();
                    let ga = g.iter().zip(xv).map(|(&gi, &x)| gi * sigmoid(-x)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    let v = E::from_f64_lossy(g[0].to_f64().unwrap_or(f64::NAN) / n as f64);
                    accumulate(&mut grads, *a, vec![v; n]);
                }
                Op::SqNormRows(a) => {
                    let xv = nodes[*a].value.data();
                    let rows = g.len();
                    let width = xv.len() / rows;
                    let two = E::one() + E::one();
                    let mut ga = vec![E::zero(); xv.len()];
                    for r in 0..rows {
                        let s = two * g[r];
                        for (o, &x) in ga[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&xv[r * width..(r + 1) * width])
                        {
                            *o = s * x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampAbove { v, bound } => {
                    if rg(*v) {
                        let (vv, bv) = (nodes[*v].value.data(), nodes[*bound].value.data());
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| {
                                let b = if bv.len() == 1 { bv[0] } else { bv[i] };
                                if vv[i] < b {
                                    gi
                                } else {
                                    E::zero()
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *v, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[1];
                        if rg(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::EmbedMean { table, ids } => {
                    let dim = nodes[*table].value.shape()[1];
                    let mut gt = vec![E::zero(); nodes[*table].value.numel()];
                    for (r, row_ids) in ids.iter().enumerate() {
                        let inv = E::from_f64_lossy(1.0 / row_ids.len() as f64);
                        for &id in row_ids {
                            axpy(inv, &g[r * dim..(r + 1) * dim], &mut gt[id * dim..(id + 1) * dim]);
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: usize, g: Vec<E>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Collapse an output gradient onto an input that was scalar-broadcast.
fn reduce_broadcast<E: Element>(g: &[E], input_len: usize, sign: E) -> Vec<E> {
    if input_len == g.len() {
        g.iter().map(|&v| sign * v).collect()
    } else {
        vec![sign * E::from_f64_lossy(sum_f64(g))]
    }
}

/// `dA = G * B^T` for `A[m, k] * B[k, n]`.
fn grad_lhs<E: Element>(g: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(gi, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `dB = A^T * G` for `A[m, k] * B[k, n]`.
fn grad_rhs<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], gi, &mut out[p * n..(p + 1) * n]);
        }
    }
    out
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<E>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> E {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn binary(self, other: Self, name: &'static str, op: Op, f: impl Fn(E, E) -> E) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, a.value.shape(), a.value.numel(), b.value.shape(), b.value.numel())?;
            (
                binary_map(&a.value, &b.value, shape, f),
                a.requires_grad || b.requires_grad,
            )
        };
        self.tape.push(name, value, op, rg)
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(E) -> E) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let data = a.value.data().iter().map(|&x| f(x)).collect();
            (Tensor::new(a.value.shape().to_vec(), data)?, a.requires_grad)
        };
        self.tape.push(name, value, op, rg)
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Result<Self, AutodiffError> {
        let ce = E::from_f64_lossy(c);
        self.unary("scale", Op::Scale(self.id, c), move |x| x * ce)
    }

    pub fn neg(self) -> Result<Self, AutodiffError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Self, AutodiffError> {
        let ce = E::from_f64_lossy(c);
        self.unary("add_scalar", Op::AddScalar(self.id), move |x| x + ce)
    }

    pub fn matmul(self, other: Self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![E::zero(); m * n];
            matmul_into(a.value.data(), b.value.data(), &mut out, m, k, n);
            (Tensor::new(vec![m, n], out)?, a.requires_grad || b.requires_grad)
        };
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id), rg)
    }

    /// Dense layer `self * w + b` with `self: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(self, w: Self, b: Self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wn, bn) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            let (sx, sw, sb) = (x.value.shape(), wn.value.shape(), bn.value.shape());
            if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec(),
                });
            }
            if sb != [sw[1]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear(bias)",
                    lhs: sw.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sx[0], sx[1], sw[1]);
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(bn.value.data());
            }
            matmul_into(x.value.data(), wn.value.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                x.requires_grad || wn.requires_grad || bn.requires_grad,
            )
        };
        self.tape.push(
            "linear",
            value,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        )
    }

    /// `x * sigmoid(x)`
    pub fn silu(self) -> Result<Self, AutodiffError> {
        self.unary("silu", Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn sigmoid(self) -> Result<Self, AutodiffError> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    /// `log(sigmoid(z))` evaluated as `-softplus(-z)`.
    pub fn log_sigmoid(self) -> Result<Self, AutodiffError> {
        self.unary("log_sigmoid", Op::LogSigmoid(self.id), |z| -softplus(-z))
    }

    /// Sum of all elements (64-bit accumulation), as a rank-0 tensor.
    pub fn sum(self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (
                Tensor::scalar(E::from_f64_lossy(sum_f64(a.value.data()))),
                a.requires_grad,
            )
        };
        self.tape.push("sum", value, Op::Sum(self.id), rg)
    }

    /// Mean of all elements (64-bit accumulation), as a rank-0 tensor.
    pub fn mean(self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.value.numel() == 0 {
                return Err(AutodiffError::Empty { op: "mean" });
            }
            let m = sum_f64(a.value.data()) / a.value.numel() as f64;
            (Tensor::scalar(E::from_f64_lossy(m)), a.requires_grad)
        };
        self.tape.push("mean", value, Op::Mean(self.id), rg)
    }

    /// Squared L2 norm over every axis but the first: `[b, ...] -> [b]`.
    pub fn sq_norm_rows(self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let shape = a.value.shape();
            if shape.is_empty() || shape[0] == 0 {
                return Err(AutodiffError::Rank {
                    op: "sq_norm_rows",
                    expected: 1,
                    shape: shape.to_vec(),
                });
            }
            let rows = shape[0];
            let width = a.value.numel() / rows;
            let data = a
                .value
                .data()
                .chunks(width.max(1))
                .take(rows)
                .map(|row| {
                    let s: f64 = row
                        .iter()
                        .map(|v| {
                            let v = v.to_f64().unwrap_or(f64::NAN);
                            v * v
                        })
                        .sum();
                    E::from_f64_lossy(s)
                })
                .collect();
            (Tensor::new(vec![rows], data)?, a.requires_grad)
        };
        self.tape.push("sq_norm_rows", value, Op::SqNormRows(self.id), rg)
    }

    /// `min(self, bound)`. The gradient reaches `self` only where
    /// `self < bound` and never reaches `bound`.
    pub fn clamp_above(self, bound: Self) -> Result<Self, AutodiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (v, b) = (&nodes[self.id], &nodes[bound.id]);
            if v.value.shape() != b.value.shape() && b.value.numel() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "clamp_above",
                    lhs: v.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            let bd = b.value.data();
            let data = v
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let lim = if bd.len() == 1 { bd[0] } else { bd[i] };
                    if x < lim {
                        x
                    } else {
                        lim
                    }
                })
                .collect();
            (Tensor::new(v.value.shape().to_vec(), data)?, v.requires_grad)
        };
        self.tape.push(
            "clamp_above",
            value,
            Op::ClampAbove {
                v: self.id,
                bound: bound.id,
            },
            rg,
        )
    }

    /// Same value, detached from the graph.
    pub fn stop_grad(self) -> Result<Self, AutodiffError> {
        let value = self.value().clone();
        self.tape.push("stop_grad", value, Op::Leaf, false)
    }

    /// Elementwise sum of `self` and `other` where `other` is a plain tensor.
    pub fn add_const(self, other: Tensor<E>) -> Result<Self, AutodiffError> {
        let c = self.tape.constant(other)?;
        self.add(c)
    }

    pub fn mul_const(self, other: Tensor<E>) -> Result<Self, AutodiffError> {
        let c = self.tape.constant(other)?;
        self.mul(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::<f64>::new();
        let eye = tape
            .constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let a_data = [1.5, -2.0, 0.25, 4.0, 7.0, -1.0, 3.0, 0.0, 9.0, 2.0, 2.0, -5.0];
        let a = tape.constant(t(&[3, 4], &a_data)).unwrap();
        let out = eye.matmul(a).unwrap();
        assert_eq!(out.value().data(), &a_data);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        let v = z.log_sigmoid().unwrap().item();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        let tape = Tape::<f32>::strict();
        let z = tape.constant(Tensor::from_vec(vec![-200.0f32, 200.0])).unwrap();
        let v = z.log_sigmoid().unwrap();
        let d = v.value().data().to_vec();
        assert!((d[0] + 200.0).abs() < 1e-3);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn clamp_above_routes_gradient_only_below_bound() {
        for (x, expect_val, expect_grad) in [(5.0, 3.0, 0.0), (2.0, 2.0, 1.0)] {
            let tape = Tape::<f64>::new();
            let v = tape.leaf(Tensor::scalar(x), true).unwrap();
            let b = tape.leaf(Tensor::scalar(3.0), true).unwrap();
            let out = v.clamp_above(b).unwrap();
            assert_eq!(out.item(), expect_val);
            let g = tape.backward(out).unwrap();
            assert_eq!(g.get(&v).map(|t| t.item()).unwrap_or(0.0), expect_grad);
            assert!(g.get(&b).is_none());
        }
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true).unwrap();
        let loss = w.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_path_has_zero_gradient() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![0.3, -1.2]), true).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let loss = w.mul(zero).unwrap().sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_grad_blocks_exactly() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![0.5, 1.5]), true).unwrap();
        let detached = w.mul(w).unwrap().stop_grad().unwrap();
        let loss = detached.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&w).is_none());
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(a.add(b).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(vec![2]), true).unwrap();
        assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar { .. })));
    }

    #[test]
    fn strict_mode_rejects_non_finite_inputs() {
        let tape = Tape::<f32>::strict();
        assert!(matches!(
            tape.leaf(Tensor::from_vec(vec![f32::NAN]), true),
            Err(AutodiffError::NonFinite { .. })
        ));
        let lax = Tape::<f32>::new();
        assert!(lax.leaf(Tensor::from_vec(vec![f32::NAN]), true).is_ok());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true).unwrap();
        let s = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let loss = v.mul(s).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&s).unwrap().item(), 6.0);
        assert_eq!(g.get(&v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn forward_is_bit_identical() {
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape
                .constant(Tensor::new(vec![2, 3], vec![0.1, -0.7, 0.3, 1.1, 0.2, -0.4]).unwrap())
                .unwrap();
            let w = tape
                .constant(Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.9, 0.3, -1.0, 0.7]).unwrap())
                .unwrap();
            let b = tape.constant(Tensor::from_vec(vec![0.01, -0.02])).unwrap();
            let h = x.linear(w, b).unwrap().silu().unwrap();
            let v = h.sq_norm_rows().unwrap().mean().unwrap().item();
            v.to_bits()
        };
        assert_eq!(run(), run());
    }
}
