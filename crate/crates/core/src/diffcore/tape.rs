//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the operands needed
//! for the vector-Jacobian product. `backward` walks the nodes once in reverse
//! order; node indices are already a topological order.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::diffcore::{ParamId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Abs(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    Softplus { x: Var, beta: f64 },
    Cosine { a: Var, b: Var, norms: Vec<(f64, f64)> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
}

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss w.r.t. every node of the tape that produced it.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed to it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub(crate) fn param_grads<'a>(
        &'a self,
        tape: &'a Tape,
    ) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        assert_eq!(tape.id, self.tape, "gradients from a different tape");
        tape.nodes
            .iter()
            .zip(self.grads.iter())
            .filter_map(|(node, g)| match (&node.op, g) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            })
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sum a gradient of the broadcast output shape back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, g) in grad.data().iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn binary_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
    Tensor::new(shape, data)
}

/// `c = a · b` for row-major matrices, with optional transposition of either
/// operand expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices have exactly m*k, k*n and m*n elements and the strides
    // describe those layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    (t.max(0.0) + (-t.abs()).exp().ln_1p()) / beta
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Detached);
        }
        self.nodes.get(v.index).ok_or(Error::Detached)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("var belongs to this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A leaf bound to a trainable parameter.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let node = self.node(x)?;
        let value = node.value.map(f);
        let rg = node.requires_grad;
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let value = binary_map(name, &na.value, &nb.value, f)?;
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.node(b)?.value.data().iter().position(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("zero divisor at flat index {i}"),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.node(x)?.value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive operand {v}"),
            });
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.node(x)?.value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive operand {v}"),
            });
        }
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Rectifier; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        assert!(lo <= hi);
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `(1/β)·ln(1 + exp(β·x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::Domain {
                op: "softplus",
                detail: format!("beta must be positive, got {beta}"),
            });
        }
        self.unary(x, |v| softplus(v, beta), Op::Softplus { x, beta })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, na.value.data(), false, nb.value.data(), false, &mut out);
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let node = self.node(x)?;
        let value = Tensor::scalar(node.value.sum());
        let rg = node.requires_grad;
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let node = self.node(x)?;
        let shape = node.value.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = node.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let rg = node.requires_grad;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self
            .node(x)?
            .value
            .shape()
            .get(axis)
            .copied()
            .unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Concatenate two `[batch, *]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(na.value.row(r));
            out.extend_from_slice(nb.value.row(r));
        }
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(vec![rows, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end` of a `[batch, *]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let node = self.node(x)?;
        let s = node.value.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = s[0];
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&node.value.row(r)[start..end]);
        }
        let rg = node.requires_grad;
        let value = Tensor::new(vec![rows, end - start], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Row-wise cosine similarity of two `[batch, d]` matrices, giving `[batch]`.
    /// The norm product is floored at [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let rows = sa[0];
        let mut out = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (na.value.row(r), nb.value.row(r));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            out.push(dot / (nx * ny).max(COSINE_EPS));
            norms.push((nx, ny));
        }
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::Cosine { a, b, norms }, rg))
    }

    /// Normalize each column of a `[batch, d]` matrix by its batch mean and
    /// biased variance. Affine scale/shift is left to the caller.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let node = self.node(x)?;
        let s = node.value.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: vec![2],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = node.value.data();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += data[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = data[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (data[r * cols + c] - mean[c]) * inv_std[c];
            }
        }
        let rg = node.requires_grad;
        let value = Tensor::new(vec![rows, cols], out)?;
        let v = self.push(value, Op::BatchNorm { x, inv_std }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Reverse pass from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let seed = root.requires_grad.then(|| Tensor::scalar(1.0));
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = seed;
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn vjp(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.index].requires_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = binary_map("mul", g, vb, |x, y| x * y).expect("broadcast");
                let gb = binary_map("mul", g, va, |x, y| x * y).expect("broadcast");
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = binary_map("div", g, vb, |x, y| x / y).expect("broadcast");
                // d(a/b)/db = -out / b
                let t = binary_map("div", &node.value, vb, |o, y| -o / y).expect("broadcast");
                let gb = g.zip_map(&t, |x, y| x * y);
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Neg(x) => acc(*x, g.map(|v| -v)),
            Op::Scale(x, c) => acc(*x, g.map(|v| c * v)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.index].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga);
                    acc(*a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if self.nodes[b.index].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb);
                    acc(*b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::SumAxis { x, axis } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let gd = g.data();
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        out[base..base + inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), out).expect("shape"));
            }
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |d, y| d * y)),
            Op::Log(x) => acc(*x, g.zip_map(val(*x), |d, v| d / v)),
            Op::Square(x) => acc(*x, g.zip_map(val(*x), |d, v| 2.0 * d * v)),
            Op::Sqrt(x) => acc(*x, g.zip_map(&node.value, |d, y| 0.5 * d / y)),
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                g.zip_map(val(*x), |d, v| if v > *lo && v < *hi { d } else { 0.0 }),
            ),
            Op::Abs(x) => acc(*x, g.zip_map(val(*x), |d, v| d * v.signum() * (v != 0.0) as u8 as f64)),
            Op::Softplus { x, beta } => {
                acc(*x, g.zip_map(val(*x), |d, v| d * sigmoid(beta * v)))
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (rows, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::new(vec![rows, ca], ga).expect("shape"));
                acc(*b, Tensor::new(vec![rows, cb], gb).expect("shape"));
            }
            Op::SliceCols { x, start } => {
                let shape = val(*x).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let w = g.cols();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(shape.to_vec(), out).expect("shape"));
            }
            Op::Cosine { a, b, norms } => {
                let (va, vb) = (val(*a), val(*b));
                let d = va.cols();
                let rows = va.rows();
                let mut ga = vec![0.0; rows * d];
                let mut gb = vec![0.0; rows * d];
                for r in 0..rows {
                    let (x, y) = (va.row(r), vb.row(r));
                    let (nx, ny) = norms[r];
                    let c = node.value.data()[r];
                    let gr = g.data()[r];
                    if nx * ny > COSINE_EPS {
                        for j in 0..d {
                            ga[r * d + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                            gb[r * d + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                        }
                    } else {
                        // Floored denominator is a constant.
                        for j in 0..d {
                            ga[r * d + j] = gr * y[j] / COSINE_EPS;
                            gb[r * d + j] = gr * x[j] / COSINE_EPS;
                        }
                    }
                }
                acc(*a, Tensor::new(vec![rows, d], ga).expect("shape"));
                acc(*b, Tensor::new(vec![rows, d], gb).expect("shape"));
            }
            Op::BatchNorm { x, inv_std } => {
                let xhat = &node.value;
                let (rows, cols) = (xhat.rows(), xhat.cols());
                let (gd, xd) = (g.data(), xhat.data());
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        sum_g[c] += gd[i];
                        sum_gx[c] += gd[i] * xd[i];
                    }
                }
                let n = rows as f64;
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        out[i] = inv_std[c] / n * (n * gd[i] - sum_g[c] - xd[i] * sum_gx[c]);
                    }
                }
                acc(*x, Tensor::new(vec![rows, cols], out).expect("shape"));
            }
        }
    }
}
