//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; nodes are
//! therefore topologically ordered by construction. [`Graph::backward`]
//! walks the list once in reverse and accumulates adjoints into the nodes
//! that require gradients.

use crate::tensor::Tensor;
use crate::{AutodiffError, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Affine { x: Var, scale: Real },
    MatMul(Var, Var),
    Outer(Var, Var),
    ScaleRows(Var, Var),
    Concat(Vec<Var>),
    AsRow(Var),
    AppendRow(Var, Var),
    SetRow(Var, usize, Var),
    Row(Var, usize),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Dot(Var, Var),
    L2Norm(Var),
    SqDist(Var, Var),
    SqDistRows {
        rows: Var,
        query: Var,
        weight: Option<Var>,
    },
    CosineRows {
        rows: Var,
        query: Var,
    },
    Min(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: an append-only list of primitive operations over tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_values(x: &[Real]) -> Vec<Real> {
    let max = x.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = x.iter().map(|v| (v - max).exp()).collect();
    let total: Real = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_softmax_values(x: &[Real]) -> Vec<Real> {
    let max = x.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn argmin(x: &[Real]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v < x[best] {
            best = i;
        }
    }
    best
}

fn norm(x: &[Real]) -> Real {
    x.iter().map(|v| v * v).sum::<Real>().sqrt()
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [Real])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Convenience accessor for one-element nodes.
    pub fn scalar_value(&self, var: Var) -> Real {
        self.nodes[var.0].value.item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: Real) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize, AutodiffError> {
        match self.shape(v) {
            [n] => Ok(*n),
            _ => Err(self.mismatch(op, &[v])),
        }
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            _ => Err(self.mismatch(op, &[v])),
        }
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<(), AutodiffError> {
        if self.nodes[v.0].value.is_scalar() {
            Ok(())
        } else {
            Err(self.mismatch(op, &[v]))
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, &[a, b]));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(Real) -> Real) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `t + s` for a one-element `s`.
    pub fn add_scalar(&mut self, t: Var, s: Var) -> Result<Var, AutodiffError> {
        self.expect_scalar("add_scalar", s)?;
        let sv = self.data(s)[0];
        let data = self.data(t).iter().map(|v| v + sv).collect();
        let value = Tensor::from_parts(self.shape(t).to_vec(), data);
        let rg = self.rg(&[t, s]);
        Ok(self.push(value, Op::AddScalar(t, s), rg))
    }

    /// `t * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var, AutodiffError> {
        self.expect_scalar("mul_scalar", s)?;
        let sv = self.data(s)[0];
        let data = self.data(t).iter().map(|v| v * sv).collect();
        let value = Tensor::from_parts(self.shape(t).to_vec(), data);
        let rg = self.rg(&[t, s]);
        Ok(self.push(value, Op::MulScalar(t, s), rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        self.unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.expect_matrix("matmul", a)?;
        let (k2, n, out_shape) = match self.shape(b) {
            [k2] => (*k2, 1, vec![m]),
            [k2, n] => (*k2, *n, vec![m, *n]),
            _ => return Err(self.mismatch("matmul", &[a, b])),
        };
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(arow, bd);
            }
        }
        for i in (0..m).filter(|_| n > 1) {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, av) in arow.iter().enumerate() {
                if *av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), rg))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let m = self.expect_vector("outer", a)?;
        let n = self.expect_vector("outer", b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(m * n);
        for x in ad {
            out.extend(bd.iter().map(|y| x * y));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Outer(a, b), rg))
    }

    /// Multiply row `i` of a matrix by `v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("scale_rows", m)?;
        if self.shape(v) != [r] {
            return Err(self.mismatch("scale_rows", &[m, v]));
        }
        let (md, vd) = (self.data(m), self.data(v));
        let out = md
            .chunks(c)
            .zip(vd)
            .flat_map(|(row, s)| row.iter().map(move |x| x * s))
            .collect();
        let rg = self.rg(&[m, v]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ScaleRows(m, v), rg))
    }

    /// Concatenate vectors (or one-element tensors) end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                shapes: vec![],
            });
        }
        let mut out = Vec::new();
        for p in parts {
            self.expect_vector("concat", *p)?;
            out.extend_from_slice(self.data(*p));
        }
        let rg = self.rg(parts);
        let n = out.len();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Concat(parts.to_vec()), rg))
    }

    /// View a vector as a one-row matrix.
    pub fn as_row(&mut self, v: Var) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("as_row", v)?;
        let value = Tensor::from_parts(vec![1, n], self.data(v).to_vec());
        let rg = self.rg(&[v]);
        Ok(self.push(value, Op::AsRow(v), rg))
    }

    /// Append `v` as a new last row of `m`.
    pub fn append_row(&mut self, m: Var, v: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("append_row", m)?;
        if self.shape(v) != [c] {
            return Err(self.mismatch("append_row", &[m, v]));
        }
        let mut out = self.data(m).to_vec();
        out.extend_from_slice(self.data(v));
        let rg = self.rg(&[m, v]);
        Ok(self.push(
            Tensor::from_parts(vec![r + 1, c], out),
            Op::AppendRow(m, v),
            rg,
        ))
    }

    /// Copy of `m` with row `row` replaced by `v`.
    pub fn set_row(&mut self, m: Var, row: usize, v: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("set_row", m)?;
        if self.shape(v) != [c] || row >= r {
            return Err(self.mismatch("set_row", &[m, v]));
        }
        let mut out = self.data(m).to_vec();
        out[row * c..(row + 1) * c].copy_from_slice(self.data(v));
        let rg = self.rg(&[m, v]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SetRow(m, row, v),
            rg,
        ))
    }

    pub fn row(&mut self, m: Var, row: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("row", m)?;
        if row >= r {
            return Err(self.mismatch("row", &[m]));
        }
        let value = Tensor::from_parts(vec![c], self.data(m)[row * c..(row + 1) * c].to_vec());
        let rg = self.rg(&[m]);
        Ok(self.push(value, Op::Row(m, row), rg))
    }

    /// Contiguous sub-vector `v[start..start + len]`.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("slice", v)?;
        if len == 0 || start + len > n {
            return Err(self.mismatch("slice", &[v]));
        }
        let value = Tensor::from_parts(vec![len], self.data(v)[start..start + len].to_vec());
        let rg = self.rg(&[v]);
        Ok(self.push(value, Op::Slice(v, start), rg))
    }

    pub fn gather(&mut self, v: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("gather", v)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(self.mismatch("gather", &[v]));
        }
        let d = self.data(v);
        let value = Tensor::from_parts(vec![indices.len()], indices.iter().map(|&i| d[i]).collect());
        let rg = self.rg(&[v]);
        Ok(self.push(value, Op::Gather(v, indices.to_vec()), rg))
    }

    /// Element `i` of a vector as a one-element tensor.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var, AutodiffError> {
        self.gather(v, &[i])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), Real::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), Real::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), Real::ln)
    }

    /// Softmax over the entries of a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("softmax", x)?;
        let value = Tensor::from_parts(vec![n], softmax_values(self.data(x)));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("log_softmax", x)?;
        let value = Tensor::from_parts(vec![n], log_softmax_values(self.data(x)));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("dot", &[a, b]));
        }
        let s = dot(self.data(a), self.data(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = norm(self.data(x));
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::L2Norm(x), rg)
    }

    /// `sum((a - b)^2)`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sq_dist", &[a, b]));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SqDist(a, b), rg))
    }

    /// Squared-difference reduction of every row of `rows` against `query`,
    /// optionally weighted per dimension: `out[k] = sum_d w_d (rows[k,d] - query[d])^2`.
    pub fn sq_dist_rows(
        &mut self,
        rows: Var,
        query: Var,
        weight: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("sq_dist_rows", rows)?;
        if self.shape(query) != [c] || weight.is_some_and(|w| self.shape(w) != [c]) {
            let mut vars = vec![rows, query];
            vars.extend(weight);
            return Err(self.mismatch("sq_dist_rows", &vars));
        }
        let q = self.data(query);
        let w = weight.map(|w| self.data(w));
        let out = self
            .data(rows)
            .chunks(c)
            .map(|row| match w {
                Some(w) => row
                    .iter()
                    .zip(q)
                    .zip(w)
                    .map(|((p, h), m)| m * (p - h) * (p - h))
                    .sum(),
                None => row.iter().zip(q).map(|(p, h)| (p - h) * (p - h)).sum(),
            })
            .collect();
        let mut inputs = vec![rows, query];
        inputs.extend(weight);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![r], out),
            Op::SqDistRows {
                rows,
                query,
                weight,
            },
            rg,
        ))
    }

    /// Cosine similarity of every row of `rows` with `query`. A zero-norm
    /// row or query yields -1 (maximally dissimilar) with zero gradient.
    pub fn cosine_rows(&mut self, rows: Var, query: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.expect_matrix("cosine_rows", rows)?;
        if self.shape(query) != [c] {
            return Err(self.mismatch("cosine_rows", &[rows, query]));
        }
        let q = self.data(query);
        let qn = norm(q);
        let out = self
            .data(rows)
            .chunks(c)
            .map(|row| {
                let pn = norm(row);
                if pn == 0.0 || qn == 0.0 {
                    -1.0
                } else {
                    dot(row, q) / (pn * qn)
                }
            })
            .collect();
        let rg = self.rg(&[rows, query]);
        Ok(self.push(
            Tensor::from_parts(vec![r], out),
            Op::CosineRows { rows, query },
            rg,
        ))
    }

    /// Minimum entry of a vector. The gradient is routed to the first
    /// minimising index.
    pub fn min(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.expect_vector("min", x)?;
        let i = argmin(self.data(x));
        let v = self.data(x)[i];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Min(x, i), rg))
    }

    /// Index of the minimum entry (first on ties).
    pub fn argmin(&self, x: Var) -> usize {
        argmin(self.data(x))
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = g.data();
        let y = node.value.data();
        // Adds `f` into the adjoint of `v` if it needs one.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let shape = self.shape(v).to_vec();
                    accumulate(&mut grads[v.0], &shape, |$buf| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                });
                acc!(*b, |d| for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += g[i] / bv[i];
                });
                acc!(*b, |d| for i in 0..d.len() {
                    d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                });
            }
            Op::AddScalar(t, s) => {
                acc!(*t, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*s, |d| d[0] += g.iter().sum::<Real>());
            }
            Op::MulScalar(t, s) => {
                let (tv, sv) = (self.data(*t), self.data(*s)[0]);
                acc!(*t, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv));
                acc!(*s, |d| d[0] += dot(g, tv));
            }
            Op::Affine { x, scale } => {
                acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.nodes[b.0].value.len() / k;
                let (av, bv) = (self.data(*a), self.data(*b));
                if n == 1 {
                    acc!(*a, |d| for (drow, gi) in d.chunks_exact_mut(k).zip(g) {
                        for (dp, bp) in drow.iter_mut().zip(bv) {
                            *dp += gi * bp;
                        }
                    });
                    acc!(*b, |d| for (arow, gi) in av.chunks_exact(k).zip(g) {
                        for (dp, ap) in d.iter_mut().zip(arow) {
                            *dp += gi * ap;
                        }
                    });
                    return;
                }
                // dA = G B^T
                acc!(*a, |d| for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        d[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                    }
                });
                // dB = A^T G
                acc!(*b, |d| for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (dj, gj) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dj += a_ip * gj;
                        }
                    }
                });
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let n = bv.len();
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += dot(&g[i * n..(i + 1) * n], bv);
                });
                acc!(*b, |d| for (i, ai) in av.iter().enumerate() {
                    for j in 0..n {
                        d[j] += g[i * n + j] * ai;
                    }
                });
            }
            Op::ScaleRows(m, v) => {
                let (mv, vv) = (self.data(*m), self.data(*v));
                let c = self.shape(*m)[1];
                acc!(*m, |d| for (i, s) in vv.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[i * c + j] * s;
                    }
                });
                acc!(*v, |d| for i in 0..d.len() {
                    d[i] += dot(&g[i * c..(i + 1) * c], &mv[i * c..(i + 1) * c]);
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let seg = &g[offset..offset + n];
                    acc!(*p, |d| d.iter_mut().zip(seg).for_each(|(d, g)| *d += g));
                    offset += n;
                }
            }
            Op::AsRow(v) => {
                acc!(*v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::AppendRow(m, v) => {
                let split = self.nodes[m.0].value.len();
                acc!(*m, |d| d.iter_mut().zip(&g[..split]).for_each(|(d, g)| *d += g));
                acc!(*v, |d| d.iter_mut().zip(&g[split..]).for_each(|(d, g)| *d += g));
            }
            Op::SetRow(m, row, v) => {
                let c = self.shape(*m)[1];
                let (lo, hi) = (row * c, (row + 1) * c);
                acc!(*m, |d| for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                    if i < lo || i >= hi {
                        *d += g;
                    }
                });
                acc!(*v, |d| d.iter_mut().zip(&g[lo..hi]).for_each(|(d, g)| *d += g));
            }
            Op::Row(m, row) => {
                let c = self.shape(*m)[1];
                acc!(*m, |d| d[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g));
            }
            Op::Slice(v, start) => {
                let start = *start;
                acc!(*v, |d| d[start..start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g));
            }
            Op::Gather(v, idx) => {
                acc!(*v, |d| for (i, gi) in idx.iter().zip(g) {
                    d[*i] += gi;
                });
            }
            Op::Sigmoid(x) => {
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                });
            }
            Op::Tanh(x) => {
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                });
            }
            Op::Softplus(x) => {
                let xv = self.data(*x);
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(xv[i]);
                });
            }
            Op::Exp(x) => {
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                });
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] / xv[i];
                });
            }
            Op::Softmax(x) => {
                let s = dot(g, y);
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += y[i] * (g[i] - s);
                });
            }
            Op::LogSoftmax(x) => {
                let total: Real = g.iter().sum();
                acc!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] - y[i].exp() * total;
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc!(*x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Dot(a, b) => {
                let (av, bv, g0) = (self.data(*a), self.data(*b), g[0]);
                acc!(*a, |d| d.iter_mut().zip(bv).for_each(|(d, b)| *d += g0 * b));
                acc!(*b, |d| d.iter_mut().zip(av).for_each(|(d, a)| *d += g0 * a));
            }
            Op::L2Norm(x) => {
                let n = y[0];
                if n > 0.0 {
                    let (xv, g0) = (self.data(*x), g[0]);
                    acc!(*x, |d| d.iter_mut().zip(xv).for_each(|(d, x)| *d += g0 * x / n));
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv, g0) = (self.data(*a), self.data(*b), g[0]);
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += 2.0 * g0 * (av[i] - bv[i]);
                });
                acc!(*b, |d| for i in 0..d.len() {
                    d[i] -= 2.0 * g0 * (av[i] - bv[i]);
                });
            }
            Op::SqDistRows {
                rows,
                query,
                weight,
            } => {
                let (pv, qv) = (self.data(*rows), self.data(*query));
                let c = qv.len();
                let wv = weight.map(|w| self.data(w));
                let w_at = |j: usize| wv.map_or(1.0, |w| w[j]);
                acc!(*rows, |d| for (k, gk) in g.iter().enumerate() {
                    for j in 0..c {
                        d[k * c + j] += 2.0 * gk * w_at(j) * (pv[k * c + j] - qv[j]);
                    }
                });
                acc!(*query, |d| for (k, gk) in g.iter().enumerate() {
                    for j in 0..c {
                        d[j] -= 2.0 * gk * w_at(j) * (pv[k * c + j] - qv[j]);
                    }
                });
                if let Some(w) = weight {
                    acc!(*w, |d| for (k, gk) in g.iter().enumerate() {
                        for j in 0..c {
                            let diff = pv[k * c + j] - qv[j];
                            d[j] += gk * diff * diff;
                        }
                    });
                }
            }
            Op::CosineRows { rows, query } => {
                let (pv, qv) = (self.data(*rows), self.data(*query));
                let c = qv.len();
                let qn = norm(qv);
                let row_norms: Vec<Real> = pv.chunks(c).map(norm).collect();
                let live = |k: usize| qn > 0.0 && row_norms[k] > 0.0;
                acc!(*rows, |d| for (k, gk) in g.iter().enumerate() {
                    if !live(k) {
                        continue;
                    }
                    let pn = row_norms[k];
                    let p = &pv[k * c..(k + 1) * c];
                    for j in 0..c {
                        d[k * c + j] += gk * (qv[j] / (pn * qn) - y[k] * p[j] / (pn * pn));
                    }
                });
                acc!(*query, |d| for (k, gk) in g.iter().enumerate() {
                    if !live(k) {
                        continue;
                    }
                    let pn = row_norms[k];
                    let p = &pv[k * c..(k + 1) * c];
                    for j in 0..c {
                        d[j] += gk * (p[j] / (pn * qn) - y[k] * qv[j] / (qn * qn));
                    }
                });
            }
            Op::Min(x, i) => {
                let (i, g0) = (*i, g[0]);
                acc!(*x, |d| d[i] += g0);
            }
        }
    }
}
