//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its output value and
//! the rule needed to push gradients back to its inputs. [`Tape::backward`]
//! walks the nodes in exact reverse recording order; gradients of values used
//! more than once are summed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Neg(Var),
    Swish { src: Var, sig: Vec<f64> },
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Gather { src: Var, idx: Arc<[usize]> },
    ScatterAdd { src: Var, idx: Arc<[usize]> },
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    LogAddExp(Var, Var),
    Map { src: Var, deriv: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shapes checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Matrix product `a·b` of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Dense layer `x·wᵀ + b` with `x: n×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fan_in) = self.matrix_dims(x, "linear")?;
        let (fan_out, w_in) = self.matrix_dims(w, "linear")?;
        if w_in != fan_in {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape("linear bias", self.shape(b), &[fan_out]));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            fan_in,
            fan_out,
            self.value(x).data(),
            fan_in,
            1,
            self.value(w).data(),
            1,
            fan_in,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::matrix(n, fan_out, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.binary(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// Elementwise `log(e^a + e^b)`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "log_add_exp")?;
        Ok(self.binary(a, b, Op::LogAddExp(a, b), log_add_exp))
    }

    fn check_scalar(&self, s: Var, op: &'static str) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::shape(op, t.shape(), &[]));
        }
        Ok(t.item())
    }

    /// Adds a one-element tensor to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "add_scalar")?;
        let value = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::AddScalar(a, s), rg))
    }

    /// Multiplies every entry of `a` by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "mul_scalar")?;
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    /// `x·sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let sig: Vec<f64> = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&sig).map(|(x, s)| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Swish { src: a, sig }, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Elementwise map with a caller-supplied derivative.
    ///
    /// The derivative is evaluated during the forward pass and used verbatim
    /// by backward, so a wrong `df` yields wrong gradients.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let deriv = self.value(a).data().iter().map(|&x| df(x)).collect();
        self.unary(a, Op::Map { src: a, deriv }, f)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `out[i] = src[idx[i]]` over rows.
    pub fn gather_rows(&mut self, src: Var, idx: Arc<[usize]>) -> Result<Var> {
        let t = self.value(src);
        let rows = t.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let value = t.permute_rows(&idx);
        let rg = self.rg(src);
        Ok(self.push(value, Op::Gather { src, idx }, rg))
    }

    /// `out[idx[k]] += src[k]` over rows, producing `n_out` rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let t = self.value(src);
        if idx.len() != t.rows() {
            return Err(Error::shape("scatter_add_rows", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", &[n_out], &[bad]));
        }
        let c = t.cols();
        let mut out = vec![0.0; n_out * c];
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(t.row(k)) {
                *d += s;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::matrix(n_out, c, out)?, Op::ScatterAdd { src, idx }, rg))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        };
        let rows = self.matrix_dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(src, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(src), &[start, len]));
        }
        let t = self.value(src);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::Slice { src, start }, rg))
    }

    /// Gradient of the scalar at `loss` with respect to every trainable leaf.
    ///
    /// Trainable leaves not on any path to `loss` get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        out.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.trainable {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("grad shape");
                out[i] = Some(t);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, n, 1, val(*b), 1, n, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, val(*a), 1, k, g, n, 1, 1.0, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fan_out = self.shape(*w)[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(n, fan_out, fan_in, g, fan_out, 1, val(*w), fan_in, 1, 1.0, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(fan_out, n, fan_in, g, 1, fan_out, val(*x), fan_in, 1, 1.0, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(fan_out.max(1)) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |k, gi| gi * vb[k]);
                self.acc_map(grads, *b, g, |k, gi| gi * va[k]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |k, gi| gi / vb[k]);
                self.acc_map(grads, *b, g, |k, gi| -gi * va[k] / (vb[k] * vb[k]));
            }
            Op::LogAddExp(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |k, gi| gi * (va[k] - out[k]).exp());
                self.acc_map(grads, *b, g, |k, gi| gi * (vb[k] - out[k]).exp());
            }
            Op::AddScalar(a, s) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += g.iter().sum::<f64>();
                }
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                self.acc_map(grads, *a, g, |_, gi| gi * sv);
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += g.iter().zip(val(*a)).map(|(gi, x)| gi * x).sum::<f64>();
                }
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |_, gi| gi * c),
            Op::AddConst(a) => self.acc_map(grads, *a, g, |_, gi| gi),
            Op::Neg(a) => self.acc_map(grads, *a, g, |_, gi| -gi),
            Op::Swish { src, sig } => {
                let va = val(*src);
                self.acc_map(grads, *src, g, |k, gi| {
                    let s = sig[k];
                    gi * (s + va[k] * s * (1.0 - s))
                });
            }
            Op::Softplus(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, g, |k, gi| gi * sigmoid(va[k]));
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |k, gi| gi * out[k] * (1.0 - out[k])),
            Op::Exp(a) => self.acc_map(grads, *a, g, |k, gi| gi * out[k]),
            Op::Log(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, g, |k, gi| gi / va[k]);
            }
            Op::Square(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, g, |k, gi| 2.0 * gi * va[k]);
            }
            Op::Sqrt(a) => self.acc_map(grads, *a, g, |k, gi| gi / (2.0 * out[k])),
            Op::Map { src, deriv } => self.acc_map(grads, *src, g, |k, gi| gi * deriv[k]),
            Op::Sum(a) => self.acc_map(grads, *a, &[], |_, _| g[0]),
            Op::Gather { src, idx } => {
                let c = self.value(*src).cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut gs[i * c..(i + 1) * c];
                        for (d, v) in dst.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ScatterAdd { src, idx } => {
                let c = self.value(*src).cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut gs[k * c..(k + 1) * c];
                        for (d, v) in dst.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (d, v) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { src, start } => {
                let rows = node.value.rows();
                let len = node.value.cols();
                let cols = self.value(*src).cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for r in 0..rows {
                        let dst = &mut gs[r * cols + start..r * cols + start + len];
                        for (d, v) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    /// `grad[v][k] += f(k, g[k])` elementwise; an empty `g` means broadcast of a scalar.
    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if grads[v.0].is_none() && !g.is_empty() {
            grads[v.0] = Some(g.iter().enumerate().map(|(k, &gi)| f(k, gi)).collect());
            return;
        }
        if let Some(gv) = self.slot(grads, v) {
            if g.is_empty() {
                for (k, d) in gv.iter_mut().enumerate() {
                    *d += f(k, 0.0);
                }
            } else {
                for (k, (d, &gi)) in gv.iter_mut().zip(g).enumerate() {
                    *d += f(k, gi);
                }
            }
        }
    }
}
