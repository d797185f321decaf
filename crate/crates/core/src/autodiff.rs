//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the computation record: every primitive application is
//! appended in execution order together with its output value, so node ids
//! are a topological order by construction. [`Graph::backward`] walks the
//! record once in reverse and adds parameter gradients into a
//! [`ParamStore`]; zeroing is left to the caller.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log1p,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::Softplus,
        Activation::Exp,
        Activation::Log1p,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Log1p => x.ln_1p(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Log1p => 1.0 / (1.0 + x),
        }
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

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Applies an activation elementwise, checking the `log1p` domain.
pub fn elementwise(kind: Activation, x: &Tensor) -> Result<Tensor> {
    if kind == Activation::Log1p {
        if let Some(v) = x.data().iter().find(|&&v| v <= -1.0) {
            return Err(MqError::Domain {
                op: "log1p",
                detail: format!("argument {v} <= -1"),
            });
        }
    }
    Ok(x.map(|v| kind.apply(v)))
}

/// Width-2 dilated causal convolution over a `[T, C_in]` sequence.
///
/// `kernel` is `[2, C_in, C_out]`; tap 0 multiplies `x[t]` and tap 1
/// multiplies `x[t - dilation]`, which is zero when `t < dilation`.
pub fn dilated_causal_conv1d(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let t = x.rows();
    conv_forward(x, kernel, dilation, t)
}

fn conv_dims(x: &Tensor, kernel: &Tensor, dilation: usize, seg_len: usize) -> Result<(usize, usize, usize)> {
    if dilation == 0 {
        return Err(MqError::arg("dilation must be positive"));
    }
    if x.ndim() != 2 || kernel.ndim() != 3 || kernel.shape()[0] != 2 || kernel.shape()[1] != x.shape()[1] {
        return Err(MqError::shape("dilated_causal_conv1d", x.shape(), kernel.shape()));
    }
    if seg_len == 0 || !x.rows().is_multiple_of(seg_len) {
        return Err(MqError::arg(format!(
            "segment length {seg_len} does not divide {} rows",
            x.rows()
        )));
    }
    Ok((x.rows(), kernel.shape()[1], kernel.shape()[2]))
}

fn conv_forward(x: &Tensor, kernel: &Tensor, dilation: usize, seg_len: usize) -> Result<Tensor> {
    let (rows, cin, cout) = conv_dims(x, kernel, dilation, seg_len)?;
    let (w_now, w_past) = kernel.data().split_at(cin * cout);
    let xd = x.data();
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        let orow = &mut out[r * cout..(r + 1) * cout];
        kernels::matmul(&xd[r * cin..(r + 1) * cin], w_now, orow, 1, cin, cout);
        if r % seg_len >= dilation {
            let p = r - dilation;
            kernels::matmul(&xd[p * cin..(p + 1) * cin], w_past, orow, 1, cin, cout);
        }
    }
    Tensor::matrix(rows, cout, out)
}

/// Pinball loss `q (y - p)_+ + (1 - q) (p - y)_+`.
pub fn pinball(y: f64, pred: f64, q: f64) -> f64 {
    let d = y - pred;
    if d >= 0.0 {
        q * d
    } else {
        (q - 1.0) * d
    }
}

/// Derivative of [`pinball`] with respect to the prediction; `-q` at the kink.
pub fn pinball_grad(y: f64, pred: f64, q: f64) -> f64 {
    if pred > y {
        1.0 - q
    } else {
        -q
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Negative log density of `N(mu, sigma^2)` at `z`.
pub fn gaussian_nll(z: f64, mu: f64, sigma: f64) -> f64 {
    let r = (z - mu) / sigma;
    sigma.ln() + HALF_LN_2PI + 0.5 * r * r
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Unary(Activation, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    CausalConv { x: Var, kernel: Var, dilation: usize, seg_len: usize },
    Sum(Var),
    Pinball { pred: Var, target: Vec<f64>, weight: Vec<f64>, levels: Vec<f64> },
    GaussianNll { mu: Var, sigma: Var, target: Vec<f64>, weight: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// The computation record.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf; receives no gradient outside the record.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Input, value });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: store.value(id).clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `[R, C] + [C]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn unary(&mut self, kind: Activation, x: Var) -> Result<Var> {
        self.push(Op::Unary(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Activation::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Activation::Softplus, x)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        self.push(Op::GatherRows { x, index })
    }

    /// Dilated causal convolution applied independently to consecutive
    /// segments of `seg_len` rows (one segment per series).
    pub fn causal_conv(&mut self, x: Var, kernel: Var, dilation: usize, seg_len: usize) -> Result<Var> {
        self.push(Op::CausalConv {
            x,
            kernel,
            dilation,
            seg_len,
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Weighted pinball loss summed over live terms.
    ///
    /// `pred` is `[R, Q]`, `target` has `R` entries, `weight` has `R * Q`
    /// entries; a zero weight removes the term from the record entirely.
    pub fn pinball_loss(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>, levels: Vec<f64>) -> Result<Var> {
        self.push(Op::Pinball {
            pred,
            target,
            weight,
            levels,
        })
    }

    /// Weighted Gaussian negative log-likelihood summed over live rows.
    pub fn gaussian_nll(&mut self, mu: Var, sigma: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        self.push(Op::GaussianNll {
            mu,
            sigma,
            target,
            weight,
        })
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| -> Result<&Tensor> {
            self.nodes
                .get(v.0)
                .map(|n| &n.value)
                .ok_or_else(|| MqError::Contract(format!("node {} not yet recorded", v.0)))
        };
        match op {
            Op::Input | Op::Param => Err(MqError::Contract("leaf nodes have no forward rule".into())),
            Op::MatMul(a, b) => val(a)?.matmul(val(b)?),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a)?, val(b)?);
                if a.shape() != b.shape() {
                    return Err(MqError::shape("elementwise binary", a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::AddBias(x, b) => {
                let (x, b) = (val(x)?, val(b)?);
                if b.len() != x.cols() || x.ndim() != 2 {
                    return Err(MqError::shape("add_bias", x.shape(), b.shape()));
                }
                let c = x.cols();
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += b.data()[i % c];
                }
                Ok(out)
            }
            Op::Scale(x, c) => Ok(val(x)?.map(|v| v * c)),
            Op::Unary(kind, x) => elementwise(*kind, val(x)?),
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(MqError::arg("concat of zero parts"));
                }
                let rows = val(&parts[0])?.rows();
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = val(p)?;
                    if t.rows() != rows || t.ndim() > 2 {
                        return Err(MqError::shape("concat_cols", &[rows], t.shape()));
                    }
                    widths.push(t.cols());
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(val(p)?.row(r));
                    }
                }
                Tensor::matrix(rows, total, out)
            }
            Op::SliceCols { x, start, end } => {
                let x = val(x)?;
                if start >= end || *end > x.cols() {
                    return Err(MqError::shape("slice_cols", x.shape(), &[*start, *end]));
                }
                let mut out = Vec::with_capacity(x.rows() * (end - start));
                for r in 0..x.rows() {
                    out.extend_from_slice(&x.row(r)[*start..*end]);
                }
                Tensor::matrix(x.rows(), end - start, out)
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(MqError::arg("concat of zero parts"));
                }
                let cols = val(&parts[0])?.cols();
                let mut out = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = val(p)?;
                    if t.cols() != cols {
                        return Err(MqError::shape("concat_rows", &[cols], t.shape()));
                    }
                    rows += t.rows();
                    out.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, out)
            }
            Op::GatherRows { x, index } => {
                let x = val(x)?;
                let c = x.cols();
                let mut out = vec![0.0; index.len() * c];
                for (i, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        if s >= x.rows() {
                            return Err(MqError::arg(format!("gather index {s} out of {} rows", x.rows())));
                        }
                        out[i * c..(i + 1) * c].copy_from_slice(x.row(s));
                    }
                }
                Tensor::matrix(index.len(), c, out)
            }
            Op::CausalConv {
                x,
                kernel,
                dilation,
                seg_len,
            } => conv_forward(val(x)?, val(kernel)?, *dilation, *seg_len),
            Op::Sum(x) => Ok(Tensor::scalar(val(x)?.sum())),
            Op::Pinball {
                pred,
                target,
                weight,
                levels,
            } => {
                let p = val(pred)?;
                let q = levels.len();
                if p.cols() != q || p.rows() != target.len() || weight.len() != target.len() * q {
                    return Err(MqError::shape("pinball_loss", p.shape(), &[target.len(), q]));
                }
                let mut total = 0.0;
                for (r, &y) in target.iter().enumerate() {
                    for (j, &lvl) in levels.iter().enumerate() {
                        let w = weight[r * q + j];
                        if w != 0.0 {
                            total += w * pinball(y, p.get2(r, j), lvl);
                        }
                    }
                }
                Ok(Tensor::scalar(total))
            }
            Op::GaussianNll {
                mu,
                sigma,
                target,
                weight,
            } => {
                let (m, s) = (val(mu)?, val(sigma)?);
                if m.len() != target.len() || s.len() != target.len() || weight.len() != target.len() {
                    return Err(MqError::shape("gaussian_nll", m.shape(), &[target.len()]));
                }
                let mut total = 0.0;
                for (i, &z) in target.iter().enumerate() {
                    if weight[i] != 0.0 {
                        total += weight[i] * gaussian_nll(z, m.data()[i], s.data()[i]);
                    }
                }
                Ok(Tensor::scalar(total))
            }
        }
    }

    /// Re-executes every recorded forward rule and returns the recomputed
    /// values (leaves are copied).
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Input | Op::Param => Ok(n.value.clone()),
                ref op => self.eval(op),
            })
            .collect()
    }

    /// Computes `d loss / d node` for every node.
    fn node_gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(MqError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_bt(g.data(), bv.data(), &mut da, m, k, n);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut grads, *a, av.shape(), da)?;
                    accumulate(&mut grads, *b, bv.shape(), db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec())?;
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *b, &shape, g.into_data())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec())?;
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, g.shape(), neg)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    let db = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, av.shape(), da)?;
                    accumulate(&mut grads, *b, bv.shape(), db)?;
                }
                Op::AddBias(x, b) => {
                    let bshape = self.shape(*b).to_vec();
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, &bshape, db)?;
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, g.into_data())?;
                }
                Op::Scale(x, c) => {
                    let dx = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, g.shape(), dx)?;
                }
                Op::Unary(kind, x) => {
                    let xv = self.value(*x);
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(node.value.data())
                        .map(|((g, &xi), &yi)| g * kind.derivative(xi, yi))
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), dx)?;
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, *p, pv.shape(), dp)?;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let w = end - start;
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        dx[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *x, xv.shape(), dx)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        accumulate(&mut grads, *p, pv.shape(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                    }
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (i, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (d, v) in dx[s * c..(s + 1) * c].iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), dx)?;
                }
                Op::CausalConv {
                    x,
                    kernel,
                    dilation,
                    seg_len,
                } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let (rows, cin, cout) = conv_dims(xv, kv, *dilation, *seg_len)?;
                    let (w_now, w_past) = kv.data().split_at(cin * cout);
                    let mut dx = vec![0.0; xv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let (dk_now, dk_past) = dk.split_at_mut(cin * cout);
                    for r in 0..rows {
                        let grow = g.row(r);
                        let xrow = xv.row(r);
                        kernels::matmul_bt(grow, w_now, &mut dx[r * cin..(r + 1) * cin], 1, cin, cout);
                        kernels::matmul_at(xrow, grow, dk_now, 1, cin, cout);
                        if r % seg_len >= *dilation {
                            let p = r - dilation;
                            kernels::matmul_bt(grow, w_past, &mut dx[p * cin..(p + 1) * cin], 1, cin, cout);
                            kernels::matmul_at(xv.row(p), grow, dk_past, 1, cin, cout);
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), dx)?;
                    accumulate(&mut grads, *kernel, kv.shape(), dk)?;
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, xv.shape(), vec![g.item(); xv.len()])?;
                }
                Op::Pinball {
                    pred,
                    target,
                    weight,
                    levels,
                } => {
                    let pv = self.value(*pred);
                    let q = levels.len();
                    let s = g.item();
                    let mut dp = vec![0.0; pv.len()];
                    for (r, &y) in target.iter().enumerate() {
                        for (j, &lvl) in levels.iter().enumerate() {
                            let w = weight[r * q + j];
                            if w != 0.0 {
                                dp[r * q + j] = s * w * pinball_grad(y, pv.get2(r, j), lvl);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, pv.shape(), dp)?;
                }
                Op::GaussianNll {
                    mu,
                    sigma,
                    target,
                    weight,
                } => {
                    let (mv, sv) = (self.value(*mu), self.value(*sigma));
                    let s = g.item();
                    let mut dmu = vec![0.0; mv.len()];
                    let mut dsig = vec![0.0; sv.len()];
                    for (i, &z) in target.iter().enumerate() {
                        let w = weight[i];
                        if w != 0.0 {
                            let (m, sd) = (mv.data()[i], sv.data()[i]);
                            let r = z - m;
                            let var = sd * sd;
                            dmu[i] = -s * w * r / var;
                            dsig[i] = s * w * (1.0 / sd - r * r / (var * sd));
                        }
                    }
                    accumulate(&mut grads, *mu, mv.shape(), dmu)?;
                    accumulate(&mut grads, *sigma, sv.shape(), dsig)?;
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every parameter leaf.
    pub fn param_gradients(&self, loss: Var, num_params: usize) -> Result<Gradients> {
        let mut node_grads = self.node_gradients(loss)?;
        let mut out = Gradients::empty(num_params);
        for (&pid, &v) in &self.params {
            if v.0 < node_grads.len() {
                if let Some(g) = node_grads[v.0].take() {
                    out.0[pid.index()] = Some(g);
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to an arbitrary node, zero if
    /// disconnected.
    pub fn grad_wrt(&self, loss: Var, v: Var) -> Result<Tensor> {
        let mut node_grads = self.node_gradients(loss)?;
        Ok(node_grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    /// Backpropagates `loss` and adds the result into `store`'s gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.param_gradients(loss, store.len())?;
        store.accumulate(&grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
    }

    #[test]
    fn softplus_matches_reference() {
        // log(1 + e^x) at 40 significant digits, rounded.
        let refs = [
            (-20.0, 2.061_153_620_314_380_7e-9),
            (0.0, std::f64::consts::LN_2),
            (20.0, 20.000_000_002_061_154),
        ];
        for (x, r) in refs {
            let s = softplus(x);
            assert!(((s - r) / r).abs() < 1e-10, "softplus({x}) = {s}, want {r}");
        }
    }

    #[test]
    fn log1p_domain_error() {
        let t = Tensor::vector(vec![0.5, -1.0]);
        assert!(matches!(elementwise(Activation::Log1p, &t), Err(MqError::Domain { .. })));
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 1, vec![1.5, 2.0, -4.0]).unwrap());
        let wv = g.param(&store, w);
        let y = g.matmul(wv, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).gradient.data(), &[1.5, 2.0, -4.0]);

        // second call without zeroing adds again
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).gradient.data(), &[3.0, 4.0, -8.0]);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::vector(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let loss = g.sum(av).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).gradient.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(x, &mut store), Err(MqError::Contract(_))));
    }

    #[test]
    fn conv_impulse_response() {
        let mut x = Tensor::zeros(&[12, 1]);
        x.data_mut()[5] = 1.0;
        let k = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = dilated_causal_conv1d(&x, &k, 2).unwrap();
        let nz: Vec<usize> = (0..12).filter(|&t| y.data()[t] != 0.0).collect();
        assert_eq!(nz, vec![5, 7]);
    }

    #[test]
    fn conv_passthrough_is_linear_map() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut k = Tensor::zeros(&[2, 2, 3]);
        let map = [0.5, -1.0, 2.0, 1.5, 0.0, 3.0];
        k.data_mut()[..6].copy_from_slice(&map);
        let y = dilated_causal_conv1d(&x, &k, 1).unwrap();
        let m = Tensor::matrix(2, 3, map.to_vec()).unwrap();
        assert_eq!(y, x.matmul(&m).unwrap());
    }

    #[test]
    fn conv_rejects_zero_dilation_accepts_long() {
        let x = Tensor::zeros(&[4, 1]);
        let k = Tensor::full(&[2, 1, 1], 1.0);
        assert!(dilated_causal_conv1d(&x, &k, 0).is_err());
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).reshape(vec![4, 1]).unwrap();
        let y = dilated_causal_conv1d(&x, &k, 10).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pinball_kink_convention() {
        assert_eq!(pinball_grad(1.0, 1.0, 0.3), -0.3);
        assert_eq!(pinball_grad(1.0, 2.0, 0.3), 0.7);
        assert_eq!(pinball_grad(1.0, 0.0, 0.3), -0.3);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![0.1, 0.7, -0.3, 1.1]).unwrap());
        let b = g.tanh(a).unwrap();
        let c = g.matmul(a, b).unwrap();
        let d = g.concat_cols(&[b, c]).unwrap();
        let _ = g.sum(d).unwrap();
        let replayed = g.replay().unwrap();
        for (i, t) in replayed.iter().enumerate() {
            assert_eq!(t, g.value(Var(i)));
        }
    }
}
