//! Define-by-run reverse-mode differentiation over rank-2 tensors.
//!
//! Every op evaluates eagerly when it is recorded, so the node list is
//! already in topological order. [`Graph::backward`] walks it in reverse.

use std::collections::{HashMap, HashSet};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Negative-side slope of leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Relu,
    LeakyRelu,
    Elu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Leaf,
    Param { store: u64, index: usize },
    MatMul,
    Affine,
    Binary(Binary),
    Unary(Unary),
    Sum,
    Mean,
    SumCols,
    MeanRows,
    Concat,
    SliceCols { start: usize },
    RepeatRows(usize),
    Reshape,
    LayerNorm,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatMul => "matmul",
            Op::Affine => "affine",
            Op::Binary(Binary::Add) => "add",
            Op::Binary(Binary::Sub) => "sub",
            Op::Binary(Binary::Mul) => "mul",
            Op::Binary(Binary::Div) => "div",
            Op::Unary(u) => match u {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::LeakyRelu => "leaky_relu",
                Unary::Elu => "elu",
                Unary::Sigmoid => "sigmoid",
                Unary::Softplus => "softplus",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Square => "square",
                Unary::Sqrt => "sqrt",
                Unary::Abs => "abs",
                Unary::Clamp(..) => "clamp",
            },
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumCols => "sum_cols",
            Op::MeanRows => "mean_rows",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Reshape => "reshape",
            Op::LayerNorm => "layer_norm",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass; drop it afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    param_cache: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().unwrap_or((1, t.len()))
}

fn broadcast(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// `c (+)= op(a) * op(b)` with optional transposes, row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is m×k (or stored k×m when transposed); b is k×n (or n×k).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above and `c`
    // does not alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
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

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Leaf => true,
            Op::Param { store, .. } => !self.frozen.contains(&store),
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            requires_grad,
        });
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, vec![], t)
    }

    /// Differentiable leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Value-equal constant that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let t = self.values[v.0].clone();
        Ok(self.input(t))
    }

    /// Parameters of `store` bound after this call are treated as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.id());
    }

    /// Binds parameter `index` of `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = (store.id(), index);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(
            Op::Param {
                store: store.id(),
                index,
            },
            vec![],
            store.value(index).clone(),
        );
        self.param_cache.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        self.check(x)?;
        let out = self.values[x.0].map(|v| u.apply(v));
        Ok(self.push(Op::Unary(u), vec![x.0], out))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu)
    }
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Elu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (da, db) = (dims(&self.values[a.0]), dims(&self.values[b.0]));
        let op = Op::Binary(kind);
        let (r, c) = broadcast(da, db)
            .ok_or_else(|| self.shape_err(op.name(), format!("cannot broadcast {da:?} with {db:?}")))?;
        let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if da.0 == 1 { 0 } else { i };
            let ib = if db.0 == 1 { 0 } else { i };
            for j in 0..c {
                let x = av[ia * da.1 + if da.1 == 1 { 0 } else { j }];
                let y = bv[ib * db.1 + if db.1 == 1 { 0 } else { j }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(op, vec![a.0, b.0], t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let ((m, k), (k2, n)) = (dims(&self.values[x.0]), dims(&self.values[w.0]));
        if k != k2 {
            return Err(self.shape_err("matmul", format!("[{m}x{k}] @ [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values[x.0].data(), false, self.values[w.0].data(), false, &mut out, false);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul, vec![x.0, w.0], t))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let ((m, k), (k2, n)) = (dims(&self.values[x.0]), dims(&self.values[w.0]));
        let bd = dims(&self.values[b.0]);
        if k != k2 || bd != (1, n) {
            return Err(self.shape_err(
                "affine",
                format!("[{m}x{k}] @ [{k2}x{n}] + {bd:?}"),
            ));
        }
        let bias = self.values[b.0].data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.values[x.0].data(), false, self.values[w.0].data(), false, &mut out, true);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Affine, vec![x.0, w.0, b.0], t))
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.values[x.0].data().iter().sum();
        Ok(self.push(Op::Sum, vec![x.0], Tensor::scalar(s)))
    }

    /// Mean of all entries, `[1, 1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.0];
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Op::Mean, vec![x.0], Tensor::scalar(s)))
    }

    /// Row-wise sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.0];
        let (r, _) = dims(t);
        let out: Vec<f64> = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(Op::SumCols, vec![x.0], t))
    }

    /// Column means over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.0];
        let (r, c) = dims(t);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let t = Tensor::matrix(1, c, out)?;
        Ok(self.push(Op::MeanRows, vec![x.0], t))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Tensor> = parts.iter().map(|p| &self.values[p.0]).collect();
        let t = Tensor::concat_cols(&refs).map_err(|e| self.shape_err("concat", e.to_string()))?;
        Ok(self.push(Op::Concat, parts.iter().map(|p| p.0).collect(), t))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let c = dims(&self.values[x.0]).1;
        if start + len > c {
            return Err(self.shape_err("slice_cols", format!("[{start}, {}) of {c} columns", start + len)));
        }
        let t = self.values[x.0].slice_cols(start, len);
        Ok(self.push(Op::SliceCols { start }, vec![x.0], t))
    }

    /// Tiles rows: output row `k * r + i` is input row `i`, for `k < n`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.0];
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(n * r * c);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(n * r, c, out)?;
        Ok(self.push(Op::RepeatRows(n), vec![x.0], t))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.values[x.0]
            .clone()
            .reshaped(vec![rows, cols])
            .map_err(|e| self.shape_err("reshape", e.to_string()))?;
        Ok(self.push(Op::Reshape, vec![x.0], t))
    }

    /// Per-row standardization (no affine gain or bias).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.0];
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(Op::LayerNorm, vec![x.0], t))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        let out_val = &self.values[output.0];
        if out_val.len() != 1 {
            return Err(Error::NotScalar {
                node: output.0,
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Op::Param { store, index } = node.op {
                if grads[i].is_some() {
                    params.push((store, index, i));
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &self.values[i];
        let wants = |j: usize| self.nodes[node.inputs[j]].requires_grad;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param { .. } => {}
            Op::Unary(u) => {
                let x = &self.values[node.inputs[0]];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gi, (&xi, &yi))| gi * u.derivative(xi, yi))
                    .collect();
                accum(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Binary(kind) => {
                let (a, b) = (&self.values[node.inputs[0]], &self.values[node.inputs[1]]);
                let (da, db) = (dims(a), dims(b));
                let (r, c) = dims(y);
                let mut ga = vec![0.0; da.0 * da.1];
                let mut gb = vec![0.0; db.0 * db.1];
                let gd = g.data();
                for ii in 0..r {
                    for jj in 0..c {
                        let ia = (if da.0 == 1 { 0 } else { ii }) * da.1 + if da.1 == 1 { 0 } else { jj };
                        let ib = (if db.0 == 1 { 0 } else { ii }) * db.1 + if db.1 == 1 { 0 } else { jj };
                        let gv = gd[ii * c + jj];
                        let (x, z) = (a.data()[ia], b.data()[ib]);
                        let (dx, dz) = match kind {
                            Binary::Add => (gv, gv),
                            Binary::Sub => (gv, -gv),
                            Binary::Mul => (gv * z, gv * x),
                            Binary::Div => (gv / z, -gv * x / (z * z)),
                        };
                        ga[ia] += dx;
                        gb[ib] += dz;
                    }
                }
                if wants(0) {
                    accum(grads, node.inputs[0], Tensor::matrix(da.0, da.1, ga).unwrap());
                }
                if wants(1) {
                    accum(grads, node.inputs[1], Tensor::matrix(db.0, db.1, gb).unwrap());
                }
            }
            Op::MatMul | Op::Affine => {
                let (x, w) = (&self.values[node.inputs[0]], &self.values[node.inputs[1]]);
                let ((m, k), (_, n)) = (dims(x), dims(w));
                if wants(0) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, w.data(), true, &mut gx, false);
                    accum(grads, node.inputs[0], Tensor::matrix(m, k, gx).unwrap());
                }
                if wants(1) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), true, g.data(), false, &mut gw, false);
                    accum(grads, node.inputs[1], Tensor::matrix(k, n, gw).unwrap());
                }
                if matches!(node.op, Op::Affine) && wants(2) {
                    let mut gb = vec![0.0; n];
                    for ii in 0..m {
                        for (o, v) in gb.iter_mut().zip(g.row_slice(ii)) {
                            *o += v;
                        }
                    }
                    accum(grads, node.inputs[2], Tensor::matrix(1, n, gb).unwrap());
                }
            }
            Op::Sum | Op::Mean => {
                let x = &self.values[node.inputs[0]];
                let scale = if matches!(node.op, Op::Mean) {
                    1.0 / x.len() as f64
                } else {
                    1.0
                };
                accum(grads, node.inputs[0], Tensor::full(x.shape(), g.item() * scale));
            }
            Op::SumCols => {
                let x = &self.values[node.inputs[0]];
                let (r, c) = dims(x);
                let mut out = Vec::with_capacity(r * c);
                for ii in 0..r {
                    out.extend(std::iter::repeat_n(g.data()[ii], c));
                }
                accum(grads, node.inputs[0], Tensor::matrix(r, c, out).unwrap());
            }
            Op::MeanRows => {
                let x = &self.values[node.inputs[0]];
                let (r, c) = dims(x);
                let inv = 1.0 / r as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend_from_slice(&row);
                }
                accum(grads, node.inputs[0], Tensor::matrix(r, c, out).unwrap());
            }
            Op::Concat => {
                let mut start = 0;
                for (j, &inp) in node.inputs.iter().enumerate() {
                    let w = dims(&self.values[inp]).1;
                    if wants(j) {
                        accum(grads, inp, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::SliceCols { start } => {
                let x = &self.values[node.inputs[0]];
                let (r, c) = dims(x);
                let w = dims(y).1;
                let mut out = vec![0.0; r * c];
                for ii in 0..r {
                    out[ii * c + start..ii * c + start + w].copy_from_slice(g.row_slice(ii));
                }
                accum(grads, node.inputs[0], Tensor::matrix(r, c, out).unwrap());
            }
            Op::RepeatRows(n) => {
                let x = &self.values[node.inputs[0]];
                let len = x.len();
                let mut out = vec![0.0; len];
                for k in 0..*n {
                    for (o, v) in out.iter_mut().zip(&g.data()[k * len..(k + 1) * len]) {
                        *o += v;
                    }
                }
                accum(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), out).unwrap());
            }
            Op::Reshape => {
                let x = &self.values[node.inputs[0]];
                let t = g.clone().reshaped(x.shape().to_vec()).unwrap();
                accum(grads, node.inputs[0], t);
            }
            Op::LayerNorm => {
                let x = &self.values[node.inputs[0]];
                let (r, c) = dims(x);
                let mut out = Vec::with_capacity(r * c);
                for ii in 0..r {
                    let row = x.row_slice(ii);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (gr, yr) = (g.row_slice(ii), y.row_slice(ii));
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| inv * (gv - g_mean - yv * gy_mean)));
                }
                accum(grads, node.inputs[0], Tensor::matrix(r, c, out).unwrap());
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Result of a reverse pass: gradients of every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(u64, usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; `None` if it was unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but zeros when unreachable.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    /// Adds the gradients of every parameter bound from `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let id = store.id();
        for &(sid, index, node) in &self.params {
            if sid == id {
                if let Some(g) = &self.grads[node] {
                    store.add_grad(index, g);
                }
            }
        }
    }
}
