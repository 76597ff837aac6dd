//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation as a node and
//! keeps the forward value of each node. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every parameter that was bound.
//!
//! Shape misuse inside the graph is a programming error and panics; the layer
//! functions built on top validate user-facing shapes and return errors.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::NumArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in a gather index meaning "write zero".
pub const GATHER_ZERO: u32 = u32::MAX;

/// Elementwise functions with their derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    /// tanh approximation of GELU
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Recip,
    Pow(f64),
    SmoothL1(f64),
    /// `scale * x + shift`
    Affine(f64, f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
            Unary::Pow(p) => x.powf(p),
            Unary::SmoothL1(beta) => {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            }
            Unary::Affine(s, b) => s * x + b,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Abs => x.signum() * (x != 0.0) as i32 as f64,
            Unary::Recip => -y * y,
            Unary::Pow(p) => p * x.powf(p - 1.0),
            Unary::SmoothL1(beta) => {
                if x.abs() < beta {
                    x / beta
                } else {
                    x.signum()
                }
            }
            Unary::Affine(s, _) => s,
        }
    }
}

/// Elementwise binary operations; the right operand broadcasts over rows
/// and/or columns when its extent along that axis is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Binary { a: Var, b: Var, kind: Binary },
    Unary { a: Var, kind: Unary },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gather { a: Var, index: Arc<[u32]> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupMax { a: Var, argmax: Vec<u32> },
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GroupMax { .. } => "group_max",
            Op::SumAll(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::SumCols(_) => "sum_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: NumArray,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.per_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

// C[m,n] = A[m,k] B[k,n]
pub(crate) fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

// C[m,n] = A[m,k] B[n,k]^T
pub(crate) fn gemm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

// C[m,n] = A[k,m]^T B[k,n]
pub(crate) fn gemm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
    c
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NumArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let a = &self.nodes[v.0].value;
        (a.rows(), a.cols())
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: NumArray) -> Var {
        let (r, c) = (value.rows(), value.cols());
        let value = value.reshape(vec![r, c]).expect("same size");
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let src = self.store.get(id);
        let value = NumArray::matrix(src.rows(), src.cols(), src.data().to_vec());
        let v = self.push(value, Op::Param(id), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {m}x{k} * {k2}x{n}");
        let out = gemm(self.value(a).data(), m, k, self.value(b).data(), n);
        let ng = self.needs(a) || self.needs(b);
        self.push(NumArray::matrix(m, n, out), Op::MatMul { a, b, b_transposed: false }, ng)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {m}x{k} * ({n}x{k2})^T");
        let out = gemm_nt(self.value(a).data(), m, k, self.value(b).data(), n);
        let ng = self.needs(a) || self.needs(b);
        self.push(NumArray::matrix(m, n, out), Op::MatMul { a, b, b_transposed: true }, ng)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let (n, m) = self.dims(a);
        let (br, bc) = self.dims(b);
        assert!(
            (br == n || br == 1) && (bc == m || bc == 1),
            "cannot broadcast {br}x{bc} onto {n}x{m}"
        );
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let bi = if br == 1 { 0 } else { i };
            for j in 0..m {
                let x = av[i * m + j];
                let y = bv[bi * bc + if bc == 1 { 0 } else { j }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(NumArray::matrix(n, m, out), Op::Binary { a, b, kind }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let (r, c) = self.dims(a);
        let value = value.reshape(vec![r, c]).expect("same size");
        let ng = self.needs(a);
        self.push(value, Op::Unary { a, kind }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Unary::Affine(s, 0.0))
    }

    pub fn affine(&mut self, a: Var, s: f64, shift: f64) -> Var {
        self.unary(a, Unary::Affine(s, shift))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs(a);
        self.push(NumArray::matrix(r, c, out), Op::Softmax(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(a);
        self.push(NumArray::matrix(r, c, out), Op::LogSoftmax(a), ng)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.needs(a);
        self.push(NumArray::matrix(r, c, out), Op::LayerNorm { a, inv_std }, ng)
    }

    /// Output element `i` is `a.data[index[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, index: Arc<[u32]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index does not match output shape");
        let src = self.value(a).data();
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let ng = self.needs(a);
        self.push(NumArray::matrix(rows, cols, out), Op::Gather { a, index }, ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (_, c) = self.dims(a);
        let index: Arc<[u32]> = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| (r * c + j) as u32))
            .collect();
        self.gather(a, index, rows.len(), c)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "column slice out of range");
        let index: Arc<[u32]> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(a, index, r, len)
    }

    /// Tiles a `1 x c` row into `n x c`.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let (r, _) = self.dims(a);
        assert_eq!(r, 1, "repeat_row expects a single row");
        self.select_rows(a, &vec![0; n])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        assert!(parts.iter().all(|&p| self.dims(p).0 == r), "concat_cols row mismatch");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(NumArray::matrix(r, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.dims(parts[0]).1;
        assert!(parts.iter().all(|&p| self.dims(p).1 == c), "concat_rows column mismatch");
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.dims(p).0;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(NumArray::matrix(rows, c, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is the channelwise max over rows `groups[i]` of `a`.
    /// Ties resolve to the earliest row in the group.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let (_, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(groups.len() * c);
        let mut argmax = Vec::with_capacity(groups.len() * c);
        for g in groups {
            assert!(!g.is_empty(), "group_max over an empty group");
            for j in 0..c {
                let mut best = g[0] * c + j;
                for &r in &g[1..] {
                    if src[r * c + j] > src[best] {
                        best = r * c + j;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
        let ng = self.needs(a);
        self.push(NumArray::matrix(groups.len(), c, out), Op::GroupMax { a, argmax }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(NumArray::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.needs(a);
        self.push(NumArray::matrix(1, c, out), Op::MeanRows(a), ng)
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let ng = self.needs(a);
        self.push(NumArray::matrix(r, 1, out), Op::SumCols(a), ng)
    }

    /// Describes the first node whose value is not finite.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| match n.op {
            Op::Param(id) => format!("param {}", self.store.name(id)),
            ref op => format!("node {i} ({}, shape {:?})", op.name(), n.value.shape()),
        })
    }

    /// Gradients of a `1 x 1` node with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut per_param = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => per_param[id.0] = Some(g),
                &Op::MatMul { a, b, b_transposed } => {
                    let (m, k) = self.dims(a);
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    if !b_transposed {
                        let n = self.dims(b).1;
                        if self.needs(a) {
                            accumulate(&mut grads, a, gemm_nt(&g, m, n, bv, k));
                        }
                        if self.needs(b) {
                            accumulate(&mut grads, b, gemm_tn(av, m, k, &g, n));
                        }
                    } else {
                        let n = self.dims(b).0;
                        if self.needs(a) {
                            accumulate(&mut grads, a, gemm(&g, m, n, bv, k));
                        }
                        if self.needs(b) {
                            accumulate(&mut grads, b, gemm_tn(&g, m, n, av, k));
                        }
                    }
                }
                &Op::Binary { a, b, kind } => {
                    let (n, m) = self.dims(a);
                    let (br, bc) = self.dims(b);
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let bidx = |i: usize, j: usize| {
                        (if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }
                    };
                    if self.needs(a) {
                        let da = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul | Binary::Div => {
                                let mut d = g.clone();
                                for i in 0..n {
                                    for j in 0..m {
                                        let y = bv[bidx(i, j)];
                                        d[i * m + j] = if kind == Binary::Mul {
                                            d[i * m + j] * y
                                        } else {
                                            d[i * m + j] / y
                                        };
                                    }
                                }
                                d
                            }
                        };
                        accumulate(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; br * bc];
                        for i in 0..n {
                            for j in 0..m {
                                let gi = g[i * m + j];
                                let bi = bidx(i, j);
                                db[bi] += match kind {
                                    Binary::Add => gi,
                                    Binary::Sub => -gi,
                                    Binary::Mul => gi * av[i * m + j],
                                    Binary::Div => -gi * av[i * m + j] / (bv[bi] * bv[bi]),
                                };
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::Unary { a, kind } => {
                    let x = self.value(a).data();
                    let y = node.value.data();
                    let d = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    accumulate(&mut grads, a, d);
                }
                &Op::Softmax(a) => {
                    let c = node.value.cols().max(1);
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                &Op::LogSoftmax(a) => {
                    let c = node.value.cols().max(1);
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::LayerNorm { a, inv_std } => {
                    let c = node.value.cols().max(1);
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for (r, ((dr, yr), gr)) in
                        d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather { a, index } => {
                    let mut d = vec![0.0; self.value(*a).len()];
                    for (&i, gi) in index.iter().zip(&g) {
                        if i != GATHER_ZERO {
                            d[i as usize] += gi;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let r = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(r * w);
                            for i in 0..r {
                                d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::GroupMax { a, argmax } => {
                    let mut d = vec![0.0; self.value(*a).len()];
                    for (&i, gi) in argmax.iter().zip(&g) {
                        d[i as usize] += gi;
                    }
                    accumulate(&mut grads, *a, d);
                }
                &Op::SumAll(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
                &Op::MeanRows(a) => {
                    let (r, c) = self.dims(a);
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.iter().map(|v| v / r as f64));
                    }
                    accumulate(&mut grads, a, d);
                }
                &Op::SumCols(a) => {
                    let (r, c) = self.dims(a);
                    let mut d = Vec::with_capacity(r * c);
                    for &gi in g.iter().take(r) {
                        d.extend(std::iter::repeat_n(gi, c));
                    }
                    accumulate(&mut grads, a, d);
                }
            }
        }
        Gradients { per_param }
    }
}
