//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation as a node with parent
//! links; [`Tape::backward`] replays the record in reverse and
//! accumulates a gradient for every leaf that requires one. Reduction
//! order is fixed (sequential over the contraction axis), so repeated
//! forward evaluations of the same graph are bitwise identical.

use super::scalar::{normal_cdf, normal_pdf, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngKey;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Add,
    /// `a (m×n) + bias (n)` broadcast over rows.
    AddRowBias,
    Sub,
    Mul,
    Div,
    Scale(f64),
    SumAll,
    Tanh,
    Sigmoid,
    Gelu,
    Abs,
    SoftmaxRows { tau: f64 },
    LogSoftmaxRows { tau: f64 },
    LayerNorm { eps: f64 },
    L2NormalizeRows { eps: f64 },
    /// Per-row Euclidean norm of an m×n matrix, output shape [m].
    RowNorms,
    DiagSum,
    Transpose,
    ConcatRows,
}

struct Node<T: Scalar> {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, parents, value, requires_grad });
        id
    }

    fn derived(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, parents, value, rg)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim(
                "matmul inner dimensions",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let v = matmul_value(va, vb);
        Ok(self.derived(Op::Matmul, vec![a, b], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_value(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.derived(Op::Add, vec![a, b], v))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.len() != va.cols() {
            return Err(Error::dim("row bias length", va.cols(), vb.len()));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % cols])
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(Op::AddRowBias, vec![a, bias], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_value(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.derived(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_value(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.derived(Op::Mul, vec![a, b], v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_value(self.value(a), self.value(b), "div", |x, y| x / y)?;
        Ok(self.derived(Op::Div, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = T::from_f64(c);
        let v = self.value(a).map(|x| x * k);
        self.derived(Op::Scale(c), vec![a], v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let v = Tensor::new(vec![1], vec![s]).unwrap();
        self.derived(Op::SumAll, vec![a], v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.derived(Op::Tanh, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::ONE;
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.derived(Op::Sigmoid, vec![a], v)
    }

    /// Exact Gaussian-CDF GELU: x·Φ(x).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * normal_cdf(x));
        self.derived(Op::Gelu, vec![a], v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        self.derived(Op::Abs, vec![a], v)
    }

    /// Row-wise softmax of `tau * x`, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Parameter(format!("softmax tau must be positive, got {tau}")));
        }
        let v = softmax_value(self.value(a), T::from_f64(tau), false);
        Ok(self.derived(Op::SoftmaxRows { tau }, vec![a], v))
    }

    /// Row-wise log-softmax of `tau * x`.
    pub fn log_softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Parameter(format!("softmax tau must be positive, got {tau}")));
        }
        let v = softmax_value(self.value(a), T::from_f64(tau), true);
        Ok(self.derived(Op::LogSoftmaxRows { tau }, vec![a], v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.len() != n || vb.len() != n {
            return Err(Error::dim("layer_norm affine length", n, format!("{}/{}", vg.len(), vb.len())));
        }
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.rows() {
            let (xhat, _) = row_standardize(vx.row(i), T::from_f64(eps));
            for (j, xh) in xhat.iter().enumerate() {
                data.push(vg.data()[j] * *xh + vb.data()[j]);
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.derived(Op::LayerNorm { eps }, vec![x, gamma, beta], v))
    }

    /// Unit-normalize each row; rows with norm below `eps` pass through as zero.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len());
        for i in 0..va.rows() {
            let r = va.row(i);
            let norm = row_norm(r);
            if norm.to_f64() < eps {
                data.extend(std::iter::repeat(T::ZERO).take(r.len()));
            } else {
                data.extend(r.iter().map(|&x| x / norm));
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(Op::L2NormalizeRows { eps }, vec![a], v))
    }

    pub fn row_norms(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<T> = (0..va.rows()).map(|i| row_norm(va.row(i))).collect();
        let v = Tensor::vector(data);
        self.derived(Op::RowNorms, vec![a], v)
    }

    /// Sum of the main diagonal of a square matrix.
    pub fn diag_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(Error::dim("diag_sum square matrix", va.rows(), va.cols()));
        }
        let mut s = T::ZERO;
        for i in 0..va.rows() {
            s += va.at(i, i);
        }
        let v = Tensor::new(vec![1], vec![s]).unwrap();
        Ok(self.derived(Op::DiagSum, vec![a], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![T::ZERO; va.len()];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.at(i, j);
            }
        }
        let v = Tensor::matrix(n, m, data).unwrap();
        self.derived(Op::Transpose, vec![a], v)
    }

    /// Stack the rows of several matrices (or row vectors) vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows needs at least one part".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows column count", cols, v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(Op::ConcatRows, parts.to_vec(), v))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate). The mask is a fresh non-grad leaf drawn from `key`.
    pub fn dropout(&mut self, a: NodeId, rate: f64, key: RngKey) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let mut rng = key.rng();
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let m = self.leaf(Tensor::new(shape, mask)?, false);
        self.mul(a, m)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf gets a
    /// gradient; leaves unreachable from the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(vec![1], vec![T::ONE]).unwrap());

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            self.propagate(id, &g, &mut grads);
        }

        // unreachable requires_grad leaves get explicit zeros
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (pv(0), pv(1));
                let da = matmul_grad_a(g, b);
                let db = matmul_grad_b(a, g);
                accumulate(grads, node.parents[0], da);
                accumulate(grads, node.parents[1], db);
            }
            Op::Add => {
                accumulate(grads, node.parents[0], g.clone());
                accumulate(grads, node.parents[1], g.clone());
            }
            Op::AddRowBias => {
                accumulate(grads, node.parents[0], g.clone());
                let cols = pv(1).len();
                let mut db = vec![T::ZERO; cols];
                for (i, &x) in g.data().iter().enumerate() {
                    db[i % cols] += x;
                }
                accumulate(grads, node.parents[1], Tensor::new(pv(1).shape().to_vec(), db).unwrap());
            }
            Op::Sub => {
                accumulate(grads, node.parents[0], g.clone());
                accumulate(grads, node.parents[1], g.map(|x| -x));
            }
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                accumulate(grads, node.parents[0], zip_unchecked(g, b, |x, y| x * y));
                accumulate(grads, node.parents[1], zip_unchecked(g, a, |x, y| x * y));
            }
            Op::Div => {
                let (a, b) = (pv(0), pv(1));
                accumulate(grads, node.parents[0], zip_unchecked(g, b, |x, y| x / y));
                let db: Vec<T> = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data().iter()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                accumulate(grads, node.parents[1], Tensor::new(b.shape().to_vec(), db).unwrap());
            }
            Op::Scale(c) => {
                let k = T::from_f64(*c);
                accumulate(grads, node.parents[0], g.map(|x| x * k));
            }
            Op::SumAll => {
                let gv = g.data()[0];
                let p = pv(0);
                accumulate(grads, node.parents[0], Tensor::new(p.shape().to_vec(), vec![gv; p.len()]).unwrap());
            }
            Op::Tanh => {
                let y = &node.value;
                accumulate(grads, node.parents[0], zip_unchecked(g, y, |gi, yi| gi * (T::ONE - yi * yi)));
            }
            Op::Sigmoid => {
                let y = &node.value;
                accumulate(grads, node.parents[0], zip_unchecked(g, y, |gi, yi| gi * yi * (T::ONE - yi)));
            }
            Op::Gelu => {
                let x = pv(0);
                accumulate(
                    grads,
                    node.parents[0],
                    zip_unchecked(g, x, |gi, xi| gi * (normal_cdf(xi) + xi * normal_pdf(xi))),
                );
            }
            Op::Abs => {
                let x = pv(0);
                accumulate(
                    grads,
                    node.parents[0],
                    zip_unchecked(g, x, |gi, xi| {
                        if xi > T::ZERO {
                            gi
                        } else if xi < T::ZERO {
                            -gi
                        } else {
                            T::ZERO
                        }
                    }),
                );
            }
            Op::SoftmaxRows { tau } => {
                let y = &node.value;
                let t = T::from_f64(*tau);
                let cols = y.cols();
                let mut dx = vec![T::ZERO; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let mut dot = T::ZERO;
                    for j in 0..cols {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..cols {
                        dx[i * cols + j] = t * yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, node.parents[0], Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmaxRows { tau } => {
                let y = &node.value; // log-probabilities
                let t = T::from_f64(*tau);
                let cols = y.cols();
                let mut dx = vec![T::ZERO; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let mut gsum = T::ZERO;
                    for j in 0..cols {
                        gsum += gr[j];
                    }
                    for j in 0..cols {
                        dx[i * cols + j] = t * (gr[j] - yr[j].exp() * gsum);
                    }
                }
                accumulate(grads, node.parents[0], Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm { eps } => {
                let (x, gamma) = (pv(0), pv(1));
                let n = x.cols();
                let nf = T::from_f64(n as f64);
                let mut dx = vec![T::ZERO; x.len()];
                let mut dgamma = vec![T::ZERO; n];
                let mut dbeta = vec![T::ZERO; n];
                for i in 0..x.rows() {
                    let (xhat, inv_std) = row_standardize(x.row(i), T::from_f64(*eps));
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mut mean_gy = T::ZERO;
                    let mut mean_gy_xhat = T::ZERO;
                    for j in 0..n {
                        let gy = gr[j] * gamma.data()[j];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    mean_gy = mean_gy / nf;
                    mean_gy_xhat = mean_gy_xhat / nf;
                    for j in 0..n {
                        let gy = gr[j] * gamma.data()[j];
                        dx[i * n + j] = (gy - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                    }
                }
                accumulate(grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx).unwrap());
                accumulate(grads, node.parents[1], Tensor::new(pv(1).shape().to_vec(), dgamma).unwrap());
                accumulate(grads, node.parents[2], Tensor::new(pv(2).shape().to_vec(), dbeta).unwrap());
            }
            Op::L2NormalizeRows { eps } => {
                let x = pv(0);
                let y = &node.value;
                let cols = x.cols();
                let mut dx = vec![T::ZERO; x.len()];
                for i in 0..x.rows() {
                    let norm = row_norm(x.row(i));
                    if norm.to_f64() < *eps {
                        continue; // zero row stays zero, gradient zero
                    }
                    let yr = y.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let mut dot = T::ZERO;
                    for j in 0..cols {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..cols {
                        dx[i * cols + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                accumulate(grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::RowNorms => {
                let x = pv(0);
                let y = &node.value;
                let cols = x.cols();
                let tiny = T::from_f64(1e-30);
                let mut dx = vec![T::ZERO; x.len()];
                for i in 0..x.rows() {
                    let norm = y.data()[i].max(tiny);
                    let gi = g.data()[i];
                    for j in 0..cols {
                        dx[i * cols + j] = gi * x.at(i, j) / norm;
                    }
                }
                accumulate(grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::DiagSum => {
                let x = pv(0);
                let n = x.rows();
                let gv = g.data()[0];
                let mut dx = vec![T::ZERO; x.len()];
                for i in 0..n {
                    dx[i * n + i] = gv;
                }
                accumulate(grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Transpose => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut dx = vec![T::ZERO; g.len()];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g.at(i, j);
                    }
                }
                accumulate(grads, node.parents[0], Tensor::matrix(n, m, dx).unwrap());
            }
            Op::ConcatRows => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in &node.parents {
                    let rows = self.nodes[p.0].value.rows();
                    let part = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Tensor::new(self.nodes[p.0].value.shape().to_vec(), part).unwrap());
                    offset += rows;
                }
            }
        }
    }

    /// Index of the first node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, format!("{:?}", n.op)))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn zip_value<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            format!("elementwise {op}"),
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(zip_unchecked(a, b, f))
}

fn zip_unchecked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn matmul_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::ZERO; m * n];
    // ikj order: per output element the contraction stays sequential in k
    for i in 0..m {
        for p in 0..k {
            let aip = a.at(i, p);
            let brow = b.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

// dA = dC · Bᵀ
fn matmul_grad_a<T: Scalar>(dc: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n, k) = (dc.rows(), dc.cols(), b.rows());
    let mut out = vec![T::ZERO; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = T::ZERO;
            let brow = b.row(p);
            let drow = dc.row(i);
            for j in 0..n {
                s += drow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    Tensor::matrix(m, k, out).unwrap()
}

// dB = Aᵀ · dC
fn matmul_grad_b<T: Scalar>(a: &Tensor<T>, dc: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), dc.cols());
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.at(i, p);
            let drow = dc.row(i);
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * drow[j];
            }
        }
    }
    Tensor::matrix(k, n, out).unwrap()
}

fn softmax_value<T: Scalar>(x: &Tensor<T>, tau: T, log: bool) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mx = row[0] * tau;
        for &v in row {
            mx = mx.max(v * tau);
        }
        let mut denom = T::ZERO;
        for &v in row {
            denom += (v * tau - mx).exp();
        }
        if log {
            let lse = denom.ln();
            data.extend(row.iter().map(|&v| v * tau - mx - lse));
        } else {
            data.extend(row.iter().map(|&v| (v * tau - mx).exp() / denom));
        }
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let mut s = T::ZERO;
    for &x in row {
        s += x * x;
    }
    s.sqrt()
}

/// Standardize a row: returns (xhat, 1/std) with the eps-stabilized variance.
fn row_standardize<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mu = T::ZERO;
    for &x in row {
        mu += x;
    }
    mu = mu / n;
    let mut var = T::ZERO;
    for &x in row {
        let d = x - mu;
        var += d * d;
    }
    var = var / n;
    let inv_std = T::ONE / (var + eps).sqrt();
    (row.iter().map(|&x| (x - mu) * inv_std).collect(), inv_std)
}
