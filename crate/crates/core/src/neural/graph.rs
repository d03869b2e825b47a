//! A small define-by-run reverse-mode tape over [`Matrix`] values.
//!
//! Each op computes its output eagerly and records enough to run backward.
//! Parameters enter as `Param` leaves resolved against a borrowed
//! [`ModelParams`]; their gradients accumulate into [`ParamGrads`].

use crate::neural::params::{ModelParams, ParamGrads};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Const,
    Param(usize),
    /// Gather rows of a parameter table.
    Embed { table: usize, ids: Vec<u32> },
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a 1×n bias over the rows of a.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Add a constant matrix (mask, positional encoding).
    AddConst(NodeId),
    /// Elementwise multiply by a constant matrix (dropout mask).
    MulConst(NodeId, Matrix),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
}

struct Node {
    op: Op,
    /// Owned output; `None` for Param leaves (resolved via the param store).
    out: Option<Matrix>,
}

pub struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Graph { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.params.tensor(*p),
            _ => self.nodes[id.0].out.as_ref().expect("non-param node has output"),
        }
    }

    fn push(&mut self, op: Op, out: Option<Matrix>) -> NodeId {
        self.nodes.push(Node { op, out });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Const, Some(m))
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        self.push(Op::Param(id), None)
    }

    pub fn embed(&mut self, table: usize, ids: &[u32]) -> NodeId {
        let t = self.params.tensor(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(Op::Embed { table, ids: ids.to_vec() }, Some(out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(out))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bias_m = self.value(bias);
        assert_eq!(bias_m.rows(), 1, "add_row bias must be 1×n");
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, b) in row.iter_mut().zip(bias_m.row(0)) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, bias), Some(out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        self.push(Op::Scale(a, c), Some(out))
    }

    pub fn add_const(&mut self, a: NodeId, m: &Matrix) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(m);
        self.push(Op::AddConst(a), Some(out))
    }

    pub fn mul_const(&mut self, a: NodeId, m: Matrix) -> NodeId {
        let av = self.value(a);
        assert_eq!((av.rows(), av.cols()), (m.rows(), m.cols()));
        let mut out = av.clone();
        for (x, k) in out.data_mut().iter_mut().zip(m.data()) {
            *x *= k;
        }
        self.push(Op::MulConst(a, m), Some(out))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), Some(out))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), Some(out))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), Some(out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!((av.rows(), av.cols()), (bv.rows(), bv.cols()));
        let mut out = av.clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv.data()) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), Some(out))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| 1.0 - v);
        self.push(Op::OneMinus(a), Some(out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let out = Matrix::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        self.push(Op::SliceCols(a, start), Some(out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), Some(out))
    }

    /// Row-wise layer norm with learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let d = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            let out_row = out.row_mut(i);
            for j in 0..d {
                out_row[j] = g.get(0, j) * (row[j] - mean) * inv_std + b.get(0, j);
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, Some(out))
    }

    /// Backpropagate `seed_grad` from `seed` into `grads`.
    pub fn backward(&self, seed: NodeId, seed_grad: Matrix, grads: &mut ParamGrads) {
        let mut node_grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[seed.0] = Some(seed_grad);

        for idx in (0..=seed.0).rev() {
            let grad = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(p) => grads.tensors[*p].add_assign(&grad),
                Op::Embed { table, ids } => {
                    let gt = &mut grads.tensors[*table];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = gt.row_mut(id as usize);
                        for (dv, gv) in dst.iter_mut().zip(grad.row(r)) {
                            *dv += gv;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&grad);
                    self.bump(&mut node_grads, *a, da);
                    self.bump(&mut node_grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // C = A·Bᵀ → dA = dC·B, dB = dCᵀ·A
                    let da = grad.matmul(self.value(*b));
                    let db = grad.matmul_tn(self.value(*a));
                    self.bump(&mut node_grads, *a, da);
                    self.bump(&mut node_grads, *b, db);
                }
                Op::Add(a, b) => {
                    self.bump(&mut node_grads, *a, grad.clone());
                    self.bump(&mut node_grads, *b, grad);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for (acc, g) in db.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *acc += g;
                        }
                    }
                    self.bump(&mut node_grads, *a, grad);
                    self.bump(&mut node_grads, *bias, db);
                }
                Op::Scale(a, c) => {
                    let mut da = grad;
                    da.scale_assign(*c);
                    self.bump(&mut node_grads, *a, da);
                }
                Op::AddConst(a) => self.bump(&mut node_grads, *a, grad),
                Op::MulConst(a, m) => {
                    let mut da = grad;
                    for (g, k) in da.data_mut().iter_mut().zip(m.data()) {
                        *g *= k;
                    }
                    self.bump(&mut node_grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].out.as_ref().unwrap();
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 =
                            grad.row(i).iter().zip(y.row(i)).map(|(g, v)| g * v).sum();
                        let da_row = da.row_mut(i);
                        for j in 0..y.cols() {
                            da_row[j] = y.get(i, j) * (grad.get(i, j) - dot);
                        }
                    }
                    self.bump(&mut node_grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut da = grad;
                    for (g, &v) in da.data_mut().iter_mut().zip(x.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.bump(&mut node_grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].out.as_ref().unwrap();
                    let mut da = grad;
                    for (g, &v) in da.data_mut().iter_mut().zip(y.data()) {
                        *g *= v * (1.0 - v);
                    }
                    self.bump(&mut node_grads, *a, da);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b);
                    let mut da = grad.clone();
                    for (g, &v) in da.data_mut().iter_mut().zip(bv.data()) {
                        *g *= v;
                    }
                    let mut db = grad;
                    for (g, &v) in db.data_mut().iter_mut().zip(av.data()) {
                        *g *= v;
                    }
                    self.bump(&mut node_grads, *a, da);
                    self.bump(&mut node_grads, *b, db);
                }
                Op::OneMinus(a) => {
                    let mut da = grad;
                    da.scale_assign(-1.0);
                    self.bump(&mut node_grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..grad.rows() {
                        da.row_mut(i)[*start..*start + grad.cols()]
                            .copy_from_slice(grad.row(i));
                    }
                    self.bump(&mut node_grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let dp = Matrix::from_fn(grad.rows(), cols, |i, j| {
                            grad.get(i, off + j)
                        });
                        self.bump(&mut node_grads, p, dp);
                        off += cols;
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let g = self.value(*gain);
                    let d = xv.cols();
                    let mut dx = Matrix::zeros(xv.rows(), d);
                    let mut dgain = Matrix::zeros(1, d);
                    let mut dbias = Matrix::zeros(1, d);
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let gy: Vec<f64> = (0..d).map(|j| grad.get(i, j) * g.get(0, j)).collect();
                        let mean_gy = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy_xhat =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dx_row = dx.row_mut(i);
                        for j in 0..d {
                            dx_row[j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                            dgain.row_mut(0)[j] += grad.get(i, j) * xhat[j];
                            dbias.row_mut(0)[j] += grad.get(i, j);
                        }
                    }
                    self.bump(&mut node_grads, *x, dx);
                    self.bump(&mut node_grads, *gain, dgain);
                    self.bump(&mut node_grads, *bias, dbias);
                }
            }
        }
    }

    fn bump(&self, node_grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        match &mut node_grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}
