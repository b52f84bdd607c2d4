//! Reverse-mode tape over a fixed eager op set.
//!
//! Each public operation validates shapes, computes its value immediately,
//! verifies the result is finite, and records an adjoint closure. Replaying
//! the tape backward from a scalar output yields one adjoint per leaf
//! parameter, shaped like the parameter.

use crate::rng::counter_rng;
use crate::tensor::{Real, Tensor};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("gradient check: function is not deterministic (two forward passes differ)")]
    NonDeterministic,
}

fn shape_err<T>(op: &'static str, lhs: &Tensor<impl Real>, rhs: &Tensor<impl Real>) -> Result<T, TapeError> {
    Err(TapeError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Boolean mask with tensor layout; `true` keeps the entry.
#[derive(Clone, Debug)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn all_false(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, keep: vec![false; rows * cols] }
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.keep[r * self.cols + c] = v;
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }
}

/// inputs: parent values; output: this node's value; grad: upstream adjoint.
/// Returns one adjoint per parent, parent-shaped.
type BackFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    back: Option<BackFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    train: bool,
    dropout_seed: u64,
    dropout_counter: u64,
}

pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), train: false, dropout_seed: 0, dropout_counter: 0 }
    }

    /// Training-mode graph; dropout masks are derived from (seed, call counter).
    pub fn with_dropout(seed: u64) -> Self {
        Graph { nodes: Vec::new(), train: true, dropout_seed: seed, dropout_counter: 0 }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, parents: Vec<NodeId>, back: Option<BackFn<T>>) -> Result<NodeId, TapeError> {
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op });
        }
        self.nodes.push(Node { value, parents, back });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf that receives an adjoint.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, TapeError> {
        self.push("param", value, vec![], None)
    }

    /// Leaf that does not receive an adjoint (inputs, masks turned constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, TapeError> {
        self.push("constant", value, vec![], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", va, vb);
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push("add", out, vec![a, b], Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("sub", va, vb);
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(
            "sub",
            out,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("mul", va, vb);
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(
            "mul",
            out,
            vec![a, b],
            Some(Box::new(|inp, _, g| {
                let da = hadamard(g, inp[1]);
                let db = hadamard(g, inp[0]);
                vec![da, db]
            })),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, vec![a], Some(Box::new(|_, _, g| vec![g.clone()])))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: T) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| x * s);
        self.push("mul_scalar", out, vec![a], Some(Box::new(move |_, _, g| vec![g.map(|x| x * s)])))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.mul_scalar(a, -T::one())
    }

    /// A(m×k) · B(k×n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return shape_err("matmul", va, vb);
        }
        let out = va.matmul(vb, false, false);
        self.push(
            "matmul",
            out,
            vec![a, b],
            Some(Box::new(|inp, _, g| {
                vec![g.matmul(inp[1], false, true), inp[0].matmul(g, true, false)]
            })),
        )
    }

    /// A(m×k) · Bᵀ where B is n×k.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return shape_err("matmul_nt", va, vb);
        }
        let out = va.matmul(vb, false, true);
        self.push(
            "matmul_nt",
            out,
            vec![a, b],
            Some(Box::new(|inp, _, g| {
                vec![g.matmul(inp[1], false, false), g.matmul(inp[0], true, false)]
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, vec![a], Some(Box::new(|_, _, g| vec![g.transpose()])))
    }

    /// Broadcast-add a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TapeError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return shape_err("add_row", va, vr);
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let o = out.row_mut(r);
            for (j, v) in vr.data().iter().enumerate() {
                o[j] = o[j] + *v;
            }
        }
        self.push(
            "add_row",
            out,
            vec![a, row],
            Some(Box::new(|_, _, g| {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let d = dr.row_mut(0);
                    for j in 0..grow.len() {
                        d[j] = d[j] + grow[j];
                    }
                }
                vec![g.clone(), dr]
            })),
        )
    }

    /// Broadcast-multiply every row of an m×n matrix by a 1×n row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TapeError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return shape_err("mul_row", va, vr);
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let o = out.row_mut(r);
            for (j, v) in vr.data().iter().enumerate() {
                o[j] = o[j] * *v;
            }
        }
        self.push(
            "mul_row",
            out,
            vec![a, row],
            Some(Box::new(|inp, _, g| {
                let (a, r) = (inp[0], inp[1]);
                let mut da = g.clone();
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    let arow = a.row(i);
                    let d = da.row_mut(i);
                    for j in 0..grow.len() {
                        d[j] = grow[j] * r.data()[j];
                    }
                    let dof = dr.row_mut(0);
                    for j in 0..grow.len() {
                        dof[j] = dof[j] + grow[j] * arow[j];
                    }
                }
                vec![da, dr]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| x.exp());
        self.push("exp", out, vec![a], Some(Box::new(|_, out, g| vec![hadamard(g, out)])))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| x.ln());
        self.push(
            "log",
            out,
            vec![a],
            Some(Box::new(|inp, _, g| {
                vec![zip_map(g, inp[0], |gv, a| gv / a)]
            })),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(
            "tanh",
            out,
            vec![a],
            Some(Box::new(|_, out, g| {
                vec![zip_map(g, out, |gv, y| gv * (T::one() - y * y))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let one = T::one();
        let out = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(
            "sigmoid",
            out,
            vec![a],
            Some(Box::new(|_, out, g| {
                vec![zip_map(g, out, |gv, y| gv * y * (T::one() - y))]
            })),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            "relu",
            out,
            vec![a],
            Some(Box::new(|inp, _, g| {
                vec![zip_map(g, inp[0], |gv, a| if a > T::zero() { gv } else { T::zero() })]
            })),
        )
    }

    /// tanh-form gelu: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let c = T::from_f64(0.7978845608028654);
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out = self.value(a).map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(
            "gelu",
            out,
            vec![a],
            Some(Box::new(move |inp, _, g| {
                vec![zip_map(g, inp[0], |gv, x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let sech2 = T::one() - t * t;
                    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                    gv * (half * (T::one() + t) + half * x * sech2 * du)
                })]
            })),
        )
    }

    /// Clip to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId, TapeError> {
        if lo >= hi {
            return Err(TapeError::Invalid { op: "clamp", msg: format!("lo {lo} >= hi {hi}") });
        }
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(
            "clamp",
            out,
            vec![a],
            Some(Box::new(move |inp, _, g| {
                vec![zip_map(g, inp[0], |gv, a| if a > lo && a < hi { gv } else { T::zero() })]
            })),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let o = out.row_mut(r);
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                o[j] = e;
                sum = sum + e;
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(
            "softmax",
            out,
            vec![a],
            Some(Box::new(|_, out, g| {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for j in 0..y.len() {
                        dot = dot + gr[j] * y[j];
                    }
                    let d = da.row_mut(r);
                    for j in 0..y.len() {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![da]
            })),
        )
    }

    /// Per-row Euclidean norm, m×n → m×1. Zero rows get zero gradient.
    pub fn l2_norm_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            let n = va.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
            out.set(r, 0, n);
        }
        self.push(
            "l2_norm",
            out,
            vec![a],
            Some(Box::new(|inp, out, g| {
                let a = inp[0];
                let mut da = Tensor::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let n = out.get(r, 0);
                    if n == T::zero() {
                        continue;
                    }
                    let gv = g.get(r, 0);
                    let arow = a.row(r);
                    let d = da.row_mut(r);
                    for j in 0..arow.len() {
                        d[j] = gv * arow[j] / n;
                    }
                }
                vec![da]
            })),
        )
    }

    /// Scale each row to unit norm; zero rows stay zero (and get zero gradient).
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let n = out.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                for v in out.row_mut(r) {
                    *v = *v / n;
                }
            }
        }
        self.push(
            "normalize_rows",
            out,
            vec![a],
            Some(Box::new(|inp, out, g| {
                let a = inp[0];
                let mut da = Tensor::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let n = a.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for j in 0..y.len() {
                        dot = dot + gr[j] * y[j];
                    }
                    let d = da.row_mut(r);
                    for j in 0..y.len() {
                        d[j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                vec![da]
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let s = self.value(a).data().iter().cloned().sum::<T>();
        let shape = self.value(a).shape();
        self.push(
            "sum",
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![Tensor::full(shape[0], shape[1], g.item())]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(TapeError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let n = T::from_f64(va.len() as f64);
        let s = va.data().iter().cloned().sum::<T>() / n;
        let shape = va.shape();
        self.push(
            "mean",
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![Tensor::full(shape[0], shape[1], g.item() / n)]
            })),
        )
    }

    /// Row-wise layer normalization with population variance: (x−μ)/√(σ²+ε).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: T) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(TapeError::Invalid { op: "layer_norm", msg: "zero-width rows".into() });
        }
        let w = T::from_f64(va.cols() as f64);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mu = row.iter().cloned().sum::<T>() / w;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / w;
            let sd = (var + eps).sqrt();
            let o = out.row_mut(r);
            for j in 0..row.len() {
                o[j] = (row[j] - mu) / sd;
            }
        }
        self.push(
            "layer_norm",
            out,
            vec![a],
            Some(Box::new(move |inp, out, g| {
                let a = inp[0];
                let mut da = Tensor::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let mu = row.iter().cloned().sum::<T>() / w;
                    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / w;
                    let sd = (var + eps).sqrt();
                    let xh = out.row(r);
                    let gr = g.row(r);
                    let gmean = gr.iter().cloned().sum::<T>() / w;
                    let mut gx = T::zero();
                    for j in 0..xh.len() {
                        gx = gx + gr[j] * xh[j];
                    }
                    gx = gx / w;
                    let d = da.row_mut(r);
                    for j in 0..xh.len() {
                        d[j] = (gr[j] - gmean - xh[j] * gx) / sd;
                    }
                }
                vec![da]
            })),
        )
    }

    /// Select rows by index; duplicates allowed, adjoints accumulate.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(TapeError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} rows", va.rows()),
            });
        }
        let mut out = Tensor::zeros(indices.len(), va.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(va.row(i));
        }
        let idx = indices.to_vec();
        let src_rows = va.rows();
        self.push(
            "gather",
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                let mut da = Tensor::zeros(src_rows, g.cols());
                for (r, &i) in idx.iter().enumerate() {
                    let grow = g.row(r);
                    let d = da.row_mut(i);
                    for j in 0..grow.len() {
                        d[j] = d[j] + grow[j];
                    }
                }
                vec![da]
            })),
        )
    }

    /// Entries where `keep` is false are replaced by `fill`; gradient flows
    /// only through kept entries.
    pub fn masked_fill(&mut self, a: NodeId, mask: &Mask, fill: T) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if mask.rows != va.rows() || mask.cols != va.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "masked_fill",
                lhs: va.shape().to_vec(),
                rhs: vec![mask.rows, mask.cols],
            });
        }
        let mut out = va.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&mask.keep) {
            if !k {
                *v = fill;
            }
        }
        let keep = mask.keep.clone();
        self.push(
            "masked_fill",
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                let mut da = g.clone();
                for (v, &k) in da.data_mut().iter_mut().zip(&keep) {
                    if !k {
                        *v = T::zero();
                    }
                }
                vec![da]
            })),
        )
    }

    /// Depthwise 2-D convolution over an S×S grid of D-channel tokens stored
    /// as an S²×D matrix; odd square kernel, zero same-padding. Kernel weights
    /// are D×k² (one k×k filter per channel).
    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, s: usize, k: usize) -> Result<NodeId, TapeError> {
        let (vx, vw) = (self.value(x), self.value(w));
        if k % 2 == 0 || k == 0 {
            return Err(TapeError::Invalid { op: "depthwise_conv2d", msg: format!("kernel size {k} must be odd") });
        }
        if vx.rows() != s * s {
            return Err(TapeError::Invalid {
                op: "depthwise_conv2d",
                msg: format!("{} tokens != {s}x{s} grid", vx.rows()),
            });
        }
        if vw.rows() != vx.cols() || vw.cols() != k * k {
            return shape_err("depthwise_conv2d", vx, vw);
        }
        let d = vx.cols();
        let h = (k / 2) as isize;
        let conv = move |inp: &Tensor<T>, ker: &Tensor<T>| -> Tensor<T> {
            let mut out = Tensor::zeros(s * s, d);
            for gy in 0..s as isize {
                for gx in 0..s as isize {
                    let opos = (gy as usize) * s + gx as usize;
                    for dy in -h..=h {
                        let iy = gy + dy;
                        if iy < 0 || iy >= s as isize {
                            continue;
                        }
                        for dx in -h..=h {
                            let ix = gx + dx;
                            if ix < 0 || ix >= s as isize {
                                continue;
                            }
                            let ipos = (iy as usize) * s + ix as usize;
                            let kidx = ((dy + h) as usize) * k + (dx + h) as usize;
                            let irow = inp.row(ipos);
                            let orow = &mut out.data_mut()[opos * d..(opos + 1) * d];
                            for c in 0..d {
                                orow[c] = orow[c] + ker.get(c, kidx) * irow[c];
                            }
                        }
                    }
                }
            }
            out
        };
        let out = conv(vx, vw);
        self.push(
            "depthwise_conv2d",
            out,
            vec![x, w],
            Some(Box::new(move |inp, _, g| {
                let (x, ker) = (inp[0], inp[1]);
                // dX: correlate upstream grad with the flipped kernel.
                let mut flipped = Tensor::zeros(ker.rows(), ker.cols());
                for c in 0..ker.rows() {
                    for i in 0..k * k {
                        flipped.set(c, k * k - 1 - i, ker.get(c, i));
                    }
                }
                let dx = conv(g, &flipped);
                // dW: accumulate input×grad over all positions.
                let mut dw = Tensor::zeros(ker.rows(), ker.cols());
                for gy in 0..s as isize {
                    for gxp in 0..s as isize {
                        let opos = (gy as usize) * s + gxp as usize;
                        let grow = g.row(opos);
                        for dy in -h..=h {
                            let iy = gy + dy;
                            if iy < 0 || iy >= s as isize {
                                continue;
                            }
                            for dxo in -h..=h {
                                let ix = gxp + dxo;
                                if ix < 0 || ix >= s as isize {
                                    continue;
                                }
                                let ipos = (iy as usize) * s + ix as usize;
                                let kidx = ((dy + h) as usize) * k + (dxo + h) as usize;
                                let irow = x.row(ipos);
                                for c in 0..d {
                                    let cur = dw.get(c, kidx);
                                    dw.set(c, kidx, cur + irow[c] * grow[c]);
                                }
                            }
                        }
                    }
                }
                vec![dx, dw]
            })),
        )
    }

    /// Inverted dropout. Identity in eval mode; in train mode the mask is a
    /// pure function of (graph seed, call counter).
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId, TapeError> {
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TapeError::Invalid { op: "dropout", msg: format!("rate {p} outside [0,1)") });
        }
        self.dropout_counter += 1;
        let mut rng = counter_rng(self.dropout_seed, self.dropout_counter);
        let scale = T::from_f64(1.0 / (1.0 - p));
        let va = self.value(a);
        let factors: Vec<T> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = va.data().iter().zip(&factors).map(|(&x, &f)| x * f).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(
            "dropout",
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                let data = g.data().iter().zip(&factors).map(|(&x, &f)| x * f).collect();
                vec![Tensor::from_vec(g.rows(), g.cols(), data)]
            })),
        )
    }

    /// Reset the dropout call counter (start of a new deterministic pass).
    pub fn reset_dropout_counter(&mut self) {
        self.dropout_counter = 0;
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(TapeError::Invalid {
                op: "slice_cols",
                msg: format!("cols {}..{} out of range for width {}", start, start + len, va.cols()),
            });
        }
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let total = va.cols();
        self.push(
            "slice_cols",
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                let mut da = Tensor::zeros(g.rows(), total);
                for r in 0..g.rows() {
                    da.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![da]
            })),
        )
    }

    /// Vertical concatenation; every input must share the column count
    /// (zero-row inputs are allowed).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat_rows", msg: "no inputs".into() });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return shape_err("concat_rows", self.value(parts[0]), v);
            }
            rows += v.rows();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        let mut ranges = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            for r in 0..v.rows() {
                out.row_mut(at + r).copy_from_slice(v.row(r));
            }
            ranges.push((at, v.rows()));
            at += v.rows();
        }
        self.push(
            "concat_rows",
            out,
            parts.to_vec(),
            Some(Box::new(move |_, _, g| {
                ranges
                    .iter()
                    .map(|&(start, n)| {
                        let mut d = Tensor::zeros(n, g.cols());
                        for r in 0..n {
                            d.row_mut(r).copy_from_slice(g.row(start + r));
                        }
                        d
                    })
                    .collect()
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]), v);
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        let mut ranges = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
            }
            ranges.push((at, v.cols()));
            at += v.cols();
        }
        self.push(
            "concat_cols",
            out,
            parts.to_vec(),
            Some(Box::new(move |_, _, g| {
                ranges
                    .iter()
                    .map(|&(start, w)| {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[start..start + w]);
                        }
                        d
                    })
                    .collect()
            })),
        )
    }

    /// Accumulate adjoints from a scalar output back to every reachable node.
    pub fn backward(&self, out: NodeId) -> Result<Grads<T>, TapeError> {
        let vo = self.value(out);
        if vo.shape() != [1, 1] {
            return Err(TapeError::Invalid {
                op: "backward",
                msg: format!("output must be 1x1, got {:?}", vo.shape()),
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=out.0).rev() {
            let Some(g) = slots[i].clone() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = back(&inputs, &node.value, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, d) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(d.shape(), self.nodes[p.0].value.shape(), "adjoint shape mismatch at node {}", p.0);
                match &mut slots[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(Grads { slots })
    }
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Large finite logit used to mask softmax entries; exp(x - max) underflows
/// to exactly +0 so off-selection weights are exactly zero while all stored
/// values stay finite.
pub fn mask_fill_value<T: Real>() -> T {
    T::from_f64(-1e30)
}
