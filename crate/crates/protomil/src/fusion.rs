//! Cross-modal gated-attention aggregation: tanh×sigmoid gate scores over the
//! stacked prototype rows, softmax fusion weights, and the weighted-sum bag
//! representation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Graph, NodeId, TapeError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttentionParams<T: Real> {
    /// D′×D tanh branch.
    pub w_a: Tensor<T>,
    /// D′×D sigmoid gate branch.
    pub w_b: Tensor<T>,
    /// D′×1 score projection.
    pub w_c: Tensor<T>,
    pub dropout_p: f64,
}

impl<T: Real> GatedAttentionParams<T> {
    /// Fan-in-scaled uniform init; the gate has no bias terms.
    pub fn init(d: usize, d_attn: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect(),
            )
        };
        GatedAttentionParams {
            w_a: mat(rng, d_attn, d, d),
            w_b: mat(rng, d_attn, d, d),
            w_c: mat(rng, d_attn, 1, d_attn),
            dropout_p,
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w_a"), &self.w_a);
        f(format!("{prefix}.w_b"), &self.w_b);
        f(format!("{prefix}.w_c"), &self.w_c);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w_a"), &mut self.w_a);
        f(format!("{prefix}.w_b"), &mut self.w_b);
        f(format!("{prefix}.w_c"), &mut self.w_c);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, ids: &mut Vec<NodeId>) -> Result<BoundFusion, TapeError> {
        let reg = |g: &mut Graph<T>, t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let w_a = reg(g, &self.w_a)?;
        let w_b = reg(g, &self.w_b)?;
        let w_c = reg(g, &self.w_c)?;
        ids.extend([w_a, w_b, w_c]);
        Ok(BoundFusion { w_a, w_b, w_c, dropout_p: self.dropout_p })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFusion {
    pub w_a: NodeId,
    pub w_b: NodeId,
    pub w_c: NodeId,
    pub dropout_p: f64,
}

/// Vertical concatenation of the modality feature sets, histology rows first.
/// Zero-row members are allowed (single-modality ablations).
pub fn stack<T: Real>(g: &mut Graph<T>, parts: &[NodeId]) -> Result<NodeId, TapeError> {
    let nonempty: Vec<NodeId> = parts.iter().copied().filter(|&p| g.value(p).rows() > 0).collect();
    if nonempty.is_empty() {
        return Err(TapeError::Invalid { op: "stack", msg: "no rows to fuse".into() });
    }
    if nonempty.len() == 1 {
        return Ok(nonempty[0]);
    }
    g.concat_rows(&nonempty)
}

/// s_r = w_cᵀ(tanh(W_a h_r) ⊙ σ(W_b h_r)); dropout fires after both
/// activations in train-mode graphs. Returns R×1.
pub fn gate_scores<T: Real>(g: &mut Graph<T>, p: &BoundFusion, h: NodeId) -> Result<NodeId, TapeError> {
    let a = g.matmul_nt(h, p.w_a)?;
    let a = g.tanh(a)?;
    let a = g.dropout(a, p.dropout_p)?;
    let b = g.matmul_nt(h, p.w_b)?;
    let b = g.sigmoid(b)?;
    let b = g.dropout(b, p.dropout_p)?;
    let gated = g.mul(a, b)?;
    g.matmul(gated, p.w_c)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionResult {
    /// 1×R softmax weights.
    pub alphas: NodeId,
    /// 1×D fused representation.
    pub fused: NodeId,
}

/// Gated-attention fusion; `mean_pool` pins the weights to the uniform
/// distribution (the "w/o gated attention" ablation).
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    p: &BoundFusion,
    h: NodeId,
    mean_pool: bool,
) -> Result<FusionResult, TapeError> {
    let r = g.value(h).rows();
    if r == 0 {
        return Err(TapeError::Invalid { op: "fuse", msg: "empty candidate pool".into() });
    }
    let alphas = if mean_pool {
        g.constant(Tensor::full(1, r, T::from_f64(1.0 / r as f64)))?
    } else {
        let scores = gate_scores(g, p, h)?;
        let row = g.transpose(scores)?;
        g.softmax_rows(row)?
    };
    let fused = g.matmul(alphas, h)?;
    Ok(FusionResult { alphas, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn bind(g: &mut Graph<f64>, p: &GatedAttentionParams<f64>) -> BoundFusion {
        let mut ids = Vec::new();
        p.bind(g, false, &mut ids).unwrap()
    }

    #[test]
    fn stack_orders_and_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::from_vec(1, 2, vec![3.0, 4.0])).unwrap();
        let s = stack(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
        // unstack = slicing the row ranges back out
        assert_eq!(g.value(s).row(0), g.value(a).row(0));
        assert_eq!(g.value(s).row(1), g.value(b).row(0));
        // single-modality: stacking with an empty pool is the identity
        let empty = g.constant(Tensor::zeros(0, 2)).unwrap();
        let only = stack(&mut g, &[a, empty]).unwrap();
        assert_eq!(only, a);
        assert!(stack(&mut g, &[empty]).is_err());
    }

    #[test]
    fn zero_tanh_branch_annihilates_scores() {
        let mut rng = stream_rng(40, "gate");
        let mut p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        p.w_a = Tensor::zeros(2, 3);
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let h = g.constant(rand_mat(&mut rng, 4, 3)).unwrap();
        let s = gate_scores(&mut g, &b, h).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_rows_get_equal_scores() {
        let mut rng = stream_rng(41, "gate-dup");
        let p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(rng.sample_iter(rand::distributions::Uniform::new(-1.0, 1.0)).take(3));
        data.extend(row.clone());
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let h = g.constant(Tensor::from_vec(3, 3, data)).unwrap();
        let s = gate_scores(&mut g, &b, h).unwrap();
        assert_eq!(g.value(s).get(0, 0), g.value(s).get(2, 0));
    }

    #[test]
    fn hand_example_scalar_gate() {
        let p = GatedAttentionParams::<f64> {
            w_a: Tensor::from_vec(1, 1, vec![1.0]),
            w_b: Tensor::from_vec(1, 1, vec![0.0]),
            w_c: Tensor::from_vec(1, 1, vec![1.0]),
            dropout_p: 0.25,
        };
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let h = g.constant(Tensor::from_vec(1, 1, vec![1.0])).unwrap();
        let s = gate_scores(&mut g, &b, h).unwrap();
        let expect = 1.0f64.tanh() * 0.5;
        assert!((g.value(s).item() - expect).abs() < 1e-12);
        assert!((g.value(s).item() - 0.38080).abs() < 1e-5);
    }

    #[test]
    fn equal_scores_mean_uniform_alphas() {
        let mut rng = stream_rng(42, "fuse");
        let mut p = GatedAttentionParams::<f64>::init(2, 2, 0.25, &mut rng);
        p.w_a = Tensor::zeros(2, 2); // all scores zero
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let h = g.constant(Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0])).unwrap();
        let out = fuse(&mut g, &b, h, false).unwrap();
        assert_eq!(g.value(out.alphas).data(), &[0.5, 0.5]);
        assert_eq!(g.value(out.fused).data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_row_is_passed_through() {
        let mut rng = stream_rng(43, "fuse1");
        let p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let row = rand_mat(&mut rng, 1, 3);
        let h = g.constant(row.clone()).unwrap();
        let out = fuse(&mut g, &b, h, false).unwrap();
        assert_eq!(g.value(out.alphas).data(), &[1.0]);
        assert_eq!(g.value(out.fused).data(), row.data());
    }

    #[test]
    fn alphas_invariant_to_score_shift() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_vec(1, 4, vec![0.2, -1.0, 0.7, 0.0])).unwrap();
        let shifted = g.add_scalar(s, 13.5).unwrap();
        let a1 = g.softmax_rows(s).unwrap();
        let a2 = g.softmax_rows(shifted).unwrap();
        assert!(g.value(a1).max_abs_diff(g.value(a2)) < 1e-12);
    }

    #[test]
    fn fused_is_bounded_by_column_ranges() {
        let mut rng = stream_rng(44, "fuse-bounds");
        let p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        let h = rand_mat(&mut rng, 5, 3);
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let hid = g.constant(h.clone()).unwrap();
        let out = fuse(&mut g, &b, hid, false).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|r| h.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = g.value(out.fused).get(0, c);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn mean_pool_matches_fuse_on_identical_rows() {
        let mut rng = stream_rng(45, "fuse-mean");
        let p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend(row.clone());
        }
        let h = Tensor::from_vec(4, 3, data);
        let mut g = Graph::<f64>::new();
        let b = bind(&mut g, &p);
        let hid = g.constant(h).unwrap();
        let gated = fuse(&mut g, &b, hid, false).unwrap();
        let pooled = fuse(&mut g, &b, hid, true).unwrap();
        assert_eq!(g.value(gated.fused).data(), g.value(pooled.fused).data());
        assert_eq!(g.value(gated.alphas).data(), g.value(pooled.alphas).data());
    }

    #[test]
    fn fuse_grad_check() {
        let mut rng = stream_rng(46, "fuse-grad");
        let p = GatedAttentionParams::<f64>::init(3, 2, 0.25, &mut rng);
        let h = rand_mat(&mut rng, 4, 3);
        let c = rand_mat(&mut rng, 1, 3);
        let mut params = Vec::new();
        p.for_each("fusion", &mut |n, t| params.push((n, t.clone())));
        params.push(("h".to_string(), h));
        let report = grad_check(
            |g, ids| {
                let b = BoundFusion { w_a: ids[0], w_b: ids[1], w_c: ids[2], dropout_p: 0.25 };
                let out = fuse(g, &b, ids[3], false)?;
                let cc = g.constant(c.clone())?;
                let prod = g.mul(out.fused, cc)?;
                g.sum_all(prod)
            },
            &params,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "worst {:?}", report.worst().map(|w| (w.name.clone(), w.max_rel_err)));
    }
}
