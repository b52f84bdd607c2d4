//! Per-modality task-guided prototype expert: cosine query-key scoring,
//! dynamic top-k sparse selection, masked-softmax aggregation over the
//! original spatial features, the out-of-band EMA bank update, and the
//! prototype diversity penalty.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::matio::{self, FileError};
use crate::tape::{mask_fill_value, Graph, Mask, NodeId, TapeError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopkStrategy {
    /// k_im = max(1, min(k_min, ⌊N/K⌋)).
    Hardcode,
    /// k_im = max(1, ⌊p·N/K⌋), capped at N.
    Proportion(f64),
}

/// Count of instances each prototype keeps; clamped to ≥ 1 so tiny bags
/// (N < K) remain trainable.
pub fn topk_count(n: usize, k: usize, k_min: usize) -> usize {
    assert!(n >= 1 && k >= 1);
    (k_min.min(n / k)).max(1)
}

pub fn topk_count_with(strategy: TopkStrategy, n: usize, k: usize, k_min: usize) -> usize {
    match strategy {
        TopkStrategy::Hardcode => topk_count(n, k, k_min),
        TopkStrategy::Proportion(p) => {
            let raw = (p * n as f64 / k as f64).floor() as usize;
            raw.clamp(1, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T: Real> {
    /// K×d learnable prototype rows.
    pub prototypes: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub ema_beta: f64,
    pub logit_scale: f64,
}

/// Running sum of prototype-conditioned feature sets over the bags of one
/// epoch; single-writer, reset by `ema_update`.
#[derive(Debug, Clone)]
pub struct EmaAccum<T: Real> {
    pub sum: Tensor<T>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaStatus {
    Updated,
    /// No bags accumulated this epoch; bank left untouched.
    SkippedEmpty,
}

#[derive(Debug, Clone)]
pub struct AttentionRecord<T: Real> {
    /// K×N cosine scores.
    pub sims: Tensor<T>,
    /// Per-prototype selected instance indices, ascending.
    pub selected: Vec<Vec<usize>>,
    /// K×N normalized weights, zero off-selection.
    pub weights: Tensor<T>,
    pub k_im: usize,
}

impl<T: Real> PrototypeBank<T> {
    /// Prototypes start as i.i.d. unit Gaussian rows scaled to unit norm.
    pub fn init(k: usize, d: usize, ema_beta: f64, logit_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(k >= 1 && d >= 1);
        assert!((0.0..1.0).contains(&ema_beta) && ema_beta > 0.0, "ema_beta must be in (0,1)");
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut prototypes = Tensor::zeros(k, d);
        for r in 0..k {
            let raw: Vec<f64> = (0..d).map(|_| unit.sample(rng)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (j, v) in raw.iter().enumerate() {
                prototypes.set(r, j, T::from_f64(v / norm));
            }
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mat = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(d, d, (0..d * d).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect())
        };
        let w_q = mat(rng);
        let w_k = mat(rng);
        PrototypeBank { prototypes, w_q, w_k, ema_beta, logit_scale }
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn d(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn new_accum(&self) -> EmaAccum<T> {
        EmaAccum { sum: Tensor::zeros(self.k(), self.d()), count: 0 }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.prototypes"), &self.prototypes);
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.prototypes"), &mut self.prototypes);
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, ids: &mut Vec<NodeId>) -> Result<BoundBank, TapeError> {
        let reg = |g: &mut Graph<T>, t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let prototypes = reg(g, &self.prototypes)?;
        let w_q = reg(g, &self.w_q)?;
        let w_k = reg(g, &self.w_k)?;
        ids.extend([prototypes, w_q, w_k]);
        Ok(BoundBank { prototypes, w_q, w_k, logit_scale: self.logit_scale })
    }

    /// Serialize: `<name>.proto.mat`, `<name>.wq.mat`, `<name>.wk.mat` plus a
    /// flat key:value state file.
    pub fn save(&self, dir: &Path, name: &str, k_min: usize, seed: u64) -> Result<(), FileError> {
        matio::write_mat(&dir.join(format!("{name}.proto.mat")), &self.prototypes)?;
        matio::write_mat(&dir.join(format!("{name}.wq.mat")), &self.w_q)?;
        matio::write_mat(&dir.join(format!("{name}.wk.mat")), &self.w_k)?;
        matio::write_kv(
            &dir.join(format!("{name}.state.txt")),
            &[
                ("ema_beta".to_string(), self.ema_beta.to_string()),
                ("logit_scale".to_string(), self.logit_scale.to_string()),
                ("k_min".to_string(), k_min.to_string()),
                ("seed".to_string(), seed.to_string()),
            ],
        )
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self, FileError> {
        let prototypes = matio::read_mat(&dir.join(format!("{name}.proto.mat")))?;
        let w_q = matio::read_mat(&dir.join(format!("{name}.wq.mat")))?;
        let w_k = matio::read_mat(&dir.join(format!("{name}.wk.mat")))?;
        let mut ema_beta = 0.95;
        let mut logit_scale = 1.0;
        for (k, v) in matio::read_kv(&dir.join(format!("{name}.state.txt")))? {
            match k.as_str() {
                "ema_beta" => ema_beta = v.parse().unwrap_or(0.95),
                "logit_scale" => logit_scale = v.parse().unwrap_or(1.0),
                _ => {}
            }
        }
        Ok(PrototypeBank { prototypes, w_q, w_k, ema_beta, logit_scale })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBank {
    pub prototypes: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub logit_scale: f64,
}

/// sims[k][j] = cos(P_k·W_Q, H̃_j·W_K); zero-norm projections score 0.
pub fn cosine_scores<T: Real>(g: &mut Graph<T>, bank: &BoundBank, h: NodeId) -> Result<NodeId, TapeError> {
    let q = g.matmul(bank.prototypes, bank.w_q)?;
    let k = g.matmul(h, bank.w_k)?;
    let qn = g.normalize_rows(q)?;
    let kn = g.normalize_rows(k)?;
    g.matmul_nt(qn, kn)
}

/// Top-k per row on the score values; ties broken by lower instance index.
pub fn topk_mask<T: Real>(sims: &Tensor<T>, k_im: usize) -> (Mask, Vec<Vec<usize>>) {
    let (k, n) = (sims.rows(), sims.cols());
    assert!(k_im >= 1 && k_im <= n, "k_im {k_im} outside 1..={n}");
    let mut mask = Mask::all_false(k, n);
    let mut selected = Vec::with_capacity(k);
    for r in 0..k {
        let row = sims.row(r);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let mut sel: Vec<usize> = order[..k_im].to_vec();
        sel.sort_unstable();
        for &j in &sel {
            mask.set(r, j, true);
        }
        selected.push(sel);
    }
    (mask, selected)
}

/// Softmax over the selected entries only; exact zeros elsewhere.
pub fn attend_with_mask<T: Real>(
    g: &mut Graph<T>,
    sims: NodeId,
    mask: &Mask,
    logit_scale: f64,
) -> Result<NodeId, TapeError> {
    let scaled = if logit_scale == 1.0 {
        sims
    } else {
        g.mul_scalar(sims, T::from_f64(logit_scale))?
    };
    let filled = g.masked_fill(scaled, mask, mask_fill_value())?;
    g.softmax_rows(filled)
}

pub fn sparse_attend<T: Real>(
    g: &mut Graph<T>,
    sims: NodeId,
    k_im: usize,
    logit_scale: f64,
) -> Result<(NodeId, Vec<Vec<usize>>), TapeError> {
    let (mask, selected) = topk_mask(g.value(sims), k_im);
    let weights = attend_with_mask(g, sims, &mask, logit_scale)?;
    Ok((weights, selected))
}

/// P̃ = weights · H̃ — the aggregation runs over the un-projected spatial
/// features, not the attention keys.
pub fn condition<T: Real>(g: &mut Graph<T>, weights: NodeId, h: NodeId) -> Result<NodeId, TapeError> {
    g.matmul(weights, h)
}

/// Full prototype expert for one bag. When `accum` is given (training), the
/// conditioned feature set is added into the epoch accumulator.
pub fn forward_bag<T: Real>(
    g: &mut Graph<T>,
    bank: &BoundBank,
    h: NodeId,
    k_im: usize,
    accum: Option<&mut EmaAccum<T>>,
) -> Result<(NodeId, AttentionRecord<T>), TapeError> {
    if g.value(h).rows() == 0 {
        return Err(TapeError::Invalid { op: "forward_bag", msg: "empty bag".into() });
    }
    let sims = cosine_scores(g, bank, h)?;
    let (weights, selected) = sparse_attend(g, sims, k_im, bank.logit_scale)?;
    let ptilde = condition(g, weights, h)?;
    if let Some(acc) = accum {
        let v = g.value(ptilde);
        for (a, &b) in acc.sum.data_mut().iter_mut().zip(v.data()) {
            *a = *a + b;
        }
        acc.count += 1;
    }
    let record = AttentionRecord {
        sims: g.value(sims).clone(),
        selected,
        weights: g.value(weights).clone(),
        k_im,
    };
    Ok((ptilde, record))
}

/// P ← β·P + (1−β)·mean of accumulated conditioned features; accumulator is
/// reset. Gradient never flows through this path.
pub fn ema_update<T: Real>(bank: &mut PrototypeBank<T>, accum: &mut EmaAccum<T>) -> EmaStatus {
    if accum.count == 0 {
        return EmaStatus::SkippedEmpty;
    }
    let beta = T::from_f64(bank.ema_beta);
    let one_minus = T::one() - beta;
    let cnt = T::from_f64(accum.count as f64);
    for (p, &s) in bank.prototypes.data_mut().iter_mut().zip(accum.sum.data()) {
        *p = beta * *p + one_minus * (s / cnt);
    }
    accum.sum = Tensor::zeros(bank.prototypes.rows(), bank.prototypes.cols());
    accum.count = 0;
    EmaStatus::Updated
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityForm {
    /// (1/K²)·‖G − I‖²_F over the row-normalized Gram matrix.
    Supp,
    /// Σ_{u≠v} G_uv² (unnormalized off-diagonal sum).
    Main,
}

/// Diversity penalty on a prototype matrix node. Zero-norm prototype rows are
/// rejected: the bank is degenerate.
pub fn diversity_loss<T: Real>(
    g: &mut Graph<T>,
    prototypes: NodeId,
    form: DiversityForm,
) -> Result<NodeId, TapeError> {
    let p = g.value(prototypes);
    let k = p.rows();
    for r in 0..k {
        if p.row(r).iter().all(|&x| x == T::zero()) {
            return Err(TapeError::Invalid {
                op: "diversity_loss",
                msg: format!("prototype row {r} has zero norm"),
            });
        }
    }
    let phat = g.normalize_rows(prototypes)?;
    let gram = g.matmul_nt(phat, phat)?;
    let eye = g.constant(Tensor::eye(k))?;
    let diff = g.sub(gram, eye)?;
    let sq = g.mul(diff, diff)?;
    match form {
        DiversityForm::Supp => {
            let total = g.sum_all(sq)?;
            g.mul_scalar(total, T::from_f64(1.0 / (k * k) as f64))
        }
        DiversityForm::Main => {
            let mut hollow = Tensor::full(k, k, T::one());
            for i in 0..k {
                hollow.set(i, i, T::zero());
            }
            let hollow = g.constant(hollow)?;
            let off = g.mul(sq, hollow)?;
            g.sum_all(off)
        }
    }
}

/// Value-level convenience used by reporting paths.
pub fn diversity_loss_value<T: Real>(p: &Tensor<T>, form: DiversityForm) -> Result<T, TapeError> {
    let mut g = Graph::new();
    let pid = g.constant(p.clone())?;
    let l = diversity_loss(&mut g, pid, form)?;
    Ok(g.value(l).item())
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

    fn identity_bank(k: usize, d: usize, p: Tensor<f64>) -> PrototypeBank<f64> {
        assert_eq!(p.shape(), [k, d]);
        PrototypeBank { prototypes: p, w_q: Tensor::eye(d), w_k: Tensor::eye(d), ema_beta: 0.95, logit_scale: 1.0 }
    }

    #[test]
    fn topk_count_formula() {
        assert_eq!(topk_count(100, 12, 60), 8);
        assert_eq!(topk_count(1000, 12, 60), 60);
        assert_eq!(topk_count(5, 8, 60), 1); // floor(5/8)=0 clamped
    }

    #[test]
    fn topk_proportion_strategy() {
        assert_eq!(topk_count_with(TopkStrategy::Proportion(0.5), 100, 10, 60), 5);
        assert_eq!(topk_count_with(TopkStrategy::Proportion(0.01), 10, 5, 60), 1);
        assert_eq!(topk_count_with(TopkStrategy::Hardcode, 100, 12, 60), 8);
    }

    #[test]
    fn cosine_scores_basics() {
        // parallel → 1, orthogonal → 0
        let bank = identity_bank(2, 2, Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]));
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let h = g.constant(Tensor::from_vec(1, 2, vec![5.0, 0.0])).unwrap();
        let sims = cosine_scores(&mut g, &b, h).unwrap();
        assert!((g.value(sims).get(0, 0) - 1.0).abs() < 1e-12);
        assert!(g.value(sims).get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn matching_row_is_max_by_cauchy_schwarz() {
        let mut rng = stream_rng(21, "cos");
        let h = rand_mat(&mut rng, 6, 4);
        let p = Tensor::from_vec(1, 4, h.row(2).to_vec());
        let bank = identity_bank(1, 4, p);
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let hid = g.constant(h).unwrap();
        let sims = cosine_scores(&mut g, &b, hid).unwrap();
        let row = g.value(sims).row(0);
        assert!((row[2] - 1.0).abs() < 1e-12);
        for (j, &v) in row.iter().enumerate() {
            assert!(v <= row[2] + 1e-12, "entry {j}");
        }
    }

    #[test]
    fn zero_norm_rows_score_zero() {
        let bank = identity_bank(1, 2, Tensor::from_vec(1, 2, vec![1.0, 0.0]));
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let h = g.constant(Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0])).unwrap();
        let sims = cosine_scores(&mut g, &b, h).unwrap();
        assert_eq!(g.value(sims).get(0, 0), 0.0);
    }

    #[test]
    fn sparse_attend_worked_example() {
        let mut g = Graph::<f64>::new();
        let sims = g.constant(Tensor::from_vec(1, 3, vec![2.0, 1.0, 0.0])).unwrap();
        let (w, sel) = sparse_attend(&mut g, sims, 2, 1.0).unwrap();
        let row = g.value(w).row(0);
        let e2 = 2.0f64.exp();
        let e1 = 1.0f64.exp();
        assert!((row[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((row[1] - e1 / (e2 + e1)).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
        assert_eq!(sel[0], vec![0, 1]);
        assert!((row[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn sparse_attend_uniform_and_onehot() {
        let mut g = Graph::<f64>::new();
        let equal = g.constant(Tensor::from_vec(1, 4, vec![0.3; 4])).unwrap();
        let (w, _) = sparse_attend(&mut g, equal, 4, 1.0).unwrap();
        assert!(g.value(w).row(0).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let scores = g.constant(Tensor::from_vec(1, 3, vec![0.1, 0.9, 0.5])).unwrap();
        let (w1, sel) = sparse_attend(&mut g, scores, 1, 1.0).unwrap();
        assert_eq!(g.value(w1).row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(sel[0], vec![1]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let sims = Tensor::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]);
        let (_, sel) = topk_mask(&sims, 2);
        assert_eq!(sel[0], vec![0, 1]);
    }

    #[test]
    fn condition_examples() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.0])).unwrap();
        let h = g.constant(Tensor::from_vec(3, 2, vec![2.0, 0.0, 0.0, 2.0, 9.0, 9.0])).unwrap();
        let p = condition(&mut g, w, h).unwrap();
        assert_eq!(g.value(p).row(0), &[1.0, 1.0]);

        let onehot = g.constant(Tensor::from_vec(1, 3, vec![0.0, 0.0, 1.0])).unwrap();
        let p2 = condition(&mut g, onehot, h).unwrap();
        assert_eq!(g.value(p2).row(0), &[9.0, 9.0]);
    }

    #[test]
    fn conditioned_rows_are_convex_combinations() {
        let mut rng = stream_rng(22, "convex");
        let h = rand_mat(&mut rng, 8, 3);
        let bank = PrototypeBank::init(4, 3, 0.9, 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let hid = g.constant(h.clone()).unwrap();
        let (pt, rec) = forward_bag(&mut g, &b, hid, 3, None).unwrap();
        for (r, sel) in rec.selected.iter().enumerate() {
            for c in 0..3 {
                let vals: Vec<f64> = sel.iter().map(|&j| h.get(j, c)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(pt).get(r, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one_with_support_k() {
        let mut rng = stream_rng(23, "support");
        for _ in 0..20 {
            let n = rng.gen_range(2..30usize);
            let k = rng.gen_range(1..5usize);
            let k_im = rng.gen_range(1..=n);
            let bank = PrototypeBank::init(k, 4, 0.9, 1.0, &mut rng);
            let h = rand_mat(&mut rng, n, 4);
            let mut g = Graph::<f64>::new();
            let mut ids = Vec::new();
            let b = bank.bind(&mut g, false, &mut ids).unwrap();
            let hid = g.constant(h).unwrap();
            let (_, rec) = forward_bag(&mut g, &b, hid, k_im, None).unwrap();
            for r in 0..k {
                let row = rec.weights.row(r);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                let support = row.iter().filter(|&&v| v != 0.0).count();
                assert_eq!(support, k_im);
                assert!(row.iter().all(|&v| v >= 0.0));
                // support is exactly the selected set
                for (j, &v) in row.iter().enumerate() {
                    assert_eq!(v != 0.0, rec.selected[r].contains(&j));
                }
            }
        }
    }

    #[test]
    fn single_instance_single_prototype_is_forced() {
        let mut rng = stream_rng(24, "forced");
        let bank = PrototypeBank::init(1, 3, 0.9, 1.0, &mut rng);
        let h = rand_mat(&mut rng, 1, 3);
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let hid = g.constant(h.clone()).unwrap();
        let (pt, rec) = forward_bag(&mut g, &b, hid, 1, None).unwrap();
        assert_eq!(rec.weights.data(), &[1.0]);
        assert_eq!(g.value(pt).data(), h.data());
    }

    #[test]
    fn permutation_moves_columns_but_not_features() {
        let mut rng = stream_rng(25, "perm");
        let bank = PrototypeBank::init(3, 4, 0.9, 1.0, &mut rng);
        let h = rand_mat(&mut rng, 7, 4);
        let perm = [4usize, 1, 6, 0, 2, 5, 3];
        let hp = Tensor::from_vec(7, 4, perm.iter().flat_map(|&i| h.row(i).to_vec()).collect());
        let run = |hh: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let mut ids = Vec::new();
            let b = bank.bind(&mut g, false, &mut ids).unwrap();
            let hid = g.constant(hh.clone()).unwrap();
            let (pt, rec) = forward_bag(&mut g, &b, hid, 2, None).unwrap();
            (g.value(pt).clone(), rec)
        };
        let (pt_a, rec_a) = run(&h);
        let (pt_b, rec_b) = run(&hp);
        assert!(pt_a.max_abs_diff(&pt_b) < 1e-12);
        for r in 0..3 {
            for (new_col, &old) in perm.iter().enumerate() {
                assert_eq!(rec_a.sims.get(r, old), rec_b.sims.get(r, new_col));
            }
            // selected sets map through the permutation
            let mapped: std::collections::BTreeSet<usize> = rec_b.selected[r]
                .iter()
                .map(|&j| perm[j])
                .collect();
            let orig: std::collections::BTreeSet<usize> = rec_a.selected[r].iter().copied().collect();
            assert_eq!(orig, mapped);
        }
    }

    #[test]
    fn duplicating_instances_with_doubled_k_keeps_features() {
        let mut rng = stream_rng(26, "dup");
        let bank = PrototypeBank::init(2, 3, 0.9, 1.0, &mut rng);
        let h = rand_mat(&mut rng, 6, 3);
        let mut doubled_data = h.data().to_vec();
        doubled_data.extend_from_slice(h.data());
        let h2 = Tensor::from_vec(12, 3, doubled_data);
        let run = |hh: &Tensor<f64>, k_im: usize| {
            let mut g = Graph::<f64>::new();
            let mut ids = Vec::new();
            let b = bank.bind(&mut g, false, &mut ids).unwrap();
            let hid = g.constant(hh.clone()).unwrap();
            let (pt, _) = forward_bag(&mut g, &b, hid, k_im, None).unwrap();
            g.value(pt).clone()
        };
        let single = run(&h, 2);
        let doubled = run(&h2, 4);
        assert!(single.max_abs_diff(&doubled) < 1e-12);
    }

    #[test]
    fn ema_update_examples() {
        // β=0.95, P=1, mean=0 → 0.95
        let mut bank = identity_bank(1, 1, Tensor::from_vec(1, 1, vec![1.0]));
        let mut acc = bank.new_accum();
        acc.count = 1; // sum stays zero → mean 0
        assert_eq!(ema_update(&mut bank, &mut acc), EmaStatus::Updated);
        assert_eq!(bank.prototypes.get(0, 0), 0.95);
        assert_eq!(acc.count, 0);

        // mean == P → fixed point
        let mut bank = identity_bank(1, 2, Tensor::from_vec(1, 2, vec![0.25, -0.5]));
        let mut acc = bank.new_accum();
        acc.sum = Tensor::from_vec(1, 2, vec![0.5, -1.0]);
        acc.count = 2;
        ema_update(&mut bank, &mut acc);
        assert_eq!(bank.prototypes.data(), &[0.25, -0.5]);

        // empty epoch → warning status, bank untouched
        let before = bank.prototypes.clone();
        let mut empty = bank.new_accum();
        assert_eq!(ema_update(&mut bank, &mut empty), EmaStatus::SkippedEmpty);
        assert_eq!(bank.prototypes, before);
    }

    #[test]
    fn ema_contracts_toward_target_by_beta() {
        let mut rng = stream_rng(27, "ema");
        let mut bank = PrototypeBank::init(3, 4, 0.95, 1.0, &mut rng);
        let target = rand_mat(&mut rng, 3, 4);
        let mut dist_prev = {
            let mut d = 0.0;
            for (a, b) in bank.prototypes.data().iter().zip(target.data()) {
                d += (a - b) * (a - b);
            }
            d.sqrt()
        };
        for _ in 0..5 {
            let mut acc = bank.new_accum();
            acc.sum = target.clone();
            acc.count = 1;
            ema_update(&mut bank, &mut acc);
            let mut d = 0.0;
            for (a, b) in bank.prototypes.data().iter().zip(target.data()) {
                d += (a - b) * (a - b);
            }
            let dist = d.sqrt();
            assert!((dist / dist_prev - 0.95).abs() < 1e-12, "ratio {}", dist / dist_prev);
            dist_prev = dist;
        }
    }

    #[test]
    fn ema_stays_between_old_and_mean() {
        let mut rng = stream_rng(28, "ema-bounds");
        let mut bank = PrototypeBank::init(2, 3, 0.8, 1.0, &mut rng);
        let old = bank.prototypes.clone();
        let mean = rand_mat(&mut rng, 2, 3);
        let mut acc = bank.new_accum();
        acc.sum = mean.clone();
        acc.count = 1;
        ema_update(&mut bank, &mut acc);
        for i in 0..6 {
            let (lo, hi) = if old.data()[i] < mean.data()[i] {
                (old.data()[i], mean.data()[i])
            } else {
                (mean.data()[i], old.data()[i])
            };
            let v = bank.prototypes.data()[i];
            assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
    }

    #[test]
    fn diversity_loss_examples() {
        // orthonormal rows → exactly 0
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::eye(3)).unwrap();
        let l = diversity_loss(&mut g, p, DiversityForm::Supp).unwrap();
        assert!(g.value(l).item() < 1e-12);

        // two identical unit rows → 0.5 under the supplement form
        let p2 = g.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        let l2 = diversity_loss(&mut g, p2, DiversityForm::Supp).unwrap();
        assert_eq!(g.value(l2).item(), 0.5);
        // main form differs by K²=4
        let l2m = diversity_loss(&mut g, p2, DiversityForm::Main).unwrap();
        assert_eq!(g.value(l2m).item(), 2.0);

        // K=1 → 0 (diagonal only)
        let p1 = g.constant(Tensor::from_vec(1, 2, vec![0.3, 0.4])).unwrap();
        let l1 = diversity_loss(&mut g, p1, DiversityForm::Supp).unwrap();
        assert!(g.value(l1).item() < 1e-28);

        // zero-norm row rejected
        let pz = g.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(diversity_loss(&mut g, pz, DiversityForm::Supp).is_err());
    }

    #[test]
    fn diversity_zero_iff_orthogonal() {
        let mut rng = stream_rng(29, "div");
        // nonzero whenever two rows are not orthogonal
        let p = rand_mat(&mut rng, 3, 3);
        let v = diversity_loss_value(&p, DiversityForm::Supp).unwrap();
        let mut gram_is_eye = true;
        let mut norm_rows = p.clone();
        for r in 0..3 {
            let n: f64 = p.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, val) in norm_rows.row_mut(r).iter_mut().enumerate() {
                *val = p.get(r, j) / n;
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = norm_rows.row(a).iter().zip(norm_rows.row(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-12 {
                    gram_is_eye = false;
                }
            }
        }
        assert!(!gram_is_eye);
        assert!(v > 1e-12);

        // orthogonal but unnormalized rows still measure 0
        let p = Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, -3.0]);
        assert!(diversity_loss_value(&p, DiversityForm::Supp).unwrap() < 1e-12);
    }

    #[test]
    fn routing_grad_check_with_frozen_topk() {
        let mut rng = stream_rng(30, "proto-grad");
        let bank = PrototypeBank::init(3, 4, 0.9, 1.0, &mut rng);
        let h = rand_mat(&mut rng, 6, 4);
        let c = rand_mat(&mut rng, 3, 4);
        // freeze the index set from the unperturbed scores
        let mask = {
            let mut g = Graph::<f64>::new();
            let mut ids = Vec::new();
            let b = bank.bind(&mut g, false, &mut ids).unwrap();
            let hid = g.constant(h.clone()).unwrap();
            let sims = cosine_scores(&mut g, &b, hid).unwrap();
            topk_mask(g.value(sims), 2).0
        };
        let mut params = Vec::new();
        bank.for_each("bank", &mut |n, t| params.push((n, t.clone())));
        params.push(("h".to_string(), h.clone()));
        let report = grad_check(
            |g, ids| {
                let b = BoundBank { prototypes: ids[0], w_q: ids[1], w_k: ids[2], logit_scale: 1.0 };
                let hid = ids[3];
                let sims = cosine_scores(g, &b, hid)?;
                let w = attend_with_mask(g, sims, &mask, 1.0)?;
                let pt = condition(g, w, hid)?;
                let cc = g.constant(c.clone())?;
                let prod = g.mul(pt, cc)?;
                g.sum_all(prod)
            },
            &params,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "worst {:?}", report.worst().map(|w| (w.name.clone(), w.max_rel_err)));
    }

    #[test]
    fn accumulator_collects_in_train_mode() {
        let mut rng = stream_rng(31, "accum");
        let bank = PrototypeBank::init(2, 3, 0.9, 1.0, &mut rng);
        let mut acc = bank.new_accum();
        let h = rand_mat(&mut rng, 5, 3);
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        let b = bank.bind(&mut g, false, &mut ids).unwrap();
        let hid = g.constant(h).unwrap();
        let (pt, _) = forward_bag(&mut g, &b, hid, 2, Some(&mut acc)).unwrap();
        assert_eq!(acc.count, 1);
        assert_eq!(acc.sum.data(), g.value(pt).data());
    }

    #[test]
    fn bank_round_trips_through_disk() {
        let mut rng = stream_rng(32, "bank-io");
        let bank = PrototypeBank::<f64>::init(3, 4, 0.95, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path(), "hist", 60, 1).unwrap();
        let back = PrototypeBank::<f64>::load(dir.path(), "hist").unwrap();
        assert_eq!(bank, back);
    }
}
