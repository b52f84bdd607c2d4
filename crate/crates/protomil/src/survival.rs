//! Discrete-time survival head: per-bin hazards, the survival curve, the
//! censorship-weighted NLL, the composite training loss, and the
//! concordance index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::SurvivalLabel;
use crate::tape::{Graph, NodeId, TapeError};
use crate::tensor::{Real, Tensor};

/// Probabilities are clipped here before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalHeadParams<T: Real> {
    /// B×D hazard logits projection.
    pub w_out: Tensor<T>,
    /// 1×B bias.
    pub b_out: Tensor<T>,
    pub nll_alpha: f64,
}

impl<T: Real> SurvivalHeadParams<T> {
    pub fn init(d: usize, n_bins: usize, nll_alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!((0.0..=1.0).contains(&nll_alpha));
        let bound = 1.0 / (d as f64).sqrt();
        SurvivalHeadParams {
            w_out: Tensor::from_vec(
                n_bins,
                d,
                (0..n_bins * d).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect(),
            ),
            b_out: Tensor::zeros(1, n_bins),
            nll_alpha,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.w_out.rows()
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w_out"), &self.w_out);
        f(format!("{prefix}.b_out"), &self.b_out);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w_out"), &mut self.w_out);
        f(format!("{prefix}.b_out"), &mut self.b_out);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, ids: &mut Vec<NodeId>) -> Result<BoundHead, TapeError> {
        let reg = |g: &mut Graph<T>, t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let w_out = reg(g, &self.w_out)?;
        let b_out = reg(g, &self.b_out)?;
        ids.extend([w_out, b_out]);
        Ok(BoundHead { w_out, b_out, nll_alpha: self.nll_alpha })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub nll_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalOutput {
    /// Per-bin conditional event probabilities, each in (0,1).
    pub hazards: Vec<f64>,
    /// S_j = Π_{k≤j} (1−h_k); S at index −1 is 1 by convention.
    pub surv: Vec<f64>,
}

impl SurvivalOutput {
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let mut surv = Vec::with_capacity(hazards.len());
        let mut acc = 1.0;
        for &h in &hazards {
            acc *= 1.0 - h;
            surv.push(acc);
        }
        SurvivalOutput { hazards, surv }
    }

    /// S_{j} with the S_{−1} = 1 convention (pass j+1 as `upto`).
    pub fn surv_before(&self, upto: usize) -> f64 {
        if upto == 0 {
            1.0
        } else {
            self.surv[upto - 1]
        }
    }

    /// Cumulative hazard used as the risk scalar for ranking.
    pub fn risk(&self) -> f64 {
        self.hazards.iter().sum()
    }
}

/// hazards = σ(W_out·h + b) on the graph; returns the 1×B hazards node.
pub fn predict_on_graph<T: Real>(g: &mut Graph<T>, head: &BoundHead, fused: NodeId) -> Result<NodeId, TapeError> {
    let logits = g.matmul_nt(fused, head.w_out)?;
    let logits = g.add_row(logits, head.b_out)?;
    g.sigmoid(logits)
}

/// Value-level prediction for evaluation and export paths.
pub fn predict<T: Real>(head: &SurvivalHeadParams<T>, fused: &Tensor<T>) -> SurvivalOutput {
    let logits = fused.matmul(&head.w_out, false, true);
    let hazards: Vec<f64> = logits
        .data()
        .iter()
        .zip(head.b_out.data())
        .map(|(&l, &b)| {
            let x = (l + b).as_f64();
            1.0 / (1.0 + (-x).exp())
        })
        .collect();
    SurvivalOutput::from_hazards(hazards)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Censorship-weighted discrete NLL over a batch:
/// (1−α)·(L_unc + L_cens) + α·L_unc, with per-sample terms
/// −log(S_{y−1}·h_y) (event) and −log(S_y) (censored).
pub fn nll_loss(outputs: &[SurvivalOutput], labels: &[SurvivalLabel], nll_alpha: f64) -> Result<f64, TapeError> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(TapeError::Invalid {
            op: "nll_loss",
            msg: format!("batch of {} outputs vs {} labels", outputs.len(), labels.len()),
        });
    }
    let mut l_unc = 0.0;
    let mut l_cens = 0.0;
    // log S_j as the sum of per-factor logs, clamping each factor — the same
    // arithmetic the tape route uses, so the two stay bit-comparable
    let log_surv_upto = |out: &SurvivalOutput, upto: usize| -> f64 {
        out.hazards[..upto].iter().map(|&h| clamp_prob(1.0 - h).ln()).sum()
    };
    for (out, label) in outputs.iter().zip(labels) {
        let y = label.bin.ok_or_else(|| TapeError::Invalid {
            op: "nll_loss",
            msg: format!("label at time {} has no bin assigned", label.time),
        })?;
        if y >= out.hazards.len() {
            return Err(TapeError::Invalid {
                op: "nll_loss",
                msg: format!("bin {y} out of range for {} hazards", out.hazards.len()),
            });
        }
        if label.censored {
            l_cens -= log_surv_upto(out, y + 1);
        } else {
            l_unc -= log_surv_upto(out, y) + clamp_prob(out.hazards[y]).ln();
        }
    }
    Ok((1.0 - nll_alpha) * (l_unc + l_cens) + nll_alpha * l_unc)
}

/// Same likelihood assembled on the tape for one bag.
pub fn nll_on_graph<T: Real>(
    g: &mut Graph<T>,
    hazards: NodeId,
    bin: usize,
    censored: bool,
    nll_alpha: f64,
) -> Result<NodeId, TapeError> {
    let b = g.value(hazards).cols();
    if bin >= b {
        return Err(TapeError::Invalid { op: "nll", msg: format!("bin {bin} out of range for {b} bins") });
    }
    let lo = T::from_f64(PROB_CLAMP);
    let hi = T::from_f64(1.0 - PROB_CLAMP);
    let h = g.clamp(hazards, lo, hi)?;
    let neg = g.neg(h)?;
    let one_minus = g.add_scalar(neg, T::one())?;
    let one_minus = g.clamp(one_minus, lo, hi)?;
    let log_h = g.log(h)?;
    let log_1mh = g.log(one_minus)?;

    let pick = |g: &mut Graph<T>, v: NodeId, mask: Vec<f64>| -> Result<NodeId, TapeError> {
        let m = g.constant(Tensor::from_f64s(1, b, &mask))?;
        let prod = g.mul(v, m)?;
        g.sum_all(prod)
    };

    let weight_unc = 1.0; // (1−α)+α on the uncensored path
    let weight_cens = 1.0 - nll_alpha;
    if censored {
        // −log S_y = −Σ_{k≤y} log(1−h_k)
        let mut mask = vec![0.0; b];
        for m in mask.iter_mut().take(bin + 1) {
            *m = 1.0;
        }
        let s = pick(g, log_1mh, mask)?;
        g.mul_scalar(s, T::from_f64(-weight_cens))
    } else {
        // −log(S_{y−1}·h_y)
        let mut mask_prefix = vec![0.0; b];
        for m in mask_prefix.iter_mut().take(bin) {
            *m = 1.0;
        }
        let mut mask_bin = vec![0.0; b];
        mask_bin[bin] = 1.0;
        let s_prev = pick(g, log_1mh, mask_prefix)?;
        let h_y = pick(g, log_h, mask_bin)?;
        let total = g.add(s_prev, h_y)?;
        g.mul_scalar(total, T::from_f64(-weight_unc))
    }
}

/// L = L_task + λ_div·(L_div_H + L_div_S).
pub fn composite_loss(nll: f64, div_h: f64, div_s: f64, lambda_div: f64) -> f64 {
    assert!(lambda_div >= 0.0);
    nll + lambda_div * (div_h + div_s)
}

pub fn composite_loss_on_graph<T: Real>(
    g: &mut Graph<T>,
    nll: NodeId,
    div_terms: &[NodeId],
    lambda_div: f64,
) -> Result<NodeId, TapeError> {
    let mut total = nll;
    if lambda_div > 0.0 && !div_terms.is_empty() {
        let mut div_sum = div_terms[0];
        for &d in &div_terms[1..] {
            div_sum = g.add(div_sum, d)?;
        }
        let scaled = g.mul_scalar(div_sum, T::from_f64(lambda_div))?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

#[derive(Debug, thiserror::Error)]
pub enum CIndexError {
    #[error("no comparable pairs (need one uncensored subject with a strictly earlier time)")]
    NoComparablePairs,
    #[error("c_index inputs disagree in length")]
    LengthMismatch,
}

/// Concordance over comparable pairs: (i,j) with time_i < time_j and subject
/// i uncensored. Risk ties count half; censored-censored and equal-time pairs
/// are excluded.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64, CIndexError> {
    if risks.len() != times.len() || risks.len() != censored.len() {
        return Err(CIndexError::LengthMismatch);
    }
    let mut comparable = 0.0;
    let mut concordant = 0.0;
    for i in 0..risks.len() {
        if censored[i] {
            continue;
        }
        for j in 0..risks.len() {
            if i == j || times[i] >= times[j] {
                continue;
            }
            comparable += 1.0;
            if risks[i] > risks[j] {
                concordant += 1.0;
            } else if risks[i] == risks[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0.0 {
        return Err(CIndexError::NoComparablePairs);
    }
    Ok(concordant / comparable)
}
