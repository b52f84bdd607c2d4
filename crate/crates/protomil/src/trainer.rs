//! End-to-end optimization: patient-level K-fold cross-validation, gradient
//! accumulation with averaged updates, epoch-end EMA bank refreshes, early
//! stopping on validation C-index, and checkpointing.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{assign_bin, fit_bins, Cohort, DataError};
use crate::model::{
    forward_bag, loss_bag, parse_topk, AblationSet, BagFeatures, Checkpoint, ModelConfig,
    ModelParams, N_HEADS,
};
use crate::prototypes::{ema_update, DiversityForm, TopkStrategy};
use crate::rng::{mix, stream_rng, stream_seed};
use crate::survival::{c_index, CIndexError};
use crate::tape::{Graph, TapeError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("patient '{0}' appears in both train and validation folds")]
    Leakage(String),
    #[error("non-finite loss while training on bag '{slide}': {source}")]
    NonFiniteLoss { slide: String, source: TapeError },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    CIndex(#[from] CIndexError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatientAgg {
    Mean,
    Max,
}

impl PatientAgg {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim() {
            "mean" => Ok(PatientAgg::Mean),
            "max" => Ok(PatientAgg::Max),
            other => Err(format!("unknown patient_agg '{other}'")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatientAgg::Mean => "mean",
            PatientAgg::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub grad_accum: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub k_h: usize,
    pub k_s: usize,
    pub blend_alpha: f64,
    pub k_min: usize,
    pub ema_beta: f64,
    pub lambda_div: f64,
    pub nll_alpha: f64,
    pub n_bins: usize,
    pub ablation: AblationSet,
    pub topk_strategy: TopkStrategy,
    pub dropout: f64,
    pub d_model: usize,
    pub d_attn: usize,
    pub logit_scale: f64,
    pub diversity_form: DiversityForm,
    pub blend_normalize_t: bool,
    pub patient_agg: PatientAgg,
}

impl Default for TrainConfig {
    /// Published defaults.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-5,
            epochs_max: 50,
            patience: 10,
            grad_accum: 32,
            n_folds: 5,
            seed: 1,
            k_h: 12,
            k_s: 8,
            blend_alpha: 0.1,
            k_min: 60,
            ema_beta: 0.95,
            lambda_div: 0.2,
            nll_alpha: 0.4,
            n_bins: 4,
            ablation: AblationSet::default(),
            topk_strategy: TopkStrategy::Hardcode,
            dropout: 0.25,
            d_model: 512,
            d_attn: 256,
            logit_scale: 1.0,
            diversity_form: DiversityForm::Supp,
            blend_normalize_t: true,
            patient_agg: PatientAgg::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err("lr must be positive, weight_decay non-negative".into());
        }
        if self.epochs_max == 0 || self.grad_accum == 0 || self.n_folds < 2 {
            return Err("epochs_max, grad_accum must be positive; n_folds >= 2".into());
        }
        if self.k_h == 0 || self.k_s == 0 || self.k_min == 0 || self.n_bins == 0 {
            return Err("K_H, K_S, k_min, n_bins must be positive".into());
        }
        if !(0.0 < self.blend_alpha && self.blend_alpha < 1.0) {
            return Err("blend_alpha must lie in (0,1)".into());
        }
        if !(0.0 < self.ema_beta && self.ema_beta < 1.0) {
            return Err("ema_beta must lie in (0,1)".into());
        }
        if self.lambda_div < 0.0 {
            return Err("lambda_div must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.nll_alpha) {
            return Err("nll_alpha must lie in [0,1]".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0,1)".into());
        }
        if self.logit_scale <= 0.0 {
            return Err("logit_scale must be positive".into());
        }
        if self.d_model % N_HEADS != 0 {
            return Err(format!("D must be divisible by {N_HEADS} attention heads"));
        }
        if self.ablation.hist_only && self.ablation.st_only {
            return Err("hist_only and st_only are mutually exclusive".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_attn: self.d_attn,
            n_heads: N_HEADS,
            n_bins: self.n_bins,
            k_h: self.k_h,
            k_s: self.k_s,
            k_min: self.k_min,
            topk: self.topk_strategy,
            blend_alpha: self.blend_alpha,
            blend_normalize_t: self.blend_normalize_t,
            dropout: self.dropout,
            logit_scale: self.logit_scale,
            diversity_form: self.diversity_form,
            nll_alpha: self.nll_alpha,
            lambda_div: self.lambda_div,
            ema_beta: self.ema_beta,
            ablation: self.ablation,
        }
    }

    pub fn to_config_text(&self) -> String {
        let topk = match self.topk_strategy {
            TopkStrategy::Hardcode => "hardcode".to_string(),
            TopkStrategy::Proportion(p) => format!("proportion {p}"),
        };
        let form = match self.diversity_form {
            DiversityForm::Supp => "supp",
            DiversityForm::Main => "main",
        };
        format!(
            "lr = {}\nweight_decay = {}\nepochs_max = {}\npatience = {}\ngrad_accum = {}\nn_folds = {}\nseed = {}\nK_H = {}\nK_S = {}\nblend_alpha = {}\nk_min = {}\nema_beta = {}\nlambda_div = {}\nnll_alpha = {}\nn_bins = {}\nablation = {}\ntopk_strategy = {}\ndropout = {}\nD = {}\nD_prime = {}\nlogit_scale = {}\ndiversity_form = {}\nblend_normalize_t = {}\npatient_agg = {}\n",
            self.lr,
            self.weight_decay,
            self.epochs_max,
            self.patience,
            self.grad_accum,
            self.n_folds,
            self.seed,
            self.k_h,
            self.k_s,
            self.blend_alpha,
            self.k_min,
            self.ema_beta,
            self.lambda_div,
            self.nll_alpha,
            self.n_bins,
            self.ablation.to_list(),
            topk,
            self.dropout,
            self.d_model,
            self.d_attn,
            self.logit_scale,
            form,
            self.blend_normalize_t,
            self.patient_agg.as_str(),
        )
    }

    /// Parse the flat `key = value` config format; unknown keys are errors.
    pub fn from_config_text(text: &str) -> Result<Self, String> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value', got '{line}'", idx + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| format!("line {}: bad {what} '{v}'", idx + 1);
            match k {
                "lr" => cfg.lr = v.parse().map_err(|_| bad("lr"))?,
                "weight_decay" => cfg.weight_decay = v.parse().map_err(|_| bad("weight_decay"))?,
                "epochs_max" => cfg.epochs_max = v.parse().map_err(|_| bad("epochs_max"))?,
                "patience" => cfg.patience = v.parse().map_err(|_| bad("patience"))?,
                "grad_accum" => cfg.grad_accum = v.parse().map_err(|_| bad("grad_accum"))?,
                "n_folds" => cfg.n_folds = v.parse().map_err(|_| bad("n_folds"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("seed"))?,
                "K_H" => cfg.k_h = v.parse().map_err(|_| bad("K_H"))?,
                "K_S" => cfg.k_s = v.parse().map_err(|_| bad("K_S"))?,
                "blend_alpha" => cfg.blend_alpha = v.parse().map_err(|_| bad("blend_alpha"))?,
                "k_min" => cfg.k_min = v.parse().map_err(|_| bad("k_min"))?,
                "ema_beta" => cfg.ema_beta = v.parse().map_err(|_| bad("ema_beta"))?,
                "lambda_div" => cfg.lambda_div = v.parse().map_err(|_| bad("lambda_div"))?,
                "nll_alpha" => cfg.nll_alpha = v.parse().map_err(|_| bad("nll_alpha"))?,
                "n_bins" => cfg.n_bins = v.parse().map_err(|_| bad("n_bins"))?,
                "ablation" => cfg.ablation = AblationSet::parse(v).map_err(|e| format!("line {}: {e}", idx + 1))?,
                "topk_strategy" => cfg.topk_strategy = parse_topk(v).map_err(|e| format!("line {}: {e}", idx + 1))?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad("dropout"))?,
                "D" => cfg.d_model = v.parse().map_err(|_| bad("D"))?,
                "D_prime" => cfg.d_attn = v.parse().map_err(|_| bad("D_prime"))?,
                "logit_scale" => cfg.logit_scale = v.parse().map_err(|_| bad("logit_scale"))?,
                "diversity_form" => {
                    cfg.diversity_form = match v {
                        "supp" => DiversityForm::Supp,
                        "main" => DiversityForm::Main,
                        _ => return Err(bad("diversity_form")),
                    }
                }
                "blend_normalize_t" => {
                    cfg.blend_normalize_t = match v {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad("blend_normalize_t")),
                    }
                }
                "patient_agg" => cfg.patient_agg = PatientAgg::parse(v).map_err(|e| format!("line {}: {e}", idx + 1))?,
                other => return Err(format!("line {}: unknown key '{other}'", idx + 1)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Patient-level fold assignment: patients are shuffled under the fold
/// stream of `seed` and dealt round-robin, so fold sizes differ by at most 1.
pub fn split_folds(cohort: &Cohort, n_folds: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>, TrainError> {
    let mut patients = cohort.patient_ids();
    if patients.len() < n_folds {
        return Err(TrainError::Invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            patients.len()
        )));
    }
    let mut rng = stream_rng(seed, "folds");
    patients.shuffle(&mut rng);
    let mut fold_of = vec![0usize; patients.len()];
    for (i, f) in fold_of.iter_mut().enumerate() {
        *f = i % n_folds;
    }
    let mut out = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let val: Vec<String> = patients
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.clone())
            .collect();
        let train: Vec<String> = patients
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f != fold)
            .map(|(p, _)| p.clone())
            .collect();
        out.push((train, val));
    }
    Ok(out)
}

/// Decoupled-weight-decay Adam over the flat parameter walk.
pub struct Adam<T: Real> {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64, params: &ModelParams<T>) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, t| m.push(Tensor::zeros(t.rows(), t.cols())));
        let v = m.clone();
        Adam { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        let mut i = 0;
        params.for_each_mut(&mut |_, p| {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for e in 0..p.len() {
                let ge = g.data()[e];
                let me = b1 * m.data()[e] + (one - b1) * ge;
                let ve = b2 * v.data()[e] + (one - b2) * ge * ge;
                m.data_mut()[e] = me;
                v.data_mut()[e] = ve;
                let mhat = me / bc1;
                let vhat = ve / bc2;
                let pe = p.data()[e];
                p.data_mut()[e] = pe - lr * mhat / (vhat.sqrt() + eps) - wd * pe;
            }
            i += 1;
        });
    }
}

/// Sums per-bag gradients; drained as the mean so lr semantics do not depend
/// on the accumulation window.
pub struct GradAccumulator<T: Real> {
    sum: Vec<Tensor<T>>,
    pub count: usize,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let mut sum = Vec::new();
        params.for_each(&mut |_, t| sum.push(Tensor::zeros(t.rows(), t.cols())));
        GradAccumulator { sum, count: 0 }
    }

    pub fn push(&mut self, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.sum.len());
        for (acc, g) in self.sum.iter_mut().zip(grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        self.count += 1;
    }

    /// Mean gradients; resets the accumulator.
    pub fn drain(&mut self) -> Option<Vec<Tensor<T>>> {
        if self.count == 0 {
            return None;
        }
        let inv = T::from_f64(1.0 / self.count as f64);
        let out = self.sum.iter().map(|t| t.map(|x| x * inv)).collect();
        for t in self.sum.iter_mut() {
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
        self.count = 0;
        Some(out)
    }
}

/// Early stopping on the validation metric; strict improvement resets the
/// patience window.
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
    any: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: 0, since: 0, any: false }
    }

    /// Returns true when this epoch improved the best metric.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if !self.any || value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since = 0;
            self.any = true;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult<T: Real> {
    pub fold_id: usize,
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub val_c_index_curve: Vec<f64>,
    pub c_index: f64,
    pub c_index_best_pm1: f64,
    pub nll: f64,
    pub div_h: f64,
    pub div_s: f64,
    pub checkpoint: Checkpoint<T>,
}

/// Mean over the validation curve at {best−1, best, best+1} clipped to the
/// trained range.
pub fn best_pm1(curve: &[f64], best_epoch: usize) -> f64 {
    let lo = best_epoch.saturating_sub(1);
    let hi = (best_epoch + 1).min(curve.len() - 1);
    let window = &curve[lo..=hi];
    window.iter().sum::<f64>() / window.len() as f64
}

struct FoldData<'a, T: Real> {
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    feats: Vec<Option<BagFeatures<T>>>,
    bins: Vec<Option<usize>>,
    bin_edges: Vec<f64>,
    cohort: &'a Cohort,
}

fn prepare_fold<'a, T: Real>(
    cohort: &'a Cohort,
    train_patients: &[String],
    val_patients: &[String],
    n_bins: usize,
) -> Result<FoldData<'a, T>, TrainError> {
    let train_set: BTreeSet<&str> = train_patients.iter().map(|s| s.as_str()).collect();
    let val_set: BTreeSet<&str> = val_patients.iter().map(|s| s.as_str()).collect();
    if let Some(common) = train_set.intersection(&val_set).next() {
        return Err(TrainError::Leakage(common.to_string()));
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, b) in cohort.bags.iter().enumerate() {
        if train_set.contains(b.patient_id.as_str()) {
            train_idx.push(i);
        } else if val_set.contains(b.patient_id.as_str()) {
            val_idx.push(i);
        }
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::Invalid("empty train or validation fold".into()));
    }

    // Bin edges come from the training fold only, one observation per patient.
    let mut seen = BTreeSet::new();
    let mut train_times = Vec::new();
    for &i in &train_idx {
        let b = &cohort.bags[i];
        if seen.insert(b.patient_id.clone()) {
            train_times.push((b.label.time, b.label.censored));
        }
    }
    let bin_edges = fit_bins(&train_times, n_bins)?;

    let mut feats = vec![None; cohort.bags.len()];
    let mut bins = vec![None; cohort.bags.len()];
    for &i in train_idx.iter().chain(&val_idx) {
        feats[i] = Some(BagFeatures::from_bag(&cohort.bags[i]));
        bins[i] = Some(assign_bin(cohort.bags[i].label.time, &bin_edges));
    }
    Ok(FoldData { train_idx, val_idx, feats, bins, bin_edges, cohort })
}

/// Per-patient risk aggregation over slide-level risks.
pub fn aggregate_patient_risks(
    patients: &[String],
    slide_patients: &[&str],
    slide_risks: &[f64],
    agg: PatientAgg,
) -> Vec<f64> {
    patients
        .iter()
        .map(|p| {
            let rs: Vec<f64> = slide_patients
                .iter()
                .zip(slide_risks)
                .filter(|(sp, _)| **sp == p.as_str())
                .map(|(_, &r)| r)
                .collect();
            match agg {
                PatientAgg::Mean => rs.iter().sum::<f64>() / rs.len() as f64,
                PatientAgg::Max => rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

struct ValScore {
    c_index: f64,
    nll: f64,
}

fn evaluate_val<T: Real>(
    data: &FoldData<T>,
    params: &ModelParams<T>,
    mc: &ModelConfig,
    val_patients: &[String],
    agg: PatientAgg,
) -> Result<ValScore, TrainError> {
    let mut slide_risks = Vec::with_capacity(data.val_idx.len());
    let mut slide_patients = Vec::with_capacity(data.val_idx.len());
    let mut outputs = Vec::new();
    let mut labels = Vec::new();
    for &i in &data.val_idx {
        let bag = &data.cohort.bags[i];
        let mut g = Graph::new();
        let bm = params.bind(&mut g, false)?;
        let fwd = forward_bag(&mut g, &bm, mc, data.feats[i].as_ref().unwrap(), None)?;
        slide_risks.push(fwd.output.risk());
        slide_patients.push(bag.patient_id.as_str());
        let mut label = bag.label.clone();
        label.bin = data.bins[i];
        labels.push(label);
        outputs.push(fwd.output);
    }
    let risks = aggregate_patient_risks(val_patients, &slide_patients, &slide_risks, agg);
    let mut times = Vec::with_capacity(val_patients.len());
    let mut censored = Vec::with_capacity(val_patients.len());
    for p in val_patients {
        let bag = data.cohort.bags_of(p)[0];
        times.push(bag.label.time);
        censored.push(bag.label.censored);
    }
    let c = c_index(&risks, &times, &censored)?;
    let nll = crate::survival::nll_loss(&outputs, &labels, mc.nll_alpha).map_err(TrainError::Tape)?;
    Ok(ValScore { c_index: c, nll })
}

pub fn train_fold<T: Real>(
    cohort: &Cohort,
    train_patients: &[String],
    val_patients: &[String],
    cfg: &TrainConfig,
    fold_id: usize,
) -> Result<FoldResult<T>, TrainError> {
    let mc = cfg.model_config();
    let data = prepare_fold::<T>(cohort, train_patients, val_patients, cfg.n_bins)?;
    let fold_seed = stream_seed(cfg.seed, &format!("fold{fold_id}"));
    let dropout_seed = stream_seed(fold_seed, "dropout");

    let mut params = ModelParams::<T>::init(&mc, cohort.d_hist(), cohort.d_st(), fold_seed);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay, &params);
    let mut accumulator = GradAccumulator::new(&params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut curve = Vec::new();
    let mut best: Option<(ModelParams<T>, f64, f64, f64)> = None; // params, nll, div_h, div_s
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.epochs_max {
        let mut order = data.train_idx.clone();
        let mut shuffle_rng = stream_rng(fold_seed, &format!("shuffle{epoch}"));
        order.shuffle(&mut shuffle_rng);

        let mut accums = params.new_accums();
        for &i in &order {
            global_step += 1;
            let bag = &cohort.bags[i];
            let mut g = Graph::with_dropout(mix(dropout_seed, global_step));
            let bm = params.bind(&mut g, true)?;
            let (loss, _fwd, _parts) = loss_bag(
                &mut g,
                &bm,
                &mc,
                data.feats[i].as_ref().unwrap(),
                data.bins[i].unwrap(),
                bag.label.censored,
                Some(&mut accums),
            )
            .map_err(|e| match e {
                TapeError::NonFinite { .. } => TrainError::NonFiniteLoss { slide: bag.slide_id.clone(), source: e },
                other => TrainError::Tape(other),
            })?;
            let grads = g.backward(loss)?;
            let flat: Vec<Tensor<T>> = bm
                .ids
                .iter()
                .map(|&id| {
                    grads
                        .get(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(id).rows(), g.value(id).cols()))
                })
                .collect();
            accumulator.push(&flat);
            if accumulator.count == cfg.grad_accum {
                if let Some(mean) = accumulator.drain() {
                    adam.step(&mut params, &mean);
                }
            }
        }
        // flush the partial tail group
        if let Some(mean) = accumulator.drain() {
            adam.step(&mut params, &mean);
        }

        if let Some(bank) = params.bank_h.as_mut() {
            ema_update(bank, accums.hist.as_mut().expect("hist accumulator"));
        }
        if let Some(bank) = params.bank_s.as_mut() {
            ema_update(bank, accums.st.as_mut().expect("st accumulator"));
        }

        let score = evaluate_val(&data, &params, &mc, val_patients, cfg.patient_agg)?;
        curve.push(score.c_index);
        if stopper.update(epoch, score.c_index) {
            let div_h = params
                .bank_h
                .as_ref()
                .map(|b| crate::prototypes::diversity_loss_value(&b.prototypes, mc.diversity_form))
                .transpose()?
                .map_or(0.0, |v| v.as_f64());
            let div_s = params
                .bank_s
                .as_ref()
                .map(|b| crate::prototypes::diversity_loss_value(&b.prototypes, mc.diversity_form))
                .transpose()?
                .map_or(0.0, |v| v.as_f64());
            best = Some((params.clone(), score.nll, div_h, div_s));
        }
        if stopper.should_stop() {
            break;
        }
    }

    let (best_params, nll, div_h, div_s) = best.expect("at least one epoch evaluated");
    let best_epoch = stopper.best_epoch;
    Ok(FoldResult {
        fold_id,
        best_epoch,
        epochs_trained: curve.len(),
        c_index: stopper.best,
        c_index_best_pm1: best_pm1(&curve, best_epoch),
        val_c_index_curve: curve,
        nll,
        div_h,
        div_s,
        checkpoint: Checkpoint {
            params: best_params,
            cfg: mc,
            d_hist: cohort.d_hist(),
            d_st: cohort.d_st(),
            bin_edges: data.bin_edges,
            seed: cfg.seed,
        },
    })
}

#[derive(Debug, Clone)]
pub struct CvSummary<T: Real> {
    pub folds: Vec<FoldResult<T>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl<T: Real> CvSummary<T> {
    pub fn mean_c_index(&self) -> f64 {
        mean_std(&self.folds.iter().map(|f| f.c_index).collect::<Vec<_>>()).0
    }

    pub fn mean_c_index_best_pm1(&self) -> f64 {
        mean_std(&self.folds.iter().map(|f| f.c_index_best_pm1).collect::<Vec<_>>()).0
    }

    /// Flat key = value metrics report; per-fold rows then aggregates.
    pub fn render_metrics(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            let _ = writeln!(s, "fold_{}.c_index = {}", f.fold_id, f.c_index);
            let _ = writeln!(s, "fold_{}.c_index_best_pm1 = {}", f.fold_id, f.c_index_best_pm1);
            let _ = writeln!(s, "fold_{}.nll = {}", f.fold_id, f.nll);
            let _ = writeln!(s, "fold_{}.div_H = {}", f.fold_id, f.div_h);
            let _ = writeln!(s, "fold_{}.div_S = {}", f.fold_id, f.div_s);
            let _ = writeln!(s, "fold_{}.best_epoch = {}", f.fold_id, f.best_epoch);
            let _ = writeln!(s, "fold_{}.epochs_trained = {}", f.fold_id, f.epochs_trained);
        }
        let agg = |name: &str, get: &dyn Fn(&FoldResult<T>) -> f64, s: &mut String| {
            let vals: Vec<f64> = self.folds.iter().map(get).collect();
            let (m, sd) = mean_std(&vals);
            let _ = writeln!(s, "mean.{name} = {m}");
            let _ = writeln!(s, "std.{name} = {sd}");
        };
        agg("c_index", &|f| f.c_index, &mut s);
        agg("c_index_best_pm1", &|f| f.c_index_best_pm1, &mut s);
        agg("nll", &|f| f.nll, &mut s);
        agg("div_H", &|f| f.div_h, &mut s);
        agg("div_S", &|f| f.div_s, &mut s);
        s
    }
}

/// Cross-validated training; `jobs > 1` trains folds on worker threads
/// (results keep fold order either way).
pub fn run_cv<T: Real>(cohort: &Cohort, cfg: &TrainConfig, jobs: usize) -> Result<CvSummary<T>, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    let splits = split_folds(cohort, cfg.n_folds, cfg.seed)?;
    let jobs = jobs.max(1);
    let mut results: Vec<Option<FoldResult<T>>> = (0..splits.len()).map(|_| None).collect();
    if jobs == 1 {
        for (fold_id, (train, val)) in splits.iter().enumerate() {
            results[fold_id] = Some(train_fold(cohort, train, val, cfg, fold_id)?);
        }
    } else {
        let mut errors: Vec<TrainError> = Vec::new();
        let chunks: Vec<Vec<usize>> = (0..splits.len()).fold(vec![Vec::new(); jobs], |mut acc, i| {
            acc[i % jobs].push(i);
            acc
        });
        let outcome: Vec<(usize, Result<FoldResult<T>, TrainError>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let splits = &splits;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&fold_id| {
                                let (train, val) = &splits[fold_id];
                                (fold_id, train_fold(cohort, train, val, cfg, fold_id))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("fold worker panicked")).collect()
        });
        for (fold_id, res) in outcome {
            match res {
                Ok(r) => results[fold_id] = Some(r),
                Err(e) => errors.push(e),
            }
        }
        if let Some(e) = errors.into_iter().next() {
            return Err(e);
        }
    }
    Ok(CvSummary { folds: results.into_iter().map(|r| r.expect("fold missing")).collect() })
}

/// Evaluate a trained checkpoint over a cohort: per-slide risks, patient-level
/// C-index.
pub fn evaluate_checkpoint<T: Real>(
    ckpt: &Checkpoint<T>,
    cohort: &Cohort,
    agg: PatientAgg,
) -> Result<(f64, Vec<(String, f64)>), TrainError> {
    let mut slide_risks = Vec::new();
    let mut slide_patients = Vec::new();
    for bag in &cohort.bags {
        let feats = BagFeatures::<T>::from_bag(bag);
        let mut g = Graph::new();
        let bm = ckpt.params.bind(&mut g, false)?;
        let fwd = forward_bag(&mut g, &bm, &ckpt.cfg, &feats, None)?;
        slide_risks.push(fwd.output.risk());
        slide_patients.push(bag.patient_id.as_str());
    }
    let patients = cohort.patient_ids();
    let risks = aggregate_patient_risks(&patients, &slide_patients, &slide_risks, agg);
    let mut times = Vec::new();
    let mut censored = Vec::new();
    for p in &patients {
        let bag = cohort.bags_of(p)[0];
        times.push(bag.label.time);
        censored.push(bag.label.censored);
    }
    let c = c_index(&risks, &times, &censored)?;
    Ok((c, patients.into_iter().zip(risks).collect()))
}

/// Label-shuffled control: patient labels are permuted under the given seed,
/// breaking the feature→outcome link while preserving marginals.
pub fn shuffle_labels(cohort: &Cohort, seed: u64) -> Cohort {
    let patients = cohort.patient_ids();
    let labels: Vec<_> = patients.iter().map(|p| cohort.bags_of(p)[0].label.clone()).collect();
    let mut perm: Vec<usize> = (0..patients.len()).collect();
    let mut rng = stream_rng(seed, "label-shuffle");
    perm.shuffle(&mut rng);
    let mut shuffled = cohort.clone();
    for bag in &mut shuffled.bags {
        let pi = patients.iter().position(|p| p == &bag.patient_id).unwrap();
        bag.label = labels[perm[pi]].clone();
    }
    shuffled
}
