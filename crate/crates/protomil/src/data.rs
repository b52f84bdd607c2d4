//! Cohort data structures, deterministic synthetic-cohort generation with a
//! planted prognostic signal, and the cohort directory format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::matio::{self, parse_err, FileError};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// One spot/patch pair: co-registered histology and ST embeddings plus the
/// array coordinate of the spot.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub hist_embedding: Vec<f64>,
    pub st_embedding: Vec<f64>,
    pub grid_xy: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalLabel {
    /// Months; strictly positive.
    pub time: f64,
    /// true = event not observed.
    pub censored: bool,
    /// Discrete interval index, populated once bin edges are fit.
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub patient_id: String,
    pub slide_id: String,
    pub instances: Vec<Instance>,
    pub label: SurvivalLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortMeta {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub bags: Vec<Bag>,
    /// B−1 strictly ascending edges once fit; empty before.
    pub bin_edges: Vec<f64>,
    pub meta: CohortMeta,
}

impl Cohort {
    pub fn patient_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for b in &self.bags {
            if seen.insert(b.patient_id.clone()) {
                out.push(b.patient_id.clone());
            }
        }
        out
    }

    pub fn bags_of(&self, patient: &str) -> Vec<&Bag> {
        self.bags.iter().filter(|b| b.patient_id == patient).collect()
    }

    pub fn d_hist(&self) -> usize {
        self.bags.first().map_or(0, |b| b.instances[0].hist_embedding.len())
    }

    pub fn d_st(&self) -> usize {
        self.bags.first().map_or(0, |b| b.instances[0].st_embedding.len())
    }

    /// Assign every label's bin from the given edges.
    pub fn assign_bins(&mut self, edges: &[f64]) {
        self.bin_edges = edges.to_vec();
        for b in &mut self.bags {
            b.label.bin = Some(assign_bin(b.label.time, edges));
        }
    }
}

pub fn sha256_hex(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(content.as_bytes());
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub slides_per_patient: usize,
    /// Inclusive range of instances per slide.
    pub instances_per_slide_range: (usize, usize),
    pub d_hist: usize,
    pub d_st: usize,
    pub n_latent_archetypes: usize,
    pub risk_weights: Vec<f64>,
    pub censor_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 60,
            slides_per_patient: 2,
            instances_per_slide_range: (130, 170),
            d_hist: 16,
            d_st: 8,
            n_latent_archetypes: 4,
            risk_weights: vec![0.0, 3.0, 3.0, 6.0],
            censor_rate: 0.2,
            noise_sigma: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn canonical_string(&self) -> String {
        let weights: Vec<String> = self.risk_weights.iter().map(|w| w.to_string()).collect();
        format!(
            "n_patients = {}\nslides_per_patient = {}\ninstances_per_slide_range = {} {}\nd_hist = {}\nd_st = {}\nn_latent_archetypes = {}\nrisk_weights = {}\ncensor_rate = {}\nnoise_sigma = {}\nseed = {}\n",
            self.n_patients,
            self.slides_per_patient,
            self.instances_per_slide_range.0,
            self.instances_per_slide_range.1,
            self.d_hist,
            self.d_st,
            self.n_latent_archetypes,
            weights.join(","),
            self.censor_rate,
            self.noise_sigma,
            self.seed
        )
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_patients == 0 || self.slides_per_patient == 0 {
            return Err(invalid("n_patients and slides_per_patient must be positive"));
        }
        let (lo, hi) = self.instances_per_slide_range;
        if lo == 0 || hi < lo {
            return Err(invalid(format!("degenerate instances_per_slide_range {lo}..{hi}")));
        }
        if self.n_latent_archetypes < 2 {
            return Err(invalid("n_latent_archetypes must be >= 2"));
        }
        if self.risk_weights.len() != self.n_latent_archetypes {
            return Err(invalid(format!(
                "risk_weights length {} != n_latent_archetypes {}",
                self.risk_weights.len(),
                self.n_latent_archetypes
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(invalid("censor_rate must be in [0,1)"));
        }
        if self.noise_sigma < 0.0 || self.d_hist == 0 || self.d_st == 0 {
            return Err(invalid("noise_sigma must be >= 0 and embedding dims positive"));
        }
        Ok(())
    }
}

/// Per-patient latent state kept for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct SynthTrace {
    pub patient_props: Vec<Vec<f64>>,
    pub patient_risks: Vec<f64>,
    /// Realized per-slide archetype proportions, bag order.
    pub slide_props: Vec<Vec<f64>>,
}

/// Histology observes only the "coarse" half of the archetype label, ST the
/// "fine" half, so neither modality alone identifies the archetype mixture;
/// the two are complementary by construction.
pub fn hist_group(archetype: usize) -> usize {
    archetype / 2
}

pub fn st_group(archetype: usize) -> usize {
    archetype % 2
}

pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort, DataError> {
    generate_synthetic_cohort_traced(cfg).map(|(c, _)| c)
}

pub fn generate_synthetic_cohort_traced(cfg: &SynthConfig) -> Result<(Cohort, SynthTrace), DataError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "data");
    let arch = cfg.n_latent_archetypes;
    let n_hist_groups = hist_group(arch - 1) + 1;
    let n_st_groups = 2; // archetypes 0 and 1 always exist, so both parities occur

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw_center = |d: usize| -> Vec<f64> { (0..d).map(|_| unit.sample(&mut rng)).collect() };
    let centers_h: Vec<Vec<f64>> = (0..n_hist_groups).map(|_| draw_center(cfg.d_hist)).collect();
    let centers_s: Vec<Vec<f64>> = (0..n_st_groups).map(|_| draw_center(cfg.d_st)).collect();

    let dirichlet = Dirichlet::new(&vec![1.0f64; arch]).map_err(|e| invalid(format!("dirichlet: {e}")))?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("noise normal");

    let mut bags = Vec::with_capacity(cfg.n_patients * cfg.slides_per_patient);
    let mut trace = SynthTrace { patient_props: Vec::new(), patient_risks: Vec::new(), slide_props: Vec::new() };

    for p in 0..cfg.n_patients {
        let patient_id = format!("P{p:03}");
        let props = dirichlet.sample(&mut rng);
        let risk: f64 = props.iter().zip(&cfg.risk_weights).map(|(a, w)| a * w).sum();
        let rate = risk.exp();
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let event_time = -u.ln() / rate;
        let censored = rng.gen::<f64>() < cfg.censor_rate;
        let time = if censored {
            (event_time * rng.gen_range(0.05..1.0)).max(1e-9)
        } else {
            event_time.max(1e-9)
        };
        let label = SurvivalLabel { time, censored, bin: None };

        for s in 0..cfg.slides_per_patient {
            let slide_id = format!("{patient_id}-S{s}");
            let n = rng.gen_range(cfg.instances_per_slide_range.0..=cfg.instances_per_slide_range.1);
            // i.i.d. archetype draws, then sorted so the grid shows contiguous
            // regions the spatial encoder can actually exploit.
            let mut draws: Vec<usize> = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (a, &pr) in props.iter().enumerate() {
                        acc += pr;
                        if u < acc {
                            return a;
                        }
                    }
                    arch - 1
                })
                .collect();
            draws.sort_unstable();
            let mut counts = vec![0usize; arch];
            for &a in &draws {
                counts[a] += 1;
            }
            trace.slide_props.push(counts.iter().map(|&c| c as f64 / n as f64).collect());

            let side = (n as f64).sqrt().ceil() as i64;
            let instances: Vec<Instance> = draws
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let ch = &centers_h[hist_group(a)];
                    let cs = &centers_s[st_group(a)];
                    let hist = ch.iter().map(|&c| c + noise.sample(&mut rng)).collect();
                    let st = cs.iter().map(|&c| c + noise.sample(&mut rng)).collect();
                    Instance {
                        hist_embedding: hist,
                        st_embedding: st,
                        grid_xy: (i as i64 % side, i as i64 / side),
                    }
                })
                .collect();
            bags.push(Bag { patient_id: clone_id(&patient_id), slide_id, instances, label: label.clone() });
        }
        trace.patient_props.push(props);
        trace.patient_risks.push(risk);
    }

    let meta = CohortMeta { seed: cfg.seed, config_digest: sha256_hex(&cfg.canonical_string()) };
    Ok((Cohort { bags, bin_edges: Vec::new(), meta }, trace))
}

fn clone_id(s: &str) -> String {
    s.to_string()
}

/// Quantile edges over UNCENSORED times with linear interpolation between
/// order statistics; edges at i/n_bins for i in 1..n_bins.
pub fn fit_bins(times: &[(f64, bool)], n_bins: usize) -> Result<Vec<f64>, DataError> {
    if n_bins == 0 {
        return Err(invalid("n_bins must be >= 1"));
    }
    let mut uncensored: Vec<f64> = times.iter().filter(|(_, c)| !c).map(|(t, _)| *t).collect();
    uncensored.sort_by(f64::total_cmp);
    let distinct = {
        let mut d = uncensored.clone();
        d.dedup();
        d.len()
    };
    if distinct < n_bins {
        return Err(invalid(format!(
            "need at least {n_bins} distinct uncensored times, got {distinct}"
        )));
    }
    let m = uncensored.len();
    let mut edges = Vec::with_capacity(n_bins - 1);
    for i in 1..n_bins {
        let q = i as f64 / n_bins as f64;
        let pos = q * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let e = if lo + 1 < m {
            uncensored[lo] + frac * (uncensored[lo + 1] - uncensored[lo])
        } else {
            uncensored[lo]
        };
        edges.push(e);
    }
    Ok(edges)
}

/// Right-open intervals: bin = #{edges < time}; the last bin is unbounded.
pub fn assign_bin(time: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| e < time).count()
}

const LABELS_FILE: &str = "labels.tsv";
const META_FILE: &str = "meta.txt";

pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("patient_id\tslide_id\ttime\tcensored\n");
    for b in &cohort.bags {
        let _ = writeln!(
            labels,
            "{}\t{}\t{}\t{}",
            b.patient_id,
            b.slide_id,
            b.label.time,
            if b.label.censored { 1 } else { 0 }
        );
    }
    fs::write(dir.join(LABELS_FILE), labels)?;

    for b in &cohort.bags {
        let n = b.instances.len();
        let hist = Tensor::<f64>::from_vec(
            n,
            b.instances[0].hist_embedding.len(),
            b.instances.iter().flat_map(|i| i.hist_embedding.iter().copied()).collect(),
        );
        matio::write_mat(&dir.join(format!("{}.hist.mat", b.slide_id)), &hist)?;
        let st = Tensor::<f64>::from_vec(
            n,
            b.instances[0].st_embedding.len(),
            b.instances.iter().flat_map(|i| i.st_embedding.iter().copied()).collect(),
        );
        matio::write_mat(&dir.join(format!("{}.st.mat", b.slide_id)), &st)?;
        let mut xy = String::new();
        for i in &b.instances {
            let _ = writeln!(xy, "{}\t{}", i.grid_xy.0, i.grid_xy.1);
        }
        fs::write(dir.join(format!("{}.xy.tsv", b.slide_id)), xy)?;
    }

    let mut kv = vec![
        ("seed".to_string(), cohort.meta.seed.to_string()),
        ("config_digest".to_string(), cohort.meta.config_digest.clone()),
    ];
    if !cohort.bin_edges.is_empty() {
        let edges: Vec<String> = cohort.bin_edges.iter().map(|e| e.to_string()).collect();
        kv.push(("bin_edges".to_string(), edges.join(",")));
    }
    matio::write_kv(&dir.join(META_FILE), &kv)?;
    Ok(())
}

pub fn load_cohort(dir: &Path) -> Result<Cohort, DataError> {
    let labels_path = dir.join(LABELS_FILE);
    let content = fs::read_to_string(&labels_path)
        .map_err(|e| invalid(format!("{}: {e}", labels_path.display())))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(&labels_path, 1, "empty labels file"))?;
    if header != "patient_id\tslide_id\ttime\tcensored" {
        return Err(parse_err(&labels_path, 1, format!("malformed header '{header}'")).into());
    }

    let mut bags = Vec::new();
    let mut seen_slides = BTreeSet::new();
    let mut patient_labels: BTreeMap<String, SurvivalLabel> = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(&labels_path, idx + 1, format!("expected 4 fields, got {}", fields.len())).into());
        }
        let (patient_id, slide_id) = (fields[0].to_string(), fields[1].to_string());
        let time: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(&labels_path, idx + 1, format!("bad time '{}'", fields[2])))?;
        if !(time > 0.0) || !time.is_finite() {
            return Err(parse_err(&labels_path, idx + 1, format!("time must be positive, got {time}")).into());
        }
        let censored = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(&labels_path, idx + 1, format!("censored must be 0 or 1, got '{other}'")).into())
            }
        };
        if !seen_slides.insert(slide_id.clone()) {
            return Err(parse_err(&labels_path, idx + 1, format!("duplicate slide_id '{slide_id}'")).into());
        }
        let label = SurvivalLabel { time, censored, bin: None };
        if let Some(prev) = patient_labels.get(&patient_id) {
            if prev.time != label.time || prev.censored != label.censored {
                return Err(parse_err(
                    &labels_path,
                    idx + 1,
                    format!("patient '{patient_id}' has conflicting labels across slides"),
                )
                .into());
            }
        } else {
            patient_labels.insert(patient_id.clone(), label.clone());
        }

        let hist_path = dir.join(format!("{slide_id}.hist.mat"));
        let st_path = dir.join(format!("{slide_id}.st.mat"));
        let xy_path = dir.join(format!("{slide_id}.xy.tsv"));
        let hist: Tensor<f64> = matio::read_mat(&hist_path)?;
        let st: Tensor<f64> = matio::read_mat(&st_path)?;
        if hist.rows() != st.rows() {
            return Err(parse_err(
                &st_path,
                1,
                format!("{} rows, but {} declares {}", st.rows(), hist_path.display(), hist.rows()),
            )
            .into());
        }
        let xy_content = fs::read_to_string(&xy_path).map_err(|e| invalid(format!("{}: {e}", xy_path.display())))?;
        let mut coords = Vec::new();
        for (xidx, xline) in xy_content.lines().enumerate() {
            if xline.trim().is_empty() {
                continue;
            }
            let (xs, ys) = xline
                .split_once('\t')
                .ok_or_else(|| parse_err(&xy_path, xidx + 1, format!("expected 'x\\ty', got '{xline}'")))?;
            let x: i64 = xs.trim().parse().map_err(|_| parse_err(&xy_path, xidx + 1, format!("bad x '{xs}'")))?;
            let y: i64 = ys.trim().parse().map_err(|_| parse_err(&xy_path, xidx + 1, format!("bad y '{ys}'")))?;
            coords.push((x, y));
        }
        if coords.len() != hist.rows() {
            return Err(parse_err(
                &xy_path,
                coords.len() + 1,
                format!("{} coordinate rows, matrices declare {}", coords.len(), hist.rows()),
            )
            .into());
        }
        let mut uniq = BTreeSet::new();
        for (cidx, &(x, y)) in coords.iter().enumerate() {
            if !uniq.insert((x, y)) {
                return Err(parse_err(&xy_path, cidx + 1, format!("duplicate grid coordinate ({x},{y})")).into());
            }
        }
        if hist.rows() == 0 {
            return Err(parse_err(&hist_path, 1, "bag must contain at least one instance").into());
        }
        let instances = (0..hist.rows())
            .map(|r| Instance {
                hist_embedding: hist.row(r).to_vec(),
                st_embedding: st.row(r).to_vec(),
                grid_xy: coords[r],
            })
            .collect();
        bags.push(Bag { patient_id, slide_id, instances, label });
    }
    if bags.is_empty() {
        return Err(invalid(format!("{}: no slides listed", labels_path.display())));
    }

    // A matrix file present in the directory but absent from labels.tsv is an
    // unknown slide (its patient reference is unresolved) — reject.
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if let Some(slide) = name.strip_suffix(".hist.mat") {
            if !seen_slides.contains(slide) {
                return Err(invalid(format!(
                    "{name}: slide '{slide}' has no row in {LABELS_FILE} (unknown patient reference)"
                )));
            }
        }
    }

    let mut meta = CohortMeta::default();
    let mut bin_edges = Vec::new();
    for (k, v) in matio::read_kv(&dir.join(META_FILE))? {
        match k.as_str() {
            "seed" => meta.seed = v.parse().map_err(|_| invalid(format!("meta.txt: bad seed '{v}'")))?,
            "config_digest" => meta.config_digest = v,
            "bin_edges" => {
                bin_edges = v
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| invalid(format!("meta.txt: bad bin_edges '{v}'")))?;
            }
            _ => {}
        }
    }
    let mut cohort = Cohort { bags, bin_edges: Vec::new(), meta };
    if !bin_edges.is_empty() {
        cohort.assign_bins(&bin_edges);
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0 + 1.0;
                for &k in &idx[i..=j] {
                    r[k] = avg;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..a.len() {
            num += (ra[i] - ma) * (rb[i] - mb);
            da += (ra[i] - ma).powi(2);
            db += (rb[i] - mb).powi(2);
        }
        num / (da.sqrt() * db.sqrt())
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            slides_per_patient: 2,
            instances_per_slide_range: (8, 14),
            d_hist: 5,
            d_st: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic_cohort(&cfg).unwrap();
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg;
        cfg2.seed = 2;
        let c = generate_synthetic_cohort(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dominant_weight_correlates_with_risk() {
        let cfg = SynthConfig {
            n_patients: 60,
            slides_per_patient: 1,
            instances_per_slide_range: (10, 20),
            d_hist: 6,
            d_st: 4,
            n_latent_archetypes: 4,
            risk_weights: vec![0.1, 0.1, 0.1, 10.0],
            ..SynthConfig::default()
        };
        let (_, trace) = generate_synthetic_cohort_traced(&cfg).unwrap();
        let p3: Vec<f64> = trace.patient_props.iter().map(|p| p[3]).collect();
        let rho = spearman(&p3, &trace.patient_risks);
        assert!(rho > 0.8, "spearman {rho}");
    }

    #[test]
    fn zero_weights_decouple_times_from_archetypes() {
        let cfg = SynthConfig {
            n_patients: 80,
            slides_per_patient: 1,
            instances_per_slide_range: (5, 10),
            d_hist: 4,
            d_st: 3,
            risk_weights: vec![0.0; 4],
            censor_rate: 0.0,
            ..SynthConfig::default()
        };
        let (cohort, trace) = generate_synthetic_cohort_traced(&cfg).unwrap();
        assert!(trace.patient_risks.iter().all(|&r| r == 0.0));
        let p3: Vec<f64> = trace.patient_props.iter().map(|p| p[3]).collect();
        let times: Vec<f64> = cohort.bags.iter().map(|b| b.label.time).collect();
        let rho = spearman(&p3, &times);
        assert!(rho.abs() < 0.3, "spearman {rho}");
    }

    #[test]
    fn slide_proportions_sum_to_one() {
        let (_, trace) = generate_synthetic_cohort_traced(&small_cfg()).unwrap();
        for props in trace.slide_props.iter().chain(&trace.patient_props) {
            let s: f64 = props.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "sum {s}");
        }
    }

    #[test]
    fn grid_coords_unique_and_grouping_preserved() {
        let cohort = generate_synthetic_cohort(&small_cfg()).unwrap();
        for b in &cohort.bags {
            let mut seen = BTreeSet::new();
            assert!(b.instances.iter().all(|i| seen.insert(i.grid_xy)));
        }
        // group by patient then re-flatten: same multiset of slide ids
        let mut direct: Vec<String> = cohort.bags.iter().map(|b| b.slide_id.clone()).collect();
        let mut grouped: Vec<String> = cohort
            .patient_ids()
            .iter()
            .flat_map(|p| cohort.bags_of(p).iter().map(|b| b.slide_id.clone()).collect::<Vec<_>>())
            .collect();
        direct.sort();
        grouped.sort();
        assert_eq!(direct, grouped);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.n_patients = 0;
        assert!(generate_synthetic_cohort(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.instances_per_slide_range = (5, 4);
        assert!(generate_synthetic_cohort(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.risk_weights = vec![1.0];
        assert!(generate_synthetic_cohort(&cfg).is_err());
    }

    #[test]
    fn quartile_edges_on_one_to_eight() {
        let times: Vec<(f64, bool)> = (1..=8).map(|t| (t as f64, false)).collect();
        let edges = fit_bins(&times, 4).unwrap();
        // linear interpolation between order statistics at q=.25,.5,.75
        assert_eq!(edges, vec![2.75, 4.5, 6.25]);
        assert_eq!(assign_bin(1.0, &edges), 0);
        assert_eq!(assign_bin(8.0, &edges), 3);
    }

    #[test]
    fn one_bin_means_no_edges() {
        let times = vec![(1.0, false), (2.0, false)];
        let edges = fit_bins(&times, 1).unwrap();
        assert!(edges.is_empty());
        assert_eq!(assign_bin(123.0, &edges), 0);
    }

    #[test]
    fn censored_time_beyond_last_edge_gets_last_bin() {
        let times: Vec<(f64, bool)> = (1..=8).map(|t| (t as f64, false)).collect();
        let edges = fit_bins(&times, 4).unwrap();
        assert_eq!(assign_bin(100.0, &edges), 3);
    }

    #[test]
    fn too_few_uncensored_rejected() {
        let times = vec![(1.0, false), (2.0, true), (3.0, true), (4.0, true)];
        assert!(fit_bins(&times, 4).is_err());
        // repeated values are not distinct
        let times = vec![(1.0, false), (1.0, false), (1.0, false), (2.0, false)];
        assert!(fit_bins(&times, 4).is_err());
    }

    #[test]
    fn bin_assignment_is_monotone_and_total() {
        let times: Vec<(f64, bool)> = (1..=20).map(|t| (t as f64 * 0.7, false)).collect();
        let edges = fit_bins(&times, 4).unwrap();
        let mut prev = 0;
        for i in 1..200 {
            let t = i as f64 * 0.1;
            let b = assign_bin(t, &edges);
            assert!(b >= prev || t < 0.1);
            assert!(b < 4);
            prev = b;
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cohort = generate_synthetic_cohort(&small_cfg()).unwrap();
        let times: Vec<(f64, bool)> = cohort.bags.iter().map(|b| (b.label.time, b.label.censored)).collect();
        let edges = fit_bins(&times, 4).unwrap();
        cohort.assign_bins(&edges);
        save_cohort(&cohort, dir.path()).unwrap();
        let back = load_cohort(dir.path()).unwrap();
        assert_eq!(cohort, back);
    }

    #[test]
    fn load_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_synthetic_cohort(&small_cfg()).unwrap();
        save_cohort(&cohort, dir.path()).unwrap();

        // matrix declaring more rows than present names the file
        let victim = dir.path().join(format!("{}.hist.mat", cohort.bags[0].slide_id));
        std::fs::write(&victim, "3 4\n1 2 3 4\n5 6 7 8\n").unwrap();
        let err = load_cohort(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hist.mat"), "{err}");

        // non-positive time rejected
        let dir2 = tempfile::tempdir().unwrap();
        save_cohort(&cohort, dir2.path()).unwrap();
        let labels = dir2.path().join("labels.tsv");
        let content = std::fs::read_to_string(&labels).unwrap();
        let patched = content.replacen(&cohort.bags[0].label.time.to_string(), "-1.0", 1);
        std::fs::write(&labels, patched).unwrap();
        let err = load_cohort(dir2.path()).unwrap_err().to_string();
        assert!(err.contains("positive"), "{err}");

        // duplicate slide id rejected
        let dir3 = tempfile::tempdir().unwrap();
        save_cohort(&cohort, dir3.path()).unwrap();
        let labels = dir3.path().join("labels.tsv");
        let mut content = std::fs::read_to_string(&labels).unwrap();
        let dup_line = content.lines().nth(1).unwrap().to_string();
        content.push_str(&dup_line);
        content.push('\n');
        std::fs::write(&labels, content).unwrap();
        let err = load_cohort(dir3.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate slide_id"), "{err}");

        // orphan matrix file (unknown patient reference) rejected
        let dir4 = tempfile::tempdir().unwrap();
        save_cohort(&cohort, dir4.path()).unwrap();
        std::fs::write(dir4.path().join("GHOST.hist.mat"), "1 2\n0 0\n").unwrap();
        let err = load_cohort(dir4.path()).unwrap_err().to_string();
        assert!(err.contains("GHOST"), "{err}");
    }
}
