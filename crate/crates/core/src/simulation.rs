//! Simulation of the weak-instrument MVMR design: true associations,
//! individual-level cohorts reduced to per-SNP OLS summary statistics,
//! metrics, and the Monte Carlo driver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, FitResult, SELECTION_THRESHOLD};
use crate::grouping::{self, PipelineConfig};
use crate::model_selection::{self, derive_seed, CvConfig};
use crate::summary_data::{build_design, SharedCorrelation, SummaryDataset};

/// Correlation matrix handed to the estimators with a simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    Identity,
    /// Sample correlation of the exposures in the exposure cohort.
    #[default]
    Phenotypic,
    /// Compound symmetry at ρ.
    CompoundSymmetry(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub num_exposures: usize,
    pub num_snps: usize,
    pub n: usize,
    pub beta_true: Vec<f64>,
    /// Variance multiplier of the true associations (γ_j ∼ N(0, s·Σ_block)).
    pub gamma_scale: f64,
    pub sigma_u: f64,
    pub sigma_e: f64,
    /// Fractions of SNPs in the all / first-six / last-four blocks.
    pub block_fractions: [f64; 3],
    pub maf_range: (f64, f64),
    /// Seed of the fixed true associations and allele frequencies.
    pub seed: u64,
    pub sigma: SigmaSource,
    /// Individuals per streamed block.
    pub block_size: usize,
    /// Standardize exposures by their cohort sample SD before regression.
    pub standardize: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            num_exposures: 10,
            num_snps: 500,
            n: 100_000,
            beta_true: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0],
            gamma_scale: 0.001,
            sigma_u: 2.0,
            sigma_e: 1.0,
            block_fractions: [0.2, 0.4, 0.4],
            maf_range: (0.01, 0.5),
            seed: 20240601,
            sigma: SigmaSource::Phenotypic,
            block_size: 4096,
            standardize: true,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_exposures != 10 {
            return Err(Error::Invalid("the block design is defined for 10 exposures".into()));
        }
        if self.beta_true.len() != self.num_exposures {
            return Err(Error::Dimension("beta_true length differs from the number of exposures".into()));
        }
        if (self.block_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-12
            || self.block_fractions.iter().any(|f| *f < 0.0)
        {
            return Err(Error::Invalid("block fractions must be non-negative and sum to 1".into()));
        }
        if !(self.gamma_scale > 0.0 && self.sigma_u >= 0.0 && self.sigma_e >= 0.0) {
            return Err(Error::Invalid("variance parameters must be positive".into()));
        }
        let (lo, hi) = self.maf_range;
        if !(0.0 < lo && lo <= hi && hi <= 0.5) {
            return Err(Error::Invalid("allele frequency range must lie in (0, 0.5]".into()));
        }
        if self.n < 10 || self.num_snps <= self.num_exposures || self.block_size == 0 {
            return Err(Error::Invalid("need n ≥ 10, p > K and a positive block size".into()));
        }
        Ok(())
    }

    pub fn exposure_names(&self) -> Vec<String> {
        (1..=self.num_exposures).map(|k| format!("RF{k}")).collect()
    }
}

/// K×K compound symmetry with off-diagonal ρ.
pub fn compound_symmetry(rho: f64, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
}

/// Six-exposure cluster: CS(0.995, 3) and CS(0.9, 3) with 0.5 between.
pub fn cluster1() -> DMatrix<f64> {
    let mut m = DMatrix::from_element(6, 6, 0.5);
    m.view_mut((0, 0), (3, 3)).copy_from(&compound_symmetry(0.995, 3));
    m.view_mut((3, 3), (3, 3)).copy_from(&compound_symmetry(0.9, 3));
    m
}

pub fn cluster2() -> DMatrix<f64> {
    compound_symmetry(0.3, 4)
}

/// All ten: the two clusters with 0.3 between them.
pub fn cluster_all() -> DMatrix<f64> {
    let mut m = DMatrix::from_element(10, 10, 0.3);
    m.view_mut((0, 0), (6, 6)).copy_from(&cluster1());
    m.view_mut((6, 6), (4, 4)).copy_from(&cluster2());
    m
}

/// Fixed truth shared by all replicates.
#[derive(Debug, Clone)]
pub struct TrueModel {
    /// p×K association matrix on the raw exposure scale.
    pub gamma: DMatrix<f64>,
    pub maf: Vec<f64>,
    /// Block index (0 all, 1 first six, 2 last four) per SNP.
    pub block: Vec<u8>,
}

fn mvn_rows(rng: &mut ChaCha8Rng, cov: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let l = cov.clone().cholesky().expect("block covariance is positive definite").l();
    let k = cov.nrows();
    let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * l.transpose()
}

pub fn generate_true_gammas(cfg: &DgpConfig, seed: u64) -> Result<TrueModel> {
    cfg.validate()?;
    let p = cfg.num_snps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_all = (cfg.block_fractions[0] * p as f64).round() as usize;
    let n_first = (cfg.block_fractions[1] * p as f64).round() as usize;
    let n_last = p - n_all - n_first.min(p - n_all);
    let n_first = p - n_all - n_last;
    let mut gamma = DMatrix::zeros(p, 10);
    gamma.view_mut((0, 0), (n_all, 10)).copy_from(&mvn_rows(&mut rng, &(cluster_all() * cfg.gamma_scale), n_all));
    gamma
        .view_mut((n_all, 0), (n_first, 6))
        .copy_from(&mvn_rows(&mut rng, &(cluster1() * cfg.gamma_scale), n_first));
    gamma
        .view_mut((n_all + n_first, 6), (n_last, 4))
        .copy_from(&mvn_rows(&mut rng, &(cluster2() * cfg.gamma_scale), n_last));
    let (lo, hi) = cfg.maf_range;
    let maf = (0..p).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
    let block = (0..p).map(|j| if j < n_all { 0 } else if j < n_all + n_first { 1 } else { 2 }).collect();
    Ok(TrueModel { gamma, maf, block })
}

/// Per-block sums of one cohort.
#[derive(Clone)]
struct CohortSums {
    n: f64,
    sz: DVector<f64>,
    szz: DVector<f64>,
    zx: DMatrix<f64>,
    sx: DVector<f64>,
    xx: DMatrix<f64>,
    // outcome noise N = U + E
    zn: DVector<f64>,
    xn: DVector<f64>,
    sn: f64,
    snn: f64,
}

impl CohortSums {
    fn zeros(p: usize, k: usize) -> Self {
        Self {
            n: 0.0,
            sz: DVector::zeros(p),
            szz: DVector::zeros(p),
            zx: DMatrix::zeros(p, k),
            sx: DVector::zeros(k),
            xx: DMatrix::zeros(k, k),
            zn: DVector::zeros(p),
            xn: DVector::zeros(k),
            sn: 0.0,
            snn: 0.0,
        }
    }

    fn add(&mut self, o: &Self) {
        self.n += o.n;
        self.sz += &o.sz;
        self.szz += &o.szz;
        self.zx += &o.zx;
        self.sx += &o.sx;
        self.xx += &o.xx;
        self.zn += &o.zn;
        self.xn += &o.xn;
        self.sn += o.sn;
        self.snn += o.snn;
    }
}

/// One block of individuals: genotypes Z, exposures X and outcome noise N.
pub struct IndividualBlock {
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub noise: DVector<f64>,
}

fn allele_thresholds(truth: &TrueModel) -> Vec<u32> {
    truth.maf.iter().map(|m| (m * 4_294_967_296.0).min(u32::MAX as f64) as u32).collect()
}

fn generate_block(cfg: &DgpConfig, truth: &TrueModel, thresholds: &[u32], rows: usize, seed: u64) -> IndividualBlock {
    let p = cfg.num_snps;
    let k = cfg.num_exposures;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    // genotype = two Bernoulli(maf) draws from the halves of one u64
    let mut z = DMatrix::<f64>::zeros(rows, p);
    for (j, col) in z.as_mut_slice().chunks_exact_mut(rows).enumerate() {
        let t = thresholds[j];
        for v in col {
            let r = rng.next_u64();
            *v = (((r as u32) < t) as u32 + (((r >> 32) as u32) < t) as u32) as f64;
        }
    }
    let mut x = &z * &truth.gamma;
    let mut noise = DVector::zeros(rows);
    for i in 0..rows {
        let u = cfg.sigma_u * rng.sample::<f64, _>(StandardNormal);
        for c in 0..k {
            x[(i, c)] += u + cfg.sigma_e * rng.sample::<f64, _>(StandardNormal);
        }
        noise[i] = u + cfg.sigma_e * rng.sample::<f64, _>(StandardNormal);
    }
    IndividualBlock { z, x, noise }
}

/// Materializes a whole cohort; for small instances and tests.
pub fn simulate_individuals(cfg: &DgpConfig, truth: &TrueModel, cohort_seed: u64) -> IndividualBlock {
    let th = allele_thresholds(truth);
    let nblocks = cfg.n.div_ceil(cfg.block_size);
    let blocks: Vec<IndividualBlock> = (0..nblocks)
        .map(|b| {
            let rows = cfg.block_size.min(cfg.n - b * cfg.block_size);
            generate_block(cfg, truth, &th, rows, derive_seed(cohort_seed, b as u64))
        })
        .collect();
    let n = cfg.n;
    let mut out = IndividualBlock {
        z: DMatrix::zeros(n, cfg.num_snps),
        x: DMatrix::zeros(n, cfg.num_exposures),
        noise: DVector::zeros(n),
    };
    let mut r0 = 0;
    for b in blocks {
        let r = b.z.nrows();
        out.z.rows_mut(r0, r).copy_from(&b.z);
        out.x.rows_mut(r0, r).copy_from(&b.x);
        out.noise.rows_mut(r0, r).copy_from(&b.noise);
        r0 += r;
    }
    out
}

fn block_sums(b: &IndividualBlock, outcome: bool) -> CohortSums {
    let (rows, p) = b.z.shape();
    let k = b.x.ncols();
    let mut s = CohortSums::zeros(p, k);
    s.n = rows as f64;
    for j in 0..p {
        let col = b.z.column(j);
        s.sz[j] = col.sum();
        s.szz[j] = col.iter().map(|v| v * v).sum();
    }
    s.zx = b.z.tr_mul(&b.x);
    s.sx = DVector::from_fn(k, |c, _| b.x.column(c).sum());
    s.xx = b.x.tr_mul(&b.x);
    if outcome {
        s.zn = b.z.tr_mul(&b.noise);
        s.xn = b.x.tr_mul(&b.noise);
        s.sn = b.noise.sum();
        s.snn = b.noise.norm_squared();
    }
    s
}

fn simulate_cohort(cfg: &DgpConfig, truth: &TrueModel, seed: u64, outcome: bool) -> CohortSums {
    let thresholds = allele_thresholds(truth);
    let nblocks = cfg.n.div_ceil(cfg.block_size);
    let parts: Vec<CohortSums> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let rows = cfg.block_size.min(cfg.n - b * cfg.block_size);
            block_sums(&generate_block(cfg, truth, &thresholds, rows, derive_seed(seed, b as u64)), outcome)
        })
        .collect();
    let mut total = CohortSums::zeros(cfg.num_snps, cfg.num_exposures);
    for part in &parts {
        total.add(part);
    }
    total
}

/// Per-SNP OLS of a standardized trait on genotype from centred sums.
fn ols(szz_c: f64, szt_c: f64, stt_c: f64, n: f64) -> (f64, f64) {
    let b = szt_c / szz_c;
    let rss = (stt_c - b * szt_c).max(0.0);
    (b, (rss / (n - 2.0) / szz_c).sqrt())
}

/// Summary statistics of one replicate: exposures regressed in cohort 1 and
/// the outcome in an independent cohort 2, from streamed sufficient sums.
pub fn simulate_summary_stats(cfg: &DgpConfig, truth: &TrueModel, replicate_seed: u64) -> Result<SummaryDataset> {
    simulate_summary_stats_seeded(cfg, truth, derive_seed(replicate_seed, 1), derive_seed(replicate_seed, 2))
}

/// As [`simulate_summary_stats`] with explicit per-cohort seeds.
pub fn simulate_summary_stats_seeded(
    cfg: &DgpConfig,
    truth: &TrueModel,
    exposure_seed: u64,
    outcome_seed: u64,
) -> Result<SummaryDataset> {
    cfg.validate()?;
    let p = cfg.num_snps;
    let k = cfg.num_exposures;
    let exp = simulate_cohort(cfg, truth, exposure_seed, false);
    let out = simulate_cohort(cfg, truth, outcome_seed, true);
    let sd_of = |sxx: &DMatrix<f64>, n: f64| {
        DVector::from_fn(k, |c, _| if cfg.standardize { (sxx[(c, c)] / (n - 1.0)).sqrt() } else { 1.0 })
    };
    let beta = DVector::from_column_slice(&cfg.beta_true);

    let n1 = exp.n;
    let mx = &exp.sx / n1;
    let sxx_c1 = &exp.xx - &mx * mx.transpose() * n1;
    let sd1 = sd_of(&sxx_c1, n1);
    let mut gamma_hat = DMatrix::zeros(p, k);
    let mut se_x = DMatrix::zeros(p, k);
    for j in 0..p {
        let mz = exp.sz[j] / n1;
        let szz_c = exp.szz[j] - n1 * mz * mz;
        for c in 0..k {
            let szx_c = (exp.zx[(j, c)] - exp.sz[j] * mx[c]) / sd1[c];
            let (b, se) = ols(szz_c, szx_c, sxx_c1[(c, c)] / (sd1[c] * sd1[c]), n1);
            gamma_hat[(j, c)] = b;
            se_x[(j, c)] = se;
        }
    }

    // outcome cohort: Y = X̃β + N with X̃ standardized in this cohort
    let n2 = out.n;
    let mx2 = &out.sx / n2;
    let sxx_c2 = &out.xx - &mx2 * mx2.transpose() * n2;
    let sd2 = sd_of(&sxx_c2, n2);
    let bs = beta.component_div(&sd2);
    let mn = out.sn / n2;
    // centred sums of Y
    let xtn_c = &out.xn - &mx2 * out.sn;
    let syy_c = bs.dot(&(&sxx_c2 * &bs)) + 2.0 * bs.dot(&xtn_c) + (out.snn - n2 * mn * mn);
    let mut gamma_y = DVector::zeros(p);
    let mut se_y = DVector::zeros(p);
    for j in 0..p {
        let mz = out.sz[j] / n2;
        let szz_c = out.szz[j] - n2 * mz * mz;
        let mut szy_c = out.zn[j] - out.sz[j] * mn;
        for c in 0..k {
            szy_c += bs[c] * (out.zx[(j, c)] - out.sz[j] * mx2[c]);
        }
        let (b, se) = ols(szz_c, szy_c, syy_c, n2);
        gamma_y[j] = b;
        se_y[j] = se;
    }

    let sigma = match cfg.sigma {
        SigmaSource::Identity => DMatrix::identity(k, k),
        SigmaSource::Phenotypic => DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                1.0
            } else {
                sxx_c1[(a, b)] / (sxx_c1[(a, a)] * sxx_c1[(b, b)]).sqrt()
            }
        }),
        SigmaSource::CompoundSymmetry(rho) => compound_symmetry(rho, k),
    };
    SummaryDataset::from_arrays(
        &gamma_hat,
        &se_x,
        &gamma_y,
        &se_y,
        SharedCorrelation::new(sigma)?,
        cfg.exposure_names(),
    )
}

/// Population moments of the design on the standardized exposure scale.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    /// γ_jk / sd_k
    pub gamma_std: DMatrix<f64>,
    pub exposure_corr: DMatrix<f64>,
    pub var_z: Vec<f64>,
    pub var_y: f64,
}

pub fn population_moments(cfg: &DgpConfig, truth: &TrueModel) -> PopulationMoments {
    let k = cfg.num_exposures;
    let var_z: Vec<f64> = truth.maf.iter().map(|m| 2.0 * m * (1.0 - m)).collect();
    let dz = DMatrix::from_diagonal(&DVector::from_column_slice(&var_z));
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let cov = truth.gamma.transpose() * dz * &truth.gamma
        + DMatrix::from_element(k, k, su2)
        + DMatrix::identity(k, k) * (cfg.sigma_e * cfg.sigma_e);
    let sd = DVector::from_fn(k, |c, _| cov[(c, c)].sqrt());
    let corr = DMatrix::from_fn(k, k, |a, b| cov[(a, b)] / (sd[a] * sd[b]));
    let gamma_std = DMatrix::from_fn(truth.gamma.nrows(), k, |j, c| truth.gamma[(j, c)] / sd[c]);
    let beta = DVector::from_column_slice(&cfg.beta_true);
    let cov_xu: f64 = (0..k).map(|c| beta[c] * su2 / sd[c]).sum();
    let var_y = beta.dot(&(&corr * &beta)) + su2 + 2.0 * cov_xu + cfg.sigma_e * cfg.sigma_e;
    PopulationMoments { gamma_std, exposure_corr: corr, var_z, var_y }
}

/// Draws summary statistics directly: γ̂_j ∼ N(γ_j, Σ_Xj), Γ̂_j ∼ N(γ_jᵀβ, σ_Yj²)
/// with the standard errors implied by the population moments.
pub fn simulate_summary_fast(cfg: &DgpConfig, truth: &TrueModel, replicate_seed: u64) -> Result<SummaryDataset> {
    cfg.validate()?;
    let mom = population_moments(cfg, truth);
    let p = cfg.num_snps;
    let k = cfg.num_exposures;
    let n = cfg.n as f64;
    let corr = &mom.exposure_corr;
    let l = corr.clone().cholesky().ok_or_else(|| Error::Invalid("exposure correlation not PD".into()))?.l();
    let beta = DVector::from_column_slice(&cfg.beta_true);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(replicate_seed, 3));
    let mut gamma_hat = DMatrix::zeros(p, k);
    let mut se_x = DMatrix::zeros(p, k);
    let mut gamma_y = DVector::zeros(p);
    let mut se_y = DVector::zeros(p);
    for j in 0..p {
        let g = mom.gamma_std.row(j).transpose();
        let vz = mom.var_z[j];
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lz = &l * z;
        for c in 0..k {
            let s = ((1.0 - vz * g[c] * g[c]).max(0.0) / (n * vz)).sqrt();
            se_x[(j, c)] = s;
            gamma_hat[(j, c)] = g[c] + s * lz[c];
        }
        let gy = g.dot(&beta);
        let sy = ((mom.var_y - vz * gy * gy).max(0.0) / (n * vz)).sqrt();
        se_y[j] = sy;
        gamma_y[j] = gy + sy * rng.sample::<f64, _>(StandardNormal);
    }
    let sigma = match cfg.sigma {
        SigmaSource::Identity => DMatrix::identity(k, k),
        SigmaSource::Phenotypic => corr.clone(),
        SigmaSource::CompoundSymmetry(rho) => compound_symmetry(rho, k),
    };
    SummaryDataset::from_arrays(&gamma_hat, &se_x, &gamma_y, &se_y, SharedCorrelation::new(sigma)?, cfg.exposure_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    /// Σ_k (β̂_k − β_k*)²
    pub mse: f64,
    /// mean_k (β̂_k − β_k*)²
    pub mse_per_exposure: f64,
    pub correct_sparsity: f64,
    pub sensitivity: f64,
    pub fpr: f64,
    /// Signed selection per exposure: 1, −1 or 0.
    pub pattern: Vec<i8>,
}

/// Metrics with an explicit selection; a true positive also needs the right sign.
pub fn compute_metrics_selected(beta_hat: &[f64], selected: &[bool], beta_true: &[f64]) -> Result<ReplicateMetrics> {
    if beta_hat.len() != beta_true.len() || selected.len() != beta_true.len() {
        return Err(Error::Dimension("estimate, selection and truth lengths differ".into()));
    }
    let k = beta_true.len();
    let (mut tp, mut tn, mut fp) = (0usize, 0usize, 0usize);
    let mut pattern = Vec::with_capacity(k);
    for i in 0..k {
        let sel = selected[i];
        pattern.push(if sel { beta_hat[i].signum() as i8 } else { 0 });
        if beta_true[i] != 0.0 {
            if sel && beta_hat[i].signum() == beta_true[i].signum() {
                tp += 1;
            }
        } else if sel {
            fp += 1;
        } else {
            tn += 1;
        }
    }
    let nz = beta_true.iter().filter(|b| **b != 0.0).count();
    let z = k - nz;
    let sse: f64 = beta_hat.iter().zip(beta_true).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(ReplicateMetrics {
        mse: sse,
        mse_per_exposure: sse / k as f64,
        correct_sparsity: (tp + tn) as f64 / k as f64,
        sensitivity: if nz > 0 { tp as f64 / nz as f64 } else { 0.0 },
        fpr: if z > 0 { fp as f64 / z as f64 } else { 0.0 },
        pattern,
    })
}

/// Selection by |β̂_k| > 0.001.
pub fn compute_metrics(beta_hat: &[f64], beta_true: &[f64]) -> Result<ReplicateMetrics> {
    let sel: Vec<bool> = beta_hat.iter().map(|b| b.abs() > SELECTION_THRESHOLD).collect();
    compute_metrics_selected(beta_hat, &sel, beta_true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Ivw,
    /// Projected debiased IVW (the SRIVW-style engine).
    Divw,
    Dridge,
    Dlasso,
    Pacs,
    /// PACS with correlation threshold 0.8.
    PacsX,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Ivw => "MVMR-IVW",
            Estimator::Divw => "SRIVW",
            Estimator::Dridge => "MVMR-dRidge",
            Estimator::Dlasso => "MVMR-dLASSO",
            Estimator::Pacs => "MVMR-PACS",
            Estimator::PacsX => "MVMR-PACS-0.8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ivw" => Some(Self::Ivw),
            "divw" | "srivw" => Some(Self::Divw),
            "dridge" => Some(Self::Dridge),
            "dlasso" => Some(Self::Dlasso),
            "pacs" => Some(Self::Pacs),
            "pacs-x" | "pacs-0.8" | "pacsx" => Some(Self::PacsX),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub cv: CvConfig,
    pub estimators: Vec<Estimator>,
    pub replicates: usize,
    pub seed: u64,
    /// Threshold of the PACS-x variant.
    pub pacs_x_threshold: f64,
    /// Use the direct summary-level generator instead of individual-level cohorts.
    pub fast: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            cv: CvConfig::default(),
            estimators: vec![Estimator::Ivw, Estimator::Pacs],
            replicates: 10,
            seed: 1,
            pacs_x_threshold: 0.8,
            fast: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    pub beta: Option<Vec<f64>>,
    pub metrics: Option<ReplicateMetrics>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub is_param: f64,
    pub is_param_standardized: f64,
    pub outcomes: Vec<EstimatorOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub label: String,
    pub median_mse: f64,
    pub correct_sparsity: f64,
    pub sensitivity: f64,
    pub fpr: f64,
    pub successes: usize,
    pub failures: usize,
}

pub fn generate_replicate(cfg: &ExperimentConfig, truth: &TrueModel, replicate: usize) -> Result<(u64, SummaryDataset)> {
    let seed = derive_seed(cfg.seed, replicate as u64);
    let ds = if cfg.fast {
        simulate_summary_fast(&cfg.dgp, truth, seed)?
    } else {
        simulate_summary_stats(&cfg.dgp, truth, seed)?
    };
    Ok((seed, ds))
}

fn outcome_from_fit(est: Estimator, fit: Result<FitResult>, truth: &[f64]) -> EstimatorOutcome {
    match fit {
        Ok(fit) => {
            let beta: Vec<f64> = fit.beta.iter().copied().collect();
            let metrics = match est {
                Estimator::Ivw | Estimator::Divw => estimators::bonferroni_selected(&fit, 0.05)
                    .and_then(|sel| compute_metrics_selected(&beta, &sel, truth).ok()),
                _ => compute_metrics(&beta, truth).ok(),
            };
            EstimatorOutcome { estimator: est, beta: Some(beta), metrics, lambda: fit.lambda, tau: fit.tau, error: None }
        }
        Err(e) => EstimatorOutcome { estimator: est, beta: None, metrics: None, lambda: None, tau: None, error: Some(e.to_string()) },
    }
}

/// Fits every requested estimator on one dataset.
pub fn evaluate_replicate(cfg: &ExperimentConfig, ds: &SummaryDataset, replicate: usize, seed: u64) -> ReplicateRecord {
    let dq = build_design(ds);
    let truth = &cfg.dgp.beta_true;
    let s_raw = crate::matrix_core::instrument_strength(&dq, crate::matrix_core::StrengthScaling::Raw);
    let s_std = crate::matrix_core::instrument_strength(&dq, crate::matrix_core::StrengthScaling::Standardized);
    let mut cv = cfg.cv.clone();
    cv.seed = derive_seed(seed, 17);
    let prob = estimators::Problem::from_design(&dq);
    let outcomes = cfg
        .estimators
        .iter()
        .map(|&est| {
            let fit = match est {
                Estimator::Ivw => estimators::fit_ivw(&dq),
                Estimator::Divw => estimators::fit_divw_problem(&dq, &prob, true),
                Estimator::Dridge => model_selection::cv_ridge(ds, &cv)
                    .and_then(|phi| estimators::fit_dridge_with(&dq, &prob, phi, false)),
                Estimator::Dlasso => model_selection::tune_dlasso(ds, &cv).map(|t| t.fit),
                Estimator::Pacs => model_selection::tune_pacs(ds, &cv).map(|t| t.fit),
                Estimator::PacsX => {
                    let mut c = cv.clone();
                    c.threshold = Some(cfg.pacs_x_threshold);
                    model_selection::tune_pacs(ds, &c).map(|t| t.fit)
                }
            };
            outcome_from_fit(est, fit, truth)
        })
        .collect();
    ReplicateRecord { replicate, seed, is_param: s_raw.is_param, is_param_standardized: s_std.is_param, outcomes }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(estimators: &[Estimator], records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    estimators
        .iter()
        .map(|&est| {
            let ms: Vec<&ReplicateMetrics> = records
                .iter()
                .filter_map(|r| r.outcomes.iter().find(|o| o.estimator == est).and_then(|o| o.metrics.as_ref()))
                .collect();
            let n = ms.len() as f64;
            let mut mses: Vec<f64> = ms.iter().map(|m| m.mse).collect();
            let mean = |f: &dyn Fn(&ReplicateMetrics) -> f64| if ms.is_empty() { f64::NAN } else { ms.iter().map(|m| f(m)).sum::<f64>() / n };
            SummaryRow {
                estimator: est,
                label: est.label().to_string(),
                median_mse: median(&mut mses),
                correct_sparsity: mean(&|m| m.correct_sparsity),
                sensitivity: mean(&|m| m.sensitivity),
                fpr: mean(&|m| m.fpr),
                successes: ms.len(),
                failures: records.len() - ms.len(),
            }
        })
        .collect()
}

/// Runs the Monte Carlo study; `on_record` sees each replicate in order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut on_record: impl FnMut(&ReplicateRecord),
) -> Result<(Vec<SummaryRow>, Vec<ReplicateRecord>)> {
    let truth = generate_true_gammas(&cfg.dgp, cfg.dgp.seed)?;
    let records: Vec<ReplicateRecord> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let (seed, ds) = generate_replicate(cfg, &truth, r)?;
            Ok(evaluate_replicate(cfg, &ds, r, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    for rec in &records {
        on_record(rec);
    }
    Ok((summarize(&cfg.estimators, &records), records))
}

pub const SUMMARY_CSV_HEADER: &str = "method,median_mse,correct_sparsity,sensitivity,fpr,replicates,failures";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label, r.median_mse, r.correct_sparsity, r.sensitivity, r.fpr, r.successes, r.failures
        ));
    }
    out
}

/// One pipeline run on a simulated replicate, checked against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub replicate: usize,
    pub label: String,
    pub true_model: bool,
    /// Per true group: did the CI cover the group effect (only under the true model).
    pub covered: Vec<bool>,
    pub estimates: Vec<f64>,
    pub ses: Vec<f64>,
    pub select_strength: f64,
    pub infer_strength: f64,
    pub error: Option<String>,
}

/// The signed grouping label of the truth, e.g. "1,1,1,0,0,0,0,0,2,0".
pub fn true_label(beta_true: &[f64]) -> String {
    grouping::label_from_beta(&DVector::from_column_slice(beta_true), grouping::DEFAULT_PRECISION)
}

pub fn run_pipeline_replicate(
    cfg: &ExperimentConfig,
    pipeline: &PipelineConfig,
    ds: &SummaryDataset,
    replicate: usize,
    seed: u64,
) -> PipelineRecord {
    let truth = DVector::from_column_slice(&cfg.dgp.beta_true);
    let target = true_label(&cfg.dgp.beta_true);
    match grouping::post_selection_pipeline(ds, pipeline, derive_seed(seed, 29)) {
        Ok(out) => {
            let label = out.selection.label(ds.num_exposures());
            let true_model = label == target;
            let (mut covered, mut estimates, mut ses) = (vec![], vec![], vec![]);
            if let Some(inf) = &out.inference {
                estimates = inf.group_estimates.iter().copied().collect();
                ses = inf.standard_errors().iter().copied().collect();
                if true_model {
                    let (cg, _) = grouping::build_group_matrices(&out.selection, ds.num_exposures());
                    let target_effects = &cg * &truth;
                    covered = (0..target_effects.len())
                        .map(|l| inf.ci_low[l] <= target_effects[l] && target_effects[l] <= inf.ci_high[l])
                        .collect();
                }
            }
            PipelineRecord {
                replicate,
                label,
                true_model,
                covered,
                estimates,
                ses,
                select_strength: out.diagnostics.select_strength.is_param,
                infer_strength: out.diagnostics.infer_strength.is_param,
                error: out.inference_status.clone(),
            }
        }
        Err(e) => PipelineRecord {
            replicate,
            label: String::new(),
            true_model: false,
            covered: vec![],
            estimates: vec![],
            ses: vec![],
            select_strength: f64::NAN,
            infer_strength: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_covariances_are_pd() {
        let ev = crate::matrix_core::sym_eigenvalues(&compound_symmetry(0.995, 3));
        assert!((ev.min() - 0.005).abs() < 1e-12);
        assert!(cluster_all().cholesky().is_some());
    }

    #[test]
    fn true_gammas_have_block_zeros() {
        let cfg = DgpConfig::default();
        let t = generate_true_gammas(&cfg, 3).unwrap();
        for j in 0..cfg.num_snps {
            match t.block[j] {
                1 => assert!((6..10).all(|c| t.gamma[(j, c)] == 0.0)),
                2 => assert!((0..6).all(|c| t.gamma[(j, c)] == 0.0)),
                _ => assert!((0..10).all(|c| t.gamma[(j, c)] != 0.0)),
            }
        }
        assert_eq!(t.block.iter().filter(|b| **b == 0).count(), 100);
        assert_eq!(t.block.iter().filter(|b| **b == 2).count(), 200);
    }

    #[test]
    fn metrics_examples() {
        let truth = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0];
        let m = compute_metrics(&[0.0; 10], &truth).unwrap();
        assert_eq!((m.sensitivity, m.fpr, m.correct_sparsity), (0.0, 0.0, 0.6));
        assert!((m.mse_per_exposure - 0.325).abs() < 1e-15);
        assert!((m.mse - 3.25).abs() < 1e-15);
        let m = compute_metrics(&truth, &truth).unwrap();
        assert_eq!((m.sensitivity, m.fpr, m.correct_sparsity, m.mse), (1.0, 0.0, 1.0, 0.0));
        let mut flipped = truth;
        flipped[0] = -1.0;
        let m = compute_metrics(&flipped, &truth).unwrap();
        assert_eq!(m.sensitivity, 0.75);
        assert_eq!(m.correct_sparsity, 0.9);
    }

    fn dense_ols(z: &DVector<f64>, t: &DVector<f64>) -> (f64, f64) {
        let n = z.len() as f64;
        let x = DMatrix::from_fn(z.len(), 2, |i, c| if c == 0 { 1.0 } else { z[i] });
        let xtx = x.transpose() * &x;
        let inv = xtx.try_inverse().unwrap();
        let coef = &inv * x.transpose() * t;
        let r = t - &x * &coef;
        let s2 = r.norm_squared() / (n - 2.0);
        (coef[1], (s2 * inv[(1, 1)]).sqrt())
    }

    fn small_cfg() -> DgpConfig {
        DgpConfig { n: 50, num_snps: 12, block_size: 16, ..DgpConfig::default() }
    }

    #[test]
    fn streamed_ols_matches_dense_reference() {
        let cfg = small_cfg();
        let truth = generate_true_gammas(&cfg, 4).unwrap();
        let ds = simulate_summary_stats_seeded(&cfg, &truth, 11, 12).unwrap();
        let c1 = simulate_individuals(&cfg, &truth, 11);
        let c2 = simulate_individuals(&cfg, &truth, 12);
        let standardize = |x: &DMatrix<f64>| {
            let mut x = x.clone();
            for mut col in x.column_iter_mut() {
                let m = col.mean();
                col.add_scalar_mut(-m);
                let sd = (col.norm_squared() / (col.len() as f64 - 1.0)).sqrt();
                col /= sd;
            }
            x
        };
        let x1 = standardize(&c1.x);
        let x2 = standardize(&c2.x);
        let y = &x2 * DVector::from_column_slice(&cfg.beta_true) + &c2.noise;
        for j in 0..cfg.num_snps {
            let snp = &ds.snps()[j];
            for c in 0..cfg.num_exposures {
                let (b, se) = dense_ols(&c1.z.column(j).into_owned(), &x1.column(c).into_owned());
                assert!((snp.gamma_hat[c] - b).abs() < 1e-10, "snp {j} exposure {c}");
                assert!((snp.se_x[c] - se).abs() < 1e-10);
            }
            let (b, se) = dense_ols(&c2.z.column(j).into_owned(), &y);
            assert!((snp.gamma_outcome_hat - b).abs() < 1e-10);
            assert!((snp.se_y - se).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_single_instrument_is_exact() {
        let mut cfg = DgpConfig { n: 400, num_snps: 12, sigma_u: 0.0, sigma_e: 0.0, standardize: false, ..DgpConfig::default() };
        cfg.sigma = SigmaSource::Identity;
        let mut truth = generate_true_gammas(&cfg, 2).unwrap();
        let row: Vec<f64> = truth.gamma.row(0).iter().copied().collect();
        truth.gamma.fill(0.0);
        for c in 0..10 {
            truth.gamma[(0, c)] = row[c];
        }
        let c1 = simulate_individuals(&cfg, &truth, 1);
        let sums = block_sums(&c1, false);
        let n = sums.n;
        let mz = sums.sz[0] / n;
        let szz_c = sums.szz[0] - n * mz * mz;
        for c in 0..10 {
            let mx = sums.sx[c] / n;
            let b = (sums.zx[(0, c)] - sums.sz[0] * mx) / szz_c;
            assert!((b - row[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn cohorts_use_disjoint_streams() {
        let cfg = small_cfg();
        let truth = generate_true_gammas(&cfg, 4).unwrap();
        let a = simulate_summary_stats_seeded(&cfg, &truth, 11, 12).unwrap();
        let b = simulate_summary_stats_seeded(&cfg, &truth, 11, 13).unwrap();
        for (sa, sb) in a.snps().iter().zip(b.snps()) {
            assert_eq!(sa.gamma_hat, sb.gamma_hat);
            assert_ne!(sa.gamma_outcome_hat, sb.gamma_outcome_hat);
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = DgpConfig { n: 3000, num_snps: 30, block_size: 256, ..DgpConfig::default() };
        let truth = generate_true_gammas(&cfg, 4).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let two = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate_summary_stats(&cfg, &truth, 9).unwrap());
        let b = two.install(|| simulate_summary_stats(&cfg, &truth, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn cluster1_sample_covariance() {
        let cfg = DgpConfig { num_snps: 20_000, ..DgpConfig::default() };
        let t = generate_true_gammas(&cfg, 8).unwrap();
        let rows: Vec<usize> = (0..cfg.num_snps).filter(|&j| t.block[j] == 1).collect();
        let target = cluster1() * cfg.gamma_scale;
        for a in 0..6 {
            for b in 0..6 {
                let cov: f64 = rows.iter().map(|&j| t.gamma[(j, a)] * t.gamma[(j, b)]).sum::<f64>() / rows.len() as f64;
                assert!((cov - target[(a, b)]).abs() < 0.1 * target[(a, b)], "{a},{b}");
            }
        }
    }
}
