//! Tuning grids, cross-validation on thinned folds, and the 1SE rule.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, FitResult, LqaConfig, Method, Problem};
use crate::matrix_core::{self, InstrumentStrength, StrengthScaling};
use crate::summary_data::{build_design, exposure_correlation, CorrelationBasis, SummaryDataset};
use crate::thinning::{self, ThinningPlan};

pub const DEFAULT_TAUS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// SplitMix64 finalizer of `seed + stream`, for independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub base_rate: f64,
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// (μ̂/√(μ̂+p))^{2/3} when μ̂ > p, else (p/2)^{1/3}.
pub fn lambda_base_rate(mu_min: f64, p: usize) -> f64 {
    let pf = p as f64;
    if mu_min > pf {
        (mu_min / (mu_min + pf).sqrt()).powf(2.0 / 3.0)
    } else {
        (pf / 2.0).cbrt()
    }
}

/// λ = base × 10^u for u evenly spaced on [−2, 2].
pub fn build_lambda_grid(strength: &InstrumentStrength, p: usize, n_points: usize) -> TuningGrid {
    grid_from_base(lambda_base_rate(strength.mu_min, p), n_points, DEFAULT_TAUS.to_vec())
}

pub fn grid_from_base(base_rate: f64, n_points: usize, taus: Vec<f64>) -> TuningGrid {
    let n = n_points.max(1);
    TuningGrid { lambdas: log_spaced(base_rate * 1e-2, base_rate * 1e2, n), taus, base_rate }
}

/// B = (max(μ̂, 0) + p)^{2/5}.
pub fn ridge_anchor(mu_min: f64, p: usize) -> f64 {
    (mu_min.max(0.0) + p as f64).powf(0.4)
}

/// Log-spaced φ on [B·1e-4, B·1e2].
pub fn ridge_grid(mu_min: f64, p: usize, n_points: usize) -> Vec<f64> {
    let b = ridge_anchor(mu_min, p);
    log_spaced(b * 1e-4, b * 1e2, n_points.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    Min,
    #[default]
    OneSe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// Adaptive weights from each training set's own initial fit.
    #[default]
    PerFold,
    /// Weights from the full-data initial fit reused in every fold.
    FullData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub taus: Vec<f64>,
    pub ridge_points: usize,
    /// Correlation threshold x of the PACS-x variant.
    pub threshold: Option<f64>,
    pub basis: CorrelationBasis,
    pub lqa: LqaConfig,
    /// Start each λ from the previous λ's solution instead of the initial fit.
    pub warm_start: bool,
    /// Treat fold fits that hit the LQA iteration cap as failures.
    #[serde(default)]
    pub strict_convergence: bool,
    pub weights: WeightSource,
    pub rule: SelectionRule,
    pub scaling: StrengthScaling,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 3,
            seed: 1,
            grid_points: 25,
            taus: DEFAULT_TAUS.to_vec(),
            ridge_points: 25,
            threshold: None,
            basis: CorrelationBasis::Raw,
            lqa: LqaConfig::default(),
            warm_start: true,
            strict_convergence: false,
            weights: WeightSource::PerFold,
            rule: SelectionRule::OneSe,
            scaling: StrengthScaling::Standardized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub lambda: f64,
    pub tau: f64,
    pub mean_loss: f64,
    pub se_loss: f64,
    /// Folds whose fit errored (or did not converge, under strict convergence).
    pub failures: usize,
    /// Folds whose LQA hit the iteration cap; their last iterate is scored.
    #[serde(default)]
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub candidates: Vec<CandidateLoss>,
    pub chosen_lambda: f64,
    pub chosen_tau: f64,
    pub chosen_index: usize,
    pub min_index: usize,
    pub rule: SelectionRule,
}

/// Picks a candidate. Under 1SE: among candidates with mean loss within one
/// SE of the minimum, the largest λ, then the largest τ at that λ. Failed
/// candidates (non-finite mean) are skipped.
pub fn select_candidate(cands: &[CandidateLoss], rule: SelectionRule) -> Result<(usize, usize)> {
    let min_index = cands
        .iter()
        .enumerate()
        .filter(|(_, c)| c.mean_loss.is_finite())
        .min_by(|a, b| a.1.mean_loss.total_cmp(&b.1.mean_loss))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::NoUsableCandidate(format!("{} candidates, all failed", cands.len())))?;
    let chosen = match rule {
        SelectionRule::Min => min_index,
        SelectionRule::OneSe => {
            let cut = cands[min_index].mean_loss + cands[min_index].se_loss.max(0.0);
            cands
                .iter()
                .enumerate()
                .filter(|(_, c)| c.mean_loss.is_finite() && c.mean_loss <= cut)
                .max_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda).then(a.1.tau.total_cmp(&b.1.tau)))
                .map(|(i, _)| i)
                .unwrap_or(min_index)
        }
    };
    Ok((chosen, min_index))
}

fn mean_and_se(losses: &[f64]) -> (f64, f64) {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    if losses.len() < 2 {
        return (mean, 0.0);
    }
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One train/validate split.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Problem,
    pub train_rhat: DMatrix<f64>,
    pub valid: Problem,
}

/// Thinned splits of one dataset, shared by ridge and PACS tuning.
#[derive(Debug, Clone)]
pub struct CvWorkspace {
    pub splits: Vec<FoldSplit>,
    pub num_snps: usize,
}

impl CvWorkspace {
    pub fn new(ds: &SummaryDataset, cfg: &CvConfig) -> Result<Self> {
        if cfg.repeats == 0 {
            return Err(Error::Invalid("repeats must be at least 1".into()));
        }
        let jobs: Vec<(usize, usize)> = (0..cfg.repeats).flat_map(|r| (0..cfg.folds).map(move |m| (r, m))).collect();
        let plans = (0..cfg.repeats)
            .map(|r| ThinningPlan::even(cfg.folds, derive_seed(cfg.seed, r as u64)))
            .collect::<Result<Vec<_>>>()?;
        let reps = plans.par_iter().map(|plan| thinning::thin_multi_fold(ds, plan)).collect::<Result<Vec<_>>>()?;
        let splits = jobs
            .par_iter()
            .map(|&(r, m)| {
                let train = thinning::training_complement(ds, &reps[r], m)?;
                let train_dq = build_design(&train);
                let valid_dq = build_design(&reps[r].folds[m]);
                Ok(FoldSplit {
                    train_rhat: exposure_correlation(&train, cfg.basis),
                    train: Problem::from_design(&train_dq),
                    valid: Problem::from_design(&valid_dq),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { splits, num_snps: ds.num_snps() })
    }

    /// Same splits, produced by the caller (e.g. with a held-out fold mutated).
    pub fn from_splits(splits: Vec<FoldSplit>, num_snps: usize) -> Self {
        Self { splits, num_snps }
    }
}

/// φ* minimizing the mean validation loss of the ridge fit over the grid.
pub fn cv_ridge_grid(ws: &CvWorkspace, grid: &[f64]) -> Result<(f64, Vec<CandidateLoss>)> {
    let cands: Vec<CandidateLoss> = grid
        .par_iter()
        .map(|&phi| {
            let mut failures = 0;
            let losses: Vec<f64> = ws
                .splits
                .iter()
                .map(|s| match estimators::fit_dridge_problem(&s.train, phi) {
                    Ok(b) => s.valid.loss(&b),
                    Err(_) => {
                        failures += 1;
                        f64::NAN
                    }
                })
                .collect();
            let (mean_loss, se_loss) = mean_and_se(&losses);
            CandidateLoss { lambda: phi, tau: 0.0, mean_loss, se_loss, failures, nonconverged: 0 }
        })
        .collect();
    let (i, _) = select_candidate(&cands, SelectionRule::Min)?;
    Ok((cands[i].lambda, cands))
}

pub fn cv_ridge(ds: &SummaryDataset, plan_cfg: &CvConfig) -> Result<f64> {
    let ws = CvWorkspace::new(ds, plan_cfg)?;
    let dq = build_design(ds);
    let s = matrix_core::instrument_strength(&dq, plan_cfg.scaling);
    Ok(cv_ridge_grid(&ws, &ridge_grid(s.mu_min, ds.num_snps(), plan_cfg.ridge_points))?.0)
}

fn candidate_from_folds(lambda: f64, tau: f64, vals: impl Iterator<Item = Option<(f64, bool)>>) -> CandidateLoss {
    let vals: Vec<Option<(f64, bool)>> = vals.collect();
    let failures = vals.iter().filter(|v| v.is_none()).count();
    let nonconverged = vals.iter().flatten().filter(|v| !v.1).count();
    let (mean_loss, se_loss) = if failures == 0 {
        mean_and_se(&vals.iter().flatten().map(|v| v.0).collect::<Vec<_>>())
    } else {
        (f64::NAN, f64::NAN)
    };
    CandidateLoss { lambda, tau, mean_loss, se_loss, failures, nonconverged }
}

/// CV over the (λ, τ) grid given the ridge penalty for initial fits.
/// `full_init` supplies β̃ and r̂ when weights come from the full data.
pub fn cv_pacs_grid(
    ws: &CvWorkspace,
    grid: &TuningGrid,
    phi: f64,
    cfg: &CvConfig,
    full_init: Option<(&DVector<f64>, &DMatrix<f64>)>,
) -> Result<CvResult> {
    if grid.lambdas.is_empty() || grid.taus.is_empty() {
        return Err(Error::Invalid("tuning grid is empty".into()));
    }
    let nl = grid.lambdas.len();
    let nt = grid.taus.len();
    // per split: losses[tau][lambda] and failure flags
    let per_split: Vec<Vec<Vec<Option<(f64, bool)>>>> = ws
        .splits
        .par_iter()
        .map(|s| {
            let init = estimators::fit_dridge_problem(&s.train, phi);
            grid.taus
                .iter()
                .map(|&tau| {
                    let Ok(local_init) = init.as_ref() else {
                        return vec![None; nl];
                    };
                    let weights = match (cfg.weights, full_init) {
                        (WeightSource::FullData, Some((b, r))) => estimators::pacs_weights(b, r, tau, cfg.threshold),
                        _ => estimators::pacs_weights(local_init, &s.train_rhat, tau, cfg.threshold),
                    };
                    let mut start = local_init.clone();
                    grid.lambdas
                        .iter()
                        .map(|&lambda| {
                            match estimators::fit_pacs_problem(&s.train, &weights, lambda, &start, &cfg.lqa, None) {
                                Ok(fit) if fit.converged || !cfg.strict_convergence => {
                                    if cfg.warm_start {
                                        start = fit.beta.clone();
                                    }
                                    Some((s.valid.loss(&fit.beta), fit.converged))
                                }
                                _ => None,
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut candidates = Vec::with_capacity(nl * nt);
    for (ti, &tau) in grid.taus.iter().enumerate() {
        for (li, &lambda) in grid.lambdas.iter().enumerate() {
            candidates.push(candidate_from_folds(lambda, tau, per_split.iter().map(|s| s[ti][li])));
        }
    }
    let (chosen_index, min_index) = select_candidate(&candidates, cfg.rule).map_err(|_| {
        let failed: usize = candidates.iter().map(|c| c.failures).sum();
        Error::NoUsableCandidate(format!(
            "{} candidates over {} splits; {failed} fold fits failed or did not converge",
            candidates.len(),
            ws.splits.len()
        ))
    })?;
    Ok(CvResult {
        chosen_lambda: candidates[chosen_index].lambda,
        chosen_tau: candidates[chosen_index].tau,
        chosen_index,
        min_index,
        rule: cfg.rule,
        candidates,
    })
}

/// Tuned PACS fit on a dataset: ridge CV, PACS CV, and the full-data refit.
#[derive(Debug, Clone)]
pub struct TunedFit {
    pub fit: FitResult,
    pub cv: CvResult,
    pub phi: f64,
    pub ridge_losses: Vec<CandidateLoss>,
    pub beta_init: DVector<f64>,
    pub strength: InstrumentStrength,
    pub grid: TuningGrid,
}

pub fn cv_pacs(ds: &SummaryDataset, grid: &TuningGrid, cfg: &CvConfig) -> Result<CvResult> {
    Ok(tune_pacs_with_grid(ds, Some(grid), cfg)?.cv)
}

pub fn tune_pacs(ds: &SummaryDataset, cfg: &CvConfig) -> Result<TunedFit> {
    tune_pacs_with_grid(ds, None, cfg)
}

fn tune_pacs_with_grid(ds: &SummaryDataset, grid: Option<&TuningGrid>, cfg: &CvConfig) -> Result<TunedFit> {
    let dq = build_design(ds);
    let strength = matrix_core::instrument_strength(&dq, cfg.scaling);
    let p = ds.num_snps();
    let grid = match grid {
        Some(g) => g.clone(),
        None => grid_from_base(lambda_base_rate(strength.mu_min, p), cfg.grid_points, cfg.taus.clone()),
    };
    let ws = CvWorkspace::new(ds, cfg)?;
    let (phi, ridge_losses) = cv_ridge_grid(&ws, &ridge_grid(strength.mu_min, p, cfg.ridge_points))?;
    let full = Problem::from_design(&dq);
    let rhat = exposure_correlation(ds, cfg.basis);
    let beta_init = estimators::fit_dridge_problem(&full, phi)?;
    let cv = cv_pacs_grid(&ws, &grid, phi, cfg, Some((&beta_init, &rhat)))?;
    let weights = estimators::pacs_weights(&beta_init, &rhat, cv.chosen_tau, cfg.threshold);
    let mut fit = estimators::fit_pacs_problem(&full, &weights, cv.chosen_lambda, &beta_init, &cfg.lqa, None)?;
    fit.method = Method::Pacs;
    Ok(TunedFit { fit, cv, phi, ridge_losses, beta_init, strength, grid })
}

/// Tuned adaptive LASSO: CV over the same grid with pairwise weights off.
pub fn tune_dlasso(ds: &SummaryDataset, cfg: &CvConfig) -> Result<TunedFit> {
    let dq = build_design(ds);
    let strength = matrix_core::instrument_strength(&dq, cfg.scaling);
    let p = ds.num_snps();
    let grid = grid_from_base(lambda_base_rate(strength.mu_min, p), cfg.grid_points, cfg.taus.clone());
    let ws = CvWorkspace::new(ds, cfg)?;
    let (phi, ridge_losses) = cv_ridge_grid(&ws, &ridge_grid(strength.mu_min, p, cfg.ridge_points))?;
    let nl = grid.lambdas.len();
    let per_split: Vec<Vec<Vec<Option<(f64, bool)>>>> = ws
        .splits
        .par_iter()
        .map(|s| {
            let init = estimators::fit_dridge_problem(&s.train, phi);
            grid.taus
                .iter()
                .map(|&tau| {
                    let Ok(b0) = init.as_ref() else { return vec![None; nl] };
                    let w = b0.map(|b| b.abs().max(estimators::DENOM_FLOOR).powf(-tau));
                    grid.lambdas
                        .iter()
                        .map(|&lambda| match estimators::fit_dlasso_problem(&s.train, &w, tau, lambda, b0, &cfg.lqa) {
                            Ok(f) if f.converged || !cfg.strict_convergence => Some((s.valid.loss(&f.beta), f.converged)),
                            _ => None,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut candidates = Vec::new();
    for (ti, &tau) in grid.taus.iter().enumerate() {
        for (li, &lambda) in grid.lambdas.iter().enumerate() {
            candidates.push(candidate_from_folds(lambda, tau, per_split.iter().map(|s| s[ti][li])));
        }
    }
    let (chosen_index, min_index) = select_candidate(&candidates, cfg.rule)?;
    let cv = CvResult {
        chosen_lambda: candidates[chosen_index].lambda,
        chosen_tau: candidates[chosen_index].tau,
        chosen_index,
        min_index,
        rule: cfg.rule,
        candidates,
    };
    let full = Problem::from_design(&dq);
    let beta_init = estimators::fit_dridge_problem(&full, phi)?;
    let w = beta_init.map(|b| b.abs().max(estimators::DENOM_FLOOR).powf(-cv.chosen_tau));
    let fit = estimators::fit_dlasso_problem(&full, &w, cv.chosen_tau, cv.chosen_lambda, &beta_init, &cfg.lqa)?;
    Ok(TunedFit { fit, cv, phi, ridge_losses, beta_init, strength, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::StrengthScaling;

    fn cand(lambda: f64, tau: f64, mean: f64, se: f64) -> CandidateLoss {
        CandidateLoss { lambda, tau, mean_loss: mean, se_loss: se, failures: 0, nonconverged: 0 }
    }

    #[test]
    fn base_rates() {
        assert!((lambda_base_rate(0.0, 128) - 4.0).abs() < 1e-12);
        let expect = (400.0 / 500f64.sqrt()).powf(2.0 / 3.0);
        assert!((lambda_base_rate(400.0, 100) - expect).abs() < 1e-12);
        assert!((ridge_anchor(-5.0, 32) - 4.0).abs() < 1e-12);
        let g = ridge_grid(-5.0, 32, 7);
        assert!((g[0] - 4e-4).abs() < 1e-16 && (g[6] - 400.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_grid_shape() {
        let s = InstrumentStrength::from_eigen(0.0, 1.0, 128, StrengthScaling::Raw);
        let g = build_lambda_grid(&s, 128, 25);
        assert_eq!(g.lambdas.len(), 25);
        assert!(g.lambdas.windows(2).all(|w| w[0] < w[1]));
        assert!((g.lambdas[12] - 4.0).abs() < 1e-12);
        assert!((g.lambdas[0] - 0.04).abs() < 1e-12);
        assert_eq!(g.taus, DEFAULT_TAUS.to_vec());
    }

    #[test]
    fn one_se_rule() {
        let single = [cand(1.0, 1.0, 3.0, 0.1)];
        assert_eq!(select_candidate(&single, SelectionRule::OneSe).unwrap().0, 0);
        let tie = [cand(1.0, 1.0, 3.0, 0.0), cand(2.0, 1.0, 3.0, 0.0)];
        assert_eq!(select_candidate(&tie, SelectionRule::OneSe).unwrap().0, 1);
        let c = [
            cand(1.0, 0.5, 1.0, 0.5),
            cand(2.0, 0.5, 1.4, 0.1),
            cand(2.0, 3.0, 1.2, 0.1),
            cand(4.0, 1.0, 1.6, 0.1),
            cand(2.0, 2.0, f64::NAN, f64::NAN),
        ];
        let (ch, mi) = select_candidate(&c, SelectionRule::OneSe).unwrap();
        assert_eq!(mi, 0);
        assert_eq!(ch, 2);
        assert_eq!(select_candidate(&c, SelectionRule::Min).unwrap().0, 0);
    }

    #[test]
    fn all_failed_is_an_error() {
        let c = [cand(1.0, 1.0, f64::NAN, f64::NAN)];
        assert!(matches!(select_candidate(&c, SelectionRule::OneSe), Err(Error::NoUsableCandidate(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
