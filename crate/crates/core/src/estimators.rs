//! Point estimators: IVW, debiased IVW, debiased ridge, and the penalized
//! debiased fits (adaptive LASSO and PACS) by local quadratic approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_core::{self, AdmmConfig};
use crate::summary_data::DesignQuantities;

/// Exposures with |β̂| above this are counted as selected.
pub const SELECTION_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ivw,
    Divw,
    Dridge,
    Dlasso,
    Pacs,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub variance: Option<DMatrix<f64>>,
    pub method: Method,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
}

impl FitResult {
    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        self.variance.as_ref().map(|v| DVector::from_fn(v.nrows(), |i, _| v[(i, i)].max(0.0).sqrt()))
    }

    pub fn selected(&self) -> Vec<bool> {
        self.beta.iter().map(|b| b.abs() > SELECTION_THRESHOLD).collect()
    }
}

/// The debiased quadratic ½βᵀA₊β − bᵀβ, with A = Π̂ᵀWΠ̂ − V projected onto
/// the PSD cone once and reused by every fit on the same data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub a_raw: DMatrix<f64>,
    pub a_plus: DMatrix<f64>,
    pub b: DVector<f64>,
    /// A was already PSD, so A₊ = A.
    pub raw_psd: bool,
    pub projection_converged: bool,
    /// Smallest eigenvalue of A₊.
    pub min_eigen: f64,
}

impl Problem {
    pub fn new(a_raw: DMatrix<f64>, b: DVector<f64>) -> Self {
        let proj = matrix_core::nearest_psd_maxnorm(&a_raw, &AdmmConfig::default());
        let raw_psd = proj.iterations == 0;
        if !proj.converged {
            log::debug!("PSD projection hit the iteration cap; using the best iterate");
        }
        let min_eigen = matrix_core::min_eigenvalue(&proj.matrix);
        Self { a_raw, a_plus: proj.matrix, b, raw_psd, projection_converged: proj.converged, min_eigen }
    }

    pub fn from_design(dq: &DesignQuantities) -> Self {
        Self::new(dq.debiased_normal(), dq.cross.clone())
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// ½βᵀA₊β − bᵀβ
    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        0.5 * beta.dot(&(&self.a_plus * beta)) - self.b.dot(beta)
    }

    /// Diagonal jitter used when A₊ is only semidefinite.
    fn jitter(&self) -> f64 {
        let k = self.dim() as f64;
        let scale = self.a_plus.trace().abs() / k;
        if self.min_eigen > 1e-10 * scale {
            0.0
        } else {
            1e-10 * scale.max(f64::MIN_POSITIVE)
        }
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = m.cholesky()?;
    let x = chol.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().min()
}

/// Plug-in sandwich middle term with β̂ for β₀:
/// Σ_j (1 + β̂ᵀV_jβ̂) γ̂_jγ̂_jᵀσ_Yj⁻² + V_jβ̂β̂ᵀV_j.
///
/// γ̂_jγ̂_jᵀσ_Yj⁻² equals the debiased M̂_j + V_j, so the sum is PSD.
pub fn variance_middle(dq: &DesignQuantities, beta: &DVector<f64>) -> DMatrix<f64> {
    let (p, k) = dq.pi_hat.shape();
    let mut mid = DMatrix::zeros(k, k);
    let mut scaled = DMatrix::zeros(p, k);
    for j in 0..p {
        let sx_beta = &dq.sigma_xj[j] * beta;
        let wj = dq.weights[j];
        let c = 1.0 + wj * beta.dot(&sx_beta);
        let f = (c * wj).sqrt();
        for a in 0..k {
            scaled[(j, a)] = dq.pi_hat[(j, a)] * f;
        }
        let vb = sx_beta * wj;
        mid += &vb * vb.transpose();
    }
    mid += scaled.transpose() * &scaled;
    matrix_core::symmetrize(&mid)
}

fn sandwich(a_inv: &DMatrix<f64>, mid: &DMatrix<f64>) -> DMatrix<f64> {
    matrix_core::symmetrize(&(a_inv * mid * a_inv.transpose()))
}

/// β̂ = (Π̂ᵀWΠ̂)⁻¹Π̂ᵀWΓ̂ with a multiplicative random-effects variance.
pub fn fit_ivw(dq: &DesignQuantities) -> Result<FitResult> {
    let normal = &dq.normal;
    let svs = normal.clone().singular_values();
    let (smax, smin) = (svs.max(), svs.min());
    if !(smin > 0.0) || smax / smin > 1e12 {
        return Err(Error::SingularNormal { smallest_singular_value: smin });
    }
    let beta = solve_spd(normal.clone(), &dq.cross)
        .ok_or(Error::SingularNormal { smallest_singular_value: smin })?;
    let resid = &dq.gamma_vec - &dq.pi_hat * &beta;
    let rss: f64 = resid.iter().zip(dq.weights.iter()).map(|(r, w)| r * r * w).sum();
    let (p, k) = dq.pi_hat.shape();
    let phi = if p > k { (rss / (p - k) as f64).max(1.0) } else { 1.0 };
    let inv = normal.clone().try_inverse().ok_or(Error::SingularNormal { smallest_singular_value: smin })?;
    let objective = 0.5 * beta.dot(&(normal * &beta)) - dq.cross.dot(&beta);
    Ok(FitResult {
        beta,
        converged: true,
        iterations: 1,
        objective,
        variance: Some(matrix_core::symmetrize(&(inv * phi))),
        method: Method::Ivw,
        lambda: None,
        tau: None,
    })
}

/// Inverse of A₊, or the near-null eigenvectors when it is singular.
fn invert_identified(a_plus: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = matrix_core::sym_eigen(a_plus);
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = 1e-10 * top.max(f64::MIN_POSITIVE);
    let null: Vec<Vec<f64>> = (0..vals.len())
        .filter(|&i| vals[i] <= cutoff)
        .map(|i| vecs.column(i).iter().copied().collect())
        .collect();
    if !null.is_empty() {
        return Err(Error::Unidentified { directions: null });
    }
    Ok(matrix_core::spectral_map(a_plus, |l| 1.0 / l))
}

/// Debiased IVW on the projected matrix: β̂ = A₊⁻¹Π̂ᵀWΓ̂.
pub fn fit_divw(dq: &DesignQuantities, with_variance: bool) -> Result<FitResult> {
    fit_divw_problem(dq, &Problem::from_design(dq), with_variance)
}

pub fn fit_divw_problem(dq: &DesignQuantities, prob: &Problem, with_variance: bool) -> Result<FitResult> {
    let a_inv = invert_identified(&prob.a_plus)?;
    let beta = &a_inv * &prob.b;
    let variance = with_variance.then(|| sandwich(&a_inv, &variance_middle(dq, &beta)));
    Ok(FitResult {
        objective: prob.loss(&beta),
        beta,
        converged: true,
        iterations: 1,
        variance,
        method: Method::Divw,
        lambda: None,
        tau: None,
    })
}

/// Closed-form ridge on the projected debiased loss, (A₊ + φI)⁻¹Π̂ᵀWΓ̂.
/// The reported objective carries the penalty (φ/2)‖β‖².
pub fn fit_dridge_problem(prob: &Problem, phi: f64) -> Result<DVector<f64>> {
    if !(phi >= 0.0) {
        return Err(Error::Invalid(format!("ridge penalty must be non-negative, got {phi}")));
    }
    let k = prob.dim();
    let shift = if phi > 0.0 { phi } else { prob.jitter() };
    let m = &prob.a_plus + DMatrix::identity(k, k) * shift;
    solve_spd(m.clone(), &prob.b)
        .ok_or_else(|| Error::SingularNormal { smallest_singular_value: smallest_singular_value(&m) })
}

pub fn fit_dridge(dq: &DesignQuantities, phi: f64, with_variance: bool) -> Result<FitResult> {
    let prob = Problem::from_design(dq);
    fit_dridge_with(dq, &prob, phi, with_variance)
}

pub fn fit_dridge_with(dq: &DesignQuantities, prob: &Problem, phi: f64, with_variance: bool) -> Result<FitResult> {
    let beta = fit_dridge_problem(prob, phi)?;
    let k = prob.dim();
    let variance = if with_variance {
        let m = &prob.a_plus + DMatrix::identity(k, k) * phi;
        let inv = m.try_inverse().ok_or(Error::SingularNormal { smallest_singular_value: 0.0 })?;
        Some(sandwich(&inv, &variance_middle(dq, &beta)))
    } else {
        None
    };
    Ok(FitResult {
        objective: prob.loss(&beta) + 0.5 * phi * beta.norm_squared(),
        beta,
        converged: true,
        iterations: 1,
        variance,
        method: Method::Dridge,
        lambda: Some(phi),
        tau: None,
    })
}

/// Adaptive PACS weights built from an initial estimate and the exposure
/// correlations. Pairwise matrices are strictly upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct PacsWeights {
    pub w: DVector<f64>,
    pub w_minus: DMatrix<f64>,
    pub w_plus: DMatrix<f64>,
    pub tau: f64,
    pub threshold: Option<f64>,
}

/// Floor applied to every |·| denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

fn floored(x: f64) -> f64 {
    x.abs().max(DENOM_FLOOR)
}

pub fn pacs_weights(beta_init: &DVector<f64>, r_hat: &DMatrix<f64>, tau: f64, threshold: Option<f64>) -> PacsWeights {
    let k = beta_init.len();
    let w = beta_init.map(|b| floored(b).powf(-tau));
    let mut w_minus = DMatrix::zeros(k, k);
    let mut w_plus = DMatrix::zeros(k, k);
    for a in 0..k {
        for m in a + 1..k {
            let r = r_hat[(a, m)];
            let keep_minus = threshold.is_none_or(|x| r > x);
            let keep_plus = threshold.is_none_or(|x| r < -x);
            if keep_minus {
                w_minus[(a, m)] =
                    floored(1.0 - r).powf(-tau) * floored(beta_init[a] - beta_init[m]).powf(-tau);
            }
            if keep_plus {
                w_plus[(a, m)] = floored(1.0 + r).powf(-tau) * floored(beta_init[a] + beta_init[m]).powf(-tau);
            }
        }
    }
    PacsWeights { w, w_minus, w_plus, tau, threshold }
}

impl PacsWeights {
    /// Adaptive-LASSO weights only (pairwise terms zero).
    pub fn lasso(w: DVector<f64>, tau: f64) -> Self {
        let k = w.len();
        Self { w, w_minus: DMatrix::zeros(k, k), w_plus: DMatrix::zeros(k, k), tau, threshold: None }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// P(β) = Σ w_k|β_k| + Σ_{k<m} w₋|β_k − β_m| + w₊|β_k + β_m|.
    pub fn penalty(&self, beta: &DVector<f64>) -> f64 {
        let k = self.dim();
        let mut p: f64 = self.w.iter().zip(beta.iter()).map(|(w, b)| w * b.abs()).sum();
        for a in 0..k {
            for m in a + 1..k {
                p += self.w_minus[(a, m)] * (beta[a] - beta[m]).abs();
                p += self.w_plus[(a, m)] * (beta[a] + beta[m]).abs();
            }
        }
        p
    }

    /// I_w + D₋ᵀI₋D₋ + D₊ᵀI₊D₊ at the current iterate.
    fn quadratic_surrogate(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let k = self.dim();
        let mut q = DMatrix::zeros(k, k);
        for a in 0..k {
            q[(a, a)] += self.w[a] / floored(beta[a]);
            for m in a + 1..k {
                let cm = self.w_minus[(a, m)];
                if cm > 0.0 {
                    let c = cm / floored(beta[a] - beta[m]);
                    q[(a, a)] += c;
                    q[(m, m)] += c;
                    q[(a, m)] -= c;
                    q[(m, a)] -= c;
                }
                let cp = self.w_plus[(a, m)];
                if cp > 0.0 {
                    let c = cp / floored(beta[a] + beta[m]);
                    q[(a, a)] += c;
                    q[(m, m)] += c;
                    q[(a, m)] += c;
                    q[(m, a)] += c;
                }
            }
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionAverage {
    #[default]
    Plain,
    /// Weighted by the diagonal of A₊.
    PrecisionWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqaConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// |β̂_k| below this is set to exactly 0 after convergence.
    pub zero_tol: f64,
    /// Nonzero coordinates whose magnitudes differ by less than this are fused.
    pub fuse_tol: f64,
    pub fusion: FusionAverage,
}

impl Default for LqaConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500, zero_tol: 1e-4, fuse_tol: 1e-4, fusion: FusionAverage::Plain }
    }
}

/// Sets tiny coordinates to 0 and fuses near-equal magnitudes so zeros and
/// ties are exact.
pub fn post_process(beta: &DVector<f64>, a_plus: &DMatrix<f64>, cfg: &LqaConfig) -> DVector<f64> {
    let mut out = beta.map(|b| if b.abs() < cfg.zero_tol { 0.0 } else { b });
    let mut idx: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
    idx.sort_by(|&a, &b| out[a].abs().total_cmp(&out[b].abs()).then(a.cmp(&b)));
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && out[idx[end]].abs() - out[idx[end - 1]].abs() < cfg.fuse_tol {
            end += 1;
        }
        if end - start > 1 {
            let members = &idx[start..end];
            let weight = |i: usize| match cfg.fusion {
                FusionAverage::Plain => 1.0,
                FusionAverage::PrecisionWeighted => a_plus[(i, i)].max(f64::MIN_POSITIVE),
            };
            let total: f64 = members.iter().map(|&i| weight(i)).sum();
            let mag: f64 = members.iter().map(|&i| weight(i) * out[i].abs()).sum::<f64>() / total;
            for &i in members {
                out[i] = out[i].signum() * mag;
            }
        }
        start = end;
    }
    out
}

/// PACS objective ½βᵀA₊β − bᵀβ + (λ/2)P(β); the LQA update minimizes a
/// majorizer of exactly this function.
pub fn pacs_objective(prob: &Problem, weights: &PacsWeights, lambda: f64, beta: &DVector<f64>) -> f64 {
    prob.loss(beta) + 0.5 * lambda * weights.penalty(beta)
}

#[derive(Debug, Clone)]
pub struct LqaTrace {
    pub objectives: Vec<f64>,
}

pub fn fit_pacs_problem(
    prob: &Problem,
    weights: &PacsWeights,
    lambda: f64,
    beta_init: &DVector<f64>,
    cfg: &LqaConfig,
    trace: Option<&mut LqaTrace>,
) -> Result<FitResult> {
    let k = prob.dim();
    if weights.dim() != k || beta_init.len() != k {
        return Err(Error::Dimension(format!(
            "weights have dimension {}, initial estimate {}, problem {k}",
            weights.dim(),
            beta_init.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let base = &prob.a_plus + DMatrix::identity(k, k) * prob.jitter();
    let mut beta = beta_init.clone();
    let mut converged = false;
    let mut iterations = cfg.max_iter;
    let mut objectives = Vec::new();
    let tracing = trace.is_some();
    if tracing {
        objectives.push(pacs_objective(prob, weights, lambda, &beta));
    }
    for it in 1..=cfg.max_iter {
        let mut m = base.clone();
        if lambda > 0.0 {
            m += weights.quadratic_surrogate(&beta) * (0.5 * lambda);
        }
        let next = solve_spd(m, &prob.b).ok_or(Error::SingularLqa { iteration: it })?;
        let delta = (&next - &beta).amax();
        beta = next;
        if tracing {
            objectives.push(pacs_objective(prob, weights, lambda, &beta));
        }
        if delta < cfg.tol {
            converged = true;
            iterations = it;
            break;
        }
    }
    if let Some(t) = trace {
        t.objectives = objectives;
    }
    let beta = post_process(&beta, &prob.a_plus, cfg);
    Ok(FitResult {
        objective: pacs_objective(prob, weights, lambda, &beta),
        beta,
        converged,
        iterations,
        variance: None,
        method: if weights.w_minus.iter().chain(weights.w_plus.iter()).all(|&w| w == 0.0) {
            Method::Dlasso
        } else {
            Method::Pacs
        },
        lambda: Some(lambda),
        tau: Some(weights.tau),
    })
}

pub fn fit_pacs(
    dq: &DesignQuantities,
    weights: &PacsWeights,
    lambda: f64,
    beta_init: &DVector<f64>,
    cfg: &LqaConfig,
) -> Result<FitResult> {
    let mut fit = fit_pacs_problem(&Problem::from_design(dq), weights, lambda, beta_init, cfg, None)?;
    fit.method = Method::Pacs;
    Ok(fit)
}

/// Adaptive LASSO: the PACS fit with all pairwise weights zero.
pub fn fit_dlasso_problem(
    prob: &Problem,
    w: &DVector<f64>,
    tau: f64,
    lambda: f64,
    beta_init: &DVector<f64>,
    cfg: &LqaConfig,
) -> Result<FitResult> {
    let mut fit = fit_pacs_problem(prob, &PacsWeights::lasso(w.clone(), tau), lambda, beta_init, cfg, None)?;
    fit.method = Method::Dlasso;
    Ok(fit)
}

pub fn fit_dlasso(
    dq: &DesignQuantities,
    w: &DVector<f64>,
    lambda: f64,
    beta_init: &DVector<f64>,
    cfg: &LqaConfig,
) -> Result<FitResult> {
    fit_dlasso_problem(&Problem::from_design(dq), w, f64::NAN, lambda, beta_init, cfg).map(|mut f| {
        f.tau = None;
        f
    })
}

/// Two-sided normal p-values for β̂_k / se_k.
pub fn wald_p_values(beta: &DVector<f64>, se: &DVector<f64>) -> DVector<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::standard();
    DVector::from_fn(beta.len(), |i, _| {
        let z = (beta[i] / se[i]).abs();
        if z.is_finite() {
            2.0 * n.sf(z)
        } else {
            f64::NAN
        }
    })
}

/// Bonferroni selection at 0.05/K from a fit that carries a variance.
pub fn bonferroni_selected(fit: &FitResult, alpha: f64) -> Option<Vec<bool>> {
    let se = fit.standard_errors()?;
    let k = fit.beta.len() as f64;
    let p = wald_p_values(&fit.beta, &se);
    Some(p.iter().map(|&pv| pv < alpha / k).collect())
}
