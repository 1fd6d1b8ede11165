//! Small dense kernels: symmetric eigen utilities, the nearest PSD matrix in
//! the elementwise max norm, and instrument-strength diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::summary_data::DesignQuantities;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

/// Eigenvalues (ascending) and matching eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    sym_eigen(m).0
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).min()
}

/// PSD up to the clamp `1e-12·‖m‖_max`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    min_eigenvalue(m) >= -1e-12 * max_abs(m)
}

/// Rebuilds `Q f(Λ) Qᵀ`.
pub fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    symmetrize(&(scaled * vecs.transpose()))
}

/// Frobenius-nearest PSD matrix (eigenvalue clamp).
pub fn psd_clamp(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |l| l.max(0.0))
}

/// Symmetric inverse square root of an SPD matrix; `None` if not PD.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, _) = sym_eigen(m);
    if vals.min() <= 0.0 {
        return None;
    }
    Some(spectral_map(m, |l| 1.0 / l.sqrt()))
}

pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |l| l.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 1.0, abs_tol: 1e-7, rel_tol: 1e-6, max_iter: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct PsdProjection {
    pub matrix: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// ‖result − input‖_max
    pub distance: f64,
}

/// Euclidean projection of `v` onto the ℓ1 ball of radius `radius`.
fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - radius) / (i as f64 + 1.0);
        if ui > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// prox of `t·‖·‖_max` (entrywise max) via the Moreau identity.
fn prox_max_norm(v: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let proj = project_l1_ball(v.as_slice(), t);
    let mut out = v.clone();
    for (o, p) in out.iter_mut().zip(proj) {
        *o -= p;
    }
    out
}

/// argmin over PSD X of ‖X − m‖_max, by ADMM on the split X − m = W.
///
/// An already-PSD input comes back unchanged. Otherwise the returned matrix
/// is the best PSD iterate seen (each X-update lands in the cone).
pub fn nearest_psd_maxnorm(m: &DMatrix<f64>, cfg: &AdmmConfig) -> PsdProjection {
    let k = m.nrows();
    let m = symmetrize(m);
    if is_psd(&m) {
        return PsdProjection { matrix: m, converged: true, iterations: 0, distance: 0.0 };
    }
    let scale = max_abs(&m);
    let mn = &m / scale;
    let rho = cfg.rho;
    let mut w = DMatrix::<f64>::zeros(k, k);
    let mut u = DMatrix::<f64>::zeros(k, k);
    let mut best = psd_clamp(&mn);
    let mut best_dist = max_abs(&(&best - &mn));
    let mut converged = false;
    let mut iterations = cfg.max_iter;
    let dim = k as f64;
    for it in 1..=cfg.max_iter {
        let x = psd_clamp(&(&mn + &w - &u));
        let w_old = w;
        w = symmetrize(&prox_max_norm(&(&x - &mn + &u), 1.0 / rho));
        let r = &x - &w - &mn;
        u += &r;
        let d = max_abs(&(&x - &mn));
        if d < best_dist {
            best_dist = d;
            best = x.clone();
        }
        let primal = r.norm();
        let dual = rho * (&w - &w_old).norm();
        let eps_pri = dim * cfg.abs_tol + cfg.rel_tol * x.norm().max(w.norm()).max(mn.norm());
        let eps_dual = dim * cfg.abs_tol + cfg.rel_tol * rho * u.norm();
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            iterations = it;
            break;
        }
    }
    let matrix = &best * scale;
    PsdProjection { distance: best_dist * scale, matrix, converged, iterations }
}

/// A₊ with a convergence warning on ADMM failure.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let proj = nearest_psd_maxnorm(m, &AdmmConfig::default());
    if !proj.converged {
        log::debug!("max-norm PSD projection stopped after {} iterations without converging", proj.iterations);
    }
    proj.matrix
}

/// How the sample instrument-strength eigenvalues are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrengthScaling {
    /// Eigenvalues of Π̂ᵀWΠ̂ − V.
    Raw,
    /// p × eigenvalues of V^{-1/2}(Π̂ᵀWΠ̂ − V)V^{-1/2}, invariant to the
    /// scale of the exposures. This is the scale of the rule-of-thumb 7.
    #[default]
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentStrength {
    pub mu_min: f64,
    pub mu_max: f64,
    pub is_param: f64,
    /// μ̂_min/√(μ̂_min + p) when μ̂_min > 0.
    pub r_n: Option<f64>,
    pub num_snps: usize,
    pub scaling: StrengthScaling,
}

impl InstrumentStrength {
    pub fn from_eigen(mu_min: f64, mu_max: f64, p: usize, scaling: StrengthScaling) -> Self {
        let pf = p as f64;
        let r_n = (mu_min > 0.0).then(|| mu_min / (mu_min + pf).sqrt());
        Self { mu_min, mu_max, is_param: mu_min / pf.sqrt(), r_n, num_snps: p, scaling }
    }
}

/// Instrument strength of an arbitrary `(normal, v)` pair.
pub fn strength_of(normal: &DMatrix<f64>, v: &DMatrix<f64>, p: usize, scaling: StrengthScaling) -> InstrumentStrength {
    let a = normal - v;
    let vals = match scaling {
        StrengthScaling::Raw => sym_eigenvalues(&a),
        StrengthScaling::Standardized => match inv_sqrt_spd(v) {
            Some(vis) => sym_eigenvalues(&(&vis * &a * &vis)) * p as f64,
            None => sym_eigenvalues(&a),
        },
    };
    InstrumentStrength::from_eigen(vals.min(), vals.max(), p, scaling)
}

pub fn instrument_strength(dq: &DesignQuantities, scaling: StrengthScaling) -> InstrumentStrength {
    strength_of(&dq.normal, &dq.v, dq.num_snps(), scaling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AdmmConfig {
        AdmmConfig::default()
    }

    #[test]
    fn identity_is_unchanged() {
        let i = DMatrix::<f64>::identity(4, 4);
        let p = nearest_psd_maxnorm(&i, &cfg());
        assert_eq!(p.matrix, i);
        assert!(p.converged);
    }

    #[test]
    fn negative_scalar_clamps_to_zero() {
        let p = nearest_psd_maxnorm(&DMatrix::from_element(1, 1, -3.0), &cfg());
        assert!(p.matrix[(0, 0)].abs() < 1e-6, "{}", p.matrix);
    }

    // Distance of the best PSD matrix for [[1,2],[2,1]]: by brute force over
    // a, c on a grid with b maximal subject to b² ≤ ac.
    fn grid_oracle_2x2(m: &DMatrix<f64>) -> f64 {
        let n = 600;
        let span = 2.0 * max_abs(m) + 1.0;
        let mut best = f64::INFINITY;
        for ia in 0..=n {
            let a = span * ia as f64 / n as f64;
            for ic in 0..=n {
                let c = span * ic as f64 / n as f64;
                let bmax = (a * c).sqrt();
                let b = m[(0, 1)].clamp(-bmax, bmax);
                let d = (a - m[(0, 0)]).abs().max((c - m[(1, 1)]).abs()).max((b - m[(0, 1)]).abs());
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn two_by_two_matches_grid_oracle() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = nearest_psd_maxnorm(&m, &cfg());
        // a = c = 1 + t, b = 2 − t, so (1+t)² = (2−t)² gives t = 1/2.
        assert!((p.distance - 0.5).abs() < 1e-3, "{}", p.distance);
        assert!(p.distance <= grid_oracle_2x2(&m) + 1e-3);
        assert!(min_eigenvalue(&p.matrix) >= -1e-9);
    }

    #[test]
    fn l1_projection_properties() {
        let v = [3.0, -1.0, 0.5];
        let p = project_l1_ball(&v, 2.0);
        let l1: f64 = p.iter().map(|x| x.abs()).sum();
        assert!((l1 - 2.0).abs() < 1e-12);
        assert_eq!(project_l1_ball(&v, 10.0), v.to_vec());
        assert!(p[0] > 0.0 && p[1] <= 0.0);
    }

    #[test]
    fn scalar_strength_formula() {
        let p = 5;
        let g: Vec<f64> = (0..p).map(|j| 0.2 + 0.1 * j as f64).collect();
        let sx: Vec<f64> = (0..p).map(|j| 0.05 + 0.01 * j as f64).collect();
        let sy: Vec<f64> = (0..p).map(|j| 0.3 + 0.05 * j as f64).collect();
        let normal = DMatrix::from_element(1, 1, (0..p).map(|j| g[j] * g[j] / (sy[j] * sy[j])).sum());
        let v = DMatrix::from_element(1, 1, (0..p).map(|j| sx[j] * sx[j] / (sy[j] * sy[j])).sum());
        let s = strength_of(&normal, &v, p, StrengthScaling::Raw);
        let expect: f64 = (0..p).map(|j| (g[j] * g[j] - sx[j] * sx[j]) / (sy[j] * sy[j])).sum();
        assert!((s.mu_min - expect).abs() < 1e-12);
        assert_eq!(s.is_param, s.mu_min / (p as f64).sqrt());
        assert!(s.r_n.is_some());
    }

    #[test]
    fn noiseless_strength_is_min_eigen_of_gram() {
        let pi = DMatrix::from_fn(8, 3, |j, c| ((j + 2 * c) % 5) as f64 - 1.5);
        let gram = pi.transpose() * &pi;
        let s = strength_of(&gram, &DMatrix::zeros(3, 3), 8, StrengthScaling::Raw);
        assert!((s.mu_min - min_eigenvalue(&gram)).abs() < 1e-10);
        assert!(s.mu_min <= s.mu_max);
    }

    fn random_sym(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-2.0..2.0));
        symmetrize(&a)
    }

    fn random_psd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.5..1.5));
        &b * b.transpose()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_is_psd_idempotent_and_dominant(seed in any::<u64>(), k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_sym(&mut rng, k);
            let p = nearest_psd_maxnorm(&m, &cfg());
            let scale = max_abs(&m);
            prop_assert!(min_eigenvalue(&p.matrix) >= -1e-9 * scale);
            prop_assert_eq!(p.matrix.clone(), p.matrix.transpose());
            let again = nearest_psd_maxnorm(&p.matrix, &cfg());
            prop_assert!(max_abs(&(&again.matrix - &p.matrix)) <= 1e-6 * scale.max(1.0));
            for _ in 0..20 {
                let q = random_psd(&mut rng, k);
                prop_assert!(p.distance <= max_abs(&(&q - &m)) + 1e-6);
            }
            // the eigen clamp is feasible, so never beats the projection
            prop_assert!(p.distance <= max_abs(&(psd_clamp(&m) - &m)) + 1e-12);
        }
    }
}
