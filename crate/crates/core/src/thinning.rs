//! Gaussian data thinning: split each SNP's estimates into independent
//! pieces that sum back to the original.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::summary_data::{SnpAssociation, SummaryDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinningPlan {
    pub epsilons: Vec<f64>,
    pub seed: u64,
}

impl ThinningPlan {
    pub fn new(epsilons: Vec<f64>, seed: u64) -> Result<Self> {
        if epsilons.len() < 2 {
            return Err(Error::Invalid(format!("thinning needs at least 2 folds, got {}", epsilons.len())));
        }
        if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::Invalid(format!("thinning fraction {e} outside (0, 1)")));
        }
        let total: f64 = epsilons.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("thinning fractions sum to {total}, not 1")));
        }
        Ok(Self { epsilons, seed })
    }

    pub fn even(folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Invalid(format!("thinning needs at least 2 folds, got {folds}")));
        }
        let mut eps = vec![1.0 / folds as f64; folds];
        // make the sum exactly one
        let head: f64 = eps[..folds - 1].iter().sum();
        eps[folds - 1] = 1.0 - head;
        Self::new(eps, seed)
    }

    pub fn num_folds(&self) -> usize {
        self.epsilons.len()
    }
}

#[derive(Debug, Clone)]
pub struct ThinnedReplicates {
    pub folds: Vec<SummaryDataset>,
    pub epsilons: Vec<f64>,
}

/// RNG for one (seed, SNP, fold) triple; draws are order-independent.
pub fn keyed_rng(seed: u64, snp: usize, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((snp as u64) << 16) | fold as u64);
    rng
}

struct Piece {
    gamma: Vec<f64>,
    outcome: f64,
}

/// Recursive peeling: fold m takes a fraction q = ε_m / (remaining mass)
/// of the remainder R, plus N(0, q(1−q)·rem·Σ) noise; the last fold is
/// what is left.
fn thin_snp(
    snp: &SnpAssociation,
    chol: &DMatrix<f64>,
    eps: &[f64],
    seed: u64,
    index: usize,
    noise_scale: f64,
) -> Vec<Piece> {
    let k = snp.gamma_hat.len();
    let mut rem_gamma = snp.gamma_hat.clone();
    let mut rem_outcome = snp.gamma_outcome_hat;
    let mut rem = 1.0;
    let mut out = Vec::with_capacity(eps.len());
    for (m, &e) in eps.iter().enumerate() {
        if m + 1 == eps.len() {
            out.push(Piece { gamma: rem_gamma.clone(), outcome: rem_outcome });
            break;
        }
        let q = (e / rem).min(1.0);
        let sd = (q * (1.0 - q) * rem).max(0.0).sqrt() * noise_scale;
        let mut rng = keyed_rng(seed, index, m);
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lz = chol * z;
        let zy: f64 = rng.sample(StandardNormal);
        let gamma: Vec<f64> = (0..k).map(|a| q * rem_gamma[a] + sd * snp.se_x[a] * lz[a]).collect();
        let outcome = q * rem_outcome + sd * snp.se_y * zy;
        for a in 0..k {
            rem_gamma[a] -= gamma[a];
        }
        rem_outcome -= outcome;
        rem -= e;
        out.push(Piece { gamma, outcome });
    }
    out
}

/// Multi-fold thinning with a scale on the injected noise; `noise_scale = 0`
/// gives the deterministic proportional split, used in tests.
pub fn thin_with_noise_scale(ds: &SummaryDataset, plan: &ThinningPlan, noise_scale: f64) -> Result<ThinnedReplicates> {
    let m = plan.num_folds();
    let chol = ds
        .correlation()
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid("correlation matrix is not positive definite".into()))?
        .l();
    let mut fold_snps: Vec<Vec<SnpAssociation>> = vec![Vec::with_capacity(ds.num_snps()); m];
    for (j, snp) in ds.snps().iter().enumerate() {
        let pieces = thin_snp(snp, &chol, &plan.epsilons, plan.seed, j, noise_scale);
        for (f, piece) in pieces.into_iter().enumerate() {
            let s = plan.epsilons[f].sqrt();
            fold_snps[f].push(SnpAssociation {
                snp_id: snp.snp_id.clone(),
                gamma_hat: piece.gamma,
                se_x: snp.se_x.iter().map(|x| x * s).collect(),
                gamma_outcome_hat: piece.outcome,
                se_y: snp.se_y * s,
            });
        }
    }
    let folds = fold_snps
        .into_iter()
        .map(|snps| SummaryDataset::new(snps, ds.correlation().clone(), ds.exposure_names().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThinnedReplicates { folds, epsilons: plan.epsilons.clone() })
}

pub fn thin_multi_fold(ds: &SummaryDataset, plan: &ThinningPlan) -> Result<ThinnedReplicates> {
    thin_with_noise_scale(ds, plan, 1.0)
}

/// Even two-fold split: fold 1 = γ̂/2 + N(0, Σ_Xj/4), fold 2 = γ̂ − fold 1.
pub fn thin_two_fold(ds: &SummaryDataset, seed: u64) -> Result<ThinnedReplicates> {
    thin_multi_fold(ds, &ThinningPlan::new(vec![0.5, 0.5], seed)?)
}

/// Training set D − D_m, with variances scaled by (1 − ε_m).
pub fn training_complement(ds: &SummaryDataset, reps: &ThinnedReplicates, m: usize) -> Result<SummaryDataset> {
    let fold = reps
        .folds
        .get(m)
        .ok_or_else(|| Error::Invalid(format!("fold index {m} out of range ({} folds)", reps.folds.len())))?;
    if fold.num_snps() != ds.num_snps() || fold.num_exposures() != ds.num_exposures() {
        return Err(Error::Dimension("thinned fold does not match the dataset".into()));
    }
    let s = (1.0 - reps.epsilons[m]).sqrt();
    let snps = ds
        .snps()
        .iter()
        .zip(fold.snps())
        .map(|(full, part)| SnpAssociation {
            snp_id: full.snp_id.clone(),
            gamma_hat: full.gamma_hat.iter().zip(&part.gamma_hat).map(|(a, b)| a - b).collect(),
            se_x: full.se_x.iter().map(|x| x * s).collect(),
            gamma_outcome_hat: full.gamma_outcome_hat - part.gamma_outcome_hat,
            se_y: full.se_y * s,
        })
        .collect();
    SummaryDataset::new(snps, ds.correlation().clone(), ds.exposure_names().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary_data::SharedCorrelation;

    fn toy(p: usize, seed: u64) -> SummaryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let g = DMatrix::from_fn(p, k, |_, _| rng.random_range(-0.3..0.3));
        let se = DMatrix::from_fn(p, k, |_, _| rng.random_range(0.01..0.05));
        let gy = DVector::from_fn(p, |_, _| rng.random_range(-0.1..0.1));
        let sy = DVector::from_fn(p, |_, _| rng.random_range(0.01..0.05));
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.4, 1.0, -0.2, 0.1, -0.2, 1.0]);
        SummaryDataset::from_arrays(&g, &se, &gy, &sy, SharedCorrelation::new(sigma).unwrap(), vec![
            "a".into(),
            "b".into(),
            "c".into(),
        ])
        .unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(ThinningPlan::new(vec![0.5, 0.4], 1).is_err());
        assert!(ThinningPlan::new(vec![1.0], 1).is_err());
        assert!(ThinningPlan::new(vec![0.0, 1.0], 1).is_err());
        let p = ThinningPlan::even(5, 1).unwrap();
        assert_eq!(p.epsilons.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn zero_noise_halves() {
        let ds = toy(10, 1);
        let reps = thin_with_noise_scale(&ds, &ThinningPlan::new(vec![0.5, 0.5], 3).unwrap(), 0.0).unwrap();
        for f in &reps.folds {
            for (a, b) in f.snps().iter().zip(ds.snps()) {
                for k in 0..3 {
                    assert_eq!(a.gamma_hat[k], b.gamma_hat[k] / 2.0);
                    assert!((a.se_x[k] - b.se_x[k] * 0.5f64.sqrt()).abs() < 1e-15);
                }
                assert_eq!(a.gamma_outcome_hat, b.gamma_outcome_hat / 2.0);
            }
        }
    }

    fn assert_sum_identity(ds: &SummaryDataset, reps: &ThinnedReplicates) {
        for (j, snp) in ds.snps().iter().enumerate() {
            for k in 0..ds.num_exposures() {
                let s: f64 = reps.folds.iter().map(|f| f.snps()[j].gamma_hat[k]).sum();
                assert!((s - snp.gamma_hat[k]).abs() <= 1e-15 * 8.0, "{s} vs {}", snp.gamma_hat[k]);
            }
            let s: f64 = reps.folds.iter().map(|f| f.snps()[j].gamma_outcome_hat).sum();
            assert!((s - snp.gamma_outcome_hat).abs() <= 1e-15 * 8.0);
        }
    }

    #[test]
    fn sum_identity_two_and_five_folds() {
        let ds = toy(30, 2);
        assert_sum_identity(&ds, &thin_two_fold(&ds, 9).unwrap());
        assert_sum_identity(&ds, &thin_multi_fold(&ds, &ThinningPlan::even(5, 9).unwrap()).unwrap());
    }

    #[test]
    fn two_fold_equals_even_multi_fold_and_is_deterministic() {
        let ds = toy(20, 3);
        let a = thin_two_fold(&ds, 42).unwrap();
        let b = thin_multi_fold(&ds, &ThinningPlan::new(vec![0.5, 0.5], 42).unwrap()).unwrap();
        assert_eq!(a.folds, b.folds);
        let c = thin_two_fold(&ds, 43).unwrap();
        assert_ne!(a.folds, c.folds);
    }

    #[test]
    fn complement_reconstructs() {
        let ds = toy(25, 4);
        let reps = thin_two_fold(&ds, 5).unwrap();
        let comp = training_complement(&ds, &reps, 0).unwrap();
        for (a, b) in comp.snps().iter().zip(reps.folds[1].snps()) {
            for k in 0..3 {
                assert!((a.gamma_hat[k] - b.gamma_hat[k]).abs() < 1e-15);
                assert!((a.se_x[k] - b.se_x[k]).abs() < 1e-15);
            }
        }
        let plan = ThinningPlan::even(5, 6).unwrap();
        let reps = thin_multi_fold(&ds, &plan).unwrap();
        for m in 0..5 {
            let comp = training_complement(&ds, &reps, m).unwrap();
            for (j, snp) in ds.snps().iter().enumerate() {
                let s = &comp.snps()[j];
                let f = &reps.folds[m].snps()[j];
                for k in 0..3 {
                    assert!((s.gamma_hat[k] + f.gamma_hat[k] - snp.gamma_hat[k]).abs() < 1e-15);
                    assert!((s.se_x[k].powi(2) - 0.8 * snp.se_x[k].powi(2)).abs() < 1e-15);
                }
            }
        }
    }
}
