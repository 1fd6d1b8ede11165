//! Signal groups, the grouping matrices C_g and G, grouped post-selection
//! inference, the thin → select → infer pipeline and stability summaries.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{self, FitResult, Problem, SELECTION_THRESHOLD};
use crate::matrix_core::{self, InstrumentStrength, StrengthScaling};
use crate::model_selection::{self, derive_seed, CvConfig};
use crate::summary_data::{build_design, DesignQuantities, SummaryDataset};
use crate::thinning;

pub const DEFAULT_PRECISION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalGroup {
    /// 0-based exposure indices, ascending.
    pub members: Vec<usize>,
    /// ±1 per member.
    pub signs: Vec<i8>,
    pub magnitude: f64,
}

impl SignalGroup {
    /// s̄_l: sign of the smallest-index member.
    pub fn group_sign(&self) -> i8 {
        self.signs[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalGroupSet {
    pub groups: Vec<SignalGroup>,
    pub nonmembers: Vec<usize>,
    pub num_exposures: usize,
}

impl SignalGroupSet {
    /// Groups from explicit (members, signs) lists; magnitudes default to 1.
    pub fn from_groups(parts: Vec<(Vec<usize>, Vec<i8>)>, num_exposures: usize) -> Result<Self> {
        let mut seen = vec![false; num_exposures];
        let mut groups = Vec::with_capacity(parts.len());
        for (members, signs) in parts {
            if members.is_empty() || members.len() != signs.len() {
                return Err(Error::Invalid("each group needs members with one sign each".into()));
            }
            let mut pairs: Vec<(usize, i8)> = members.into_iter().zip(signs).collect();
            pairs.sort();
            for &(m, s) in &pairs {
                if m >= num_exposures || seen[m] || (s != 1 && s != -1) {
                    return Err(Error::Invalid(format!("bad or repeated group member {m}")));
                }
                seen[m] = true;
            }
            groups.push(SignalGroup {
                members: pairs.iter().map(|p| p.0).collect(),
                signs: pairs.iter().map(|p| p.1).collect(),
                magnitude: 1.0,
            });
        }
        groups.sort_by_key(|g| g.members[0]);
        let nonmembers = (0..num_exposures).filter(|&k| !seen[k]).collect();
        Ok(Self { groups, nonmembers, num_exposures })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index of each exposure, if any.
    pub fn assignment(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_exposures];
        for (l, g) in self.groups.iter().enumerate() {
            for &m in &g.members {
                out[m] = Some(l);
            }
        }
        out
    }

    /// Comma-separated signed labels: member k of group l carries
    /// ±(l+1) relative to the group sign, nonmembers 0.
    pub fn label(&self, k: usize) -> String {
        let mut lab = vec![0i64; k.max(self.num_exposures)];
        for (l, g) in self.groups.iter().enumerate() {
            let sbar = g.group_sign() as i64;
            for (&m, &s) in g.members.iter().zip(&g.signs) {
                lab[m] = (l as i64 + 1) * sbar * s as i64;
            }
        }
        lab.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    /// C_g: entries s̄_l s_k / |G_l| on members.
    pub fn c_g(&self) -> DMatrix<f64> {
        self.matrix(true)
    }

    /// G: entries s̄_l s_k on members.
    pub fn g_mat(&self) -> DMatrix<f64> {
        self.matrix(false)
    }

    fn matrix(&self, average: bool) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.groups.len(), self.num_exposures);
        for (l, g) in self.groups.iter().enumerate() {
            let sbar = g.group_sign() as f64;
            let scale = if average { 1.0 / g.members.len() as f64 } else { 1.0 };
            for (&k, &s) in g.members.iter().zip(&g.signs) {
                m[(l, k)] = sbar * s as f64 * scale;
            }
        }
        m
    }
}

/// Partition of the exposures with |β̂_k| > 0.001 by equal magnitude.
/// Magnitudes closer than `precision` are chained into one group.
pub fn groups_from_beta(beta: &DVector<f64>, precision: f64) -> SignalGroupSet {
    let k = beta.len();
    let mut sel: Vec<usize> = (0..k).filter(|&i| beta[i].abs() > SELECTION_THRESHOLD).collect();
    sel.sort_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()).then(a.cmp(&b)));
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for &i in &sel {
        let a = beta[i].abs();
        match clusters.last_mut() {
            Some(c) if a - last <= precision => c.push(i),
            _ => clusters.push(vec![i]),
        }
        last = a;
    }
    let mut groups: Vec<SignalGroup> = clusters
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            let magnitude = c.iter().map(|&i| beta[i].abs()).sum::<f64>() / c.len() as f64;
            SignalGroup {
                signs: c.iter().map(|&i| if beta[i] > 0.0 { 1 } else { -1 }).collect(),
                members: c,
                magnitude,
            }
        })
        .collect();
    groups.sort_by_key(|g| g.members[0]);
    let nonmembers = (0..k).filter(|&i| beta[i].abs() <= SELECTION_THRESHOLD).collect();
    SignalGroupSet { groups, nonmembers, num_exposures: k }
}

pub fn extract_signal_groups(fit: &FitResult, precision: f64) -> SignalGroupSet {
    groups_from_beta(&fit.beta, precision)
}

pub fn label_from_beta(beta: &DVector<f64>, precision: f64) -> String {
    groups_from_beta(beta, precision).label(beta.len())
}

pub fn build_group_matrices(sgs: &SignalGroupSet, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    debug_assert_eq!(k, sgs.num_exposures);
    (sgs.c_g(), sgs.g_mat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInference {
    pub group_estimates: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub ci_low: DVector<f64>,
    pub ci_high: DVector<f64>,
    pub p_values: DVector<f64>,
    pub level: f64,
    /// Strength of the grouped design.
    pub strength: InstrumentStrength,
}

impl GroupInference {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.variance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Design on the group scale: Π̂_g = Π̂Gᵀ and Σ_Xj,g = GΣ_XjGᵀ.
pub fn grouped_design(dq: &DesignQuantities, g: &DMatrix<f64>) -> DesignQuantities {
    let pi_hat = &dq.pi_hat * g.transpose();
    let l = g.nrows();
    let mut v = DMatrix::zeros(l, l);
    let sigma_xj: Vec<DMatrix<f64>> = dq
        .sigma_xj
        .iter()
        .zip(dq.weights.iter())
        .map(|(s, &w)| {
            let sg = g * s * g.transpose();
            v += &sg * w;
            sg
        })
        .collect();
    let weighted = DMatrix::from_fn(pi_hat.nrows(), l, |j, a| pi_hat[(j, a)] * dq.weights[j]);
    let normal = matrix_core::symmetrize(&(pi_hat.transpose() * &weighted));
    let cross = weighted.transpose() * &dq.gamma_vec;
    DesignQuantities {
        pi_hat,
        gamma_vec: dq.gamma_vec.clone(),
        weights: dq.weights.clone(),
        v: matrix_core::symmetrize(&v),
        sigma_xj,
        normal,
        cross,
    }
}

/// Debiased IVW on the grouped design with the sandwich variance and Wald
/// intervals at level `level`.
pub fn grouped_inference(ds: &SummaryDataset, sgs: &SignalGroupSet, level: f64) -> Result<GroupInference> {
    if sgs.is_empty() {
        return Err(Error::Invalid("no signal groups to infer on".into()));
    }
    if sgs.num_exposures != ds.num_exposures() {
        return Err(Error::Dimension("group set and dataset disagree on K".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid("confidence level must lie in (0, 1)".into()));
    }
    let dq = build_design(ds);
    let gdq = grouped_design(&dq, &sgs.g_mat());
    let strength = matrix_core::instrument_strength(&gdq, StrengthScaling::Standardized);
    let prob = Problem::from_design(&gdq);
    let fit = match estimators::fit_divw_problem(&gdq, &prob, true) {
        Ok(f) => f,
        Err(Error::Unidentified { .. }) => return Err(Error::GroupedSingular { strength: strength.is_param }),
        Err(e) => return Err(e),
    };
    let variance = fit.variance.expect("variance requested");
    let se = variance.diagonal().map(|v| v.max(0.0).sqrt());
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let beta = fit.beta;
    Ok(GroupInference {
        ci_low: &beta - &se * z,
        ci_high: &beta + &se * z,
        p_values: estimators::wald_p_values(&beta, &se),
        group_estimates: beta,
        variance,
        level,
        strength,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cv: CvConfig,
    pub precision: f64,
    pub level: f64,
    /// Share of the information given to the selection fold.
    pub select_fraction: f64,
    /// Fit dLASSO instead of PACS on the selection fold.
    pub lasso: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { cv: CvConfig::default(), precision: DEFAULT_PRECISION, level: 0.95, select_fraction: 0.5, lasso: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub select_strength: InstrumentStrength,
    pub infer_strength: InstrumentStrength,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub phi: f64,
    pub select_beta: Vec<f64>,
    pub select_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub selection: SignalGroupSet,
    pub inference: Option<GroupInference>,
    /// Why inference is missing, when it is.
    pub inference_status: Option<String>,
    pub diagnostics: PipelineDiagnostics,
}

/// Two-fold thinning, tuned PACS on the selection fold, grouped inference on
/// the independent inference fold.
pub fn post_selection_pipeline(ds: &SummaryDataset, cfg: &PipelineConfig, seed: u64) -> Result<PipelineOutput> {
    let f = cfg.select_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Invalid("select_fraction must lie in (0, 1)".into()));
    }
    let plan = thinning::ThinningPlan::new(vec![f, 1.0 - f], derive_seed(seed, 0))?;
    let reps = thinning::thin_multi_fold(ds, &plan)?;
    let (d_select, d_infer) = (&reps.folds[0], &reps.folds[1]);
    let mut cv = cfg.cv.clone();
    cv.seed = derive_seed(seed, 1);
    let tuned = if cfg.lasso { model_selection::tune_dlasso(d_select, &cv)? } else { model_selection::tune_pacs(d_select, &cv)? };
    let selection = extract_signal_groups(&tuned.fit, cfg.precision);
    let infer_strength = matrix_core::instrument_strength(&build_design(d_infer), cfg.cv.scaling);
    let (inference, inference_status) = if selection.is_empty() {
        (None, Some("empty selection: inference skipped".to_string()))
    } else {
        match grouped_inference(d_infer, &selection, cfg.level) {
            Ok(inf) => (Some(inf), None),
            Err(e) if !e.is_validation() => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        }
    };
    Ok(PipelineOutput {
        selection,
        inference,
        inference_status,
        diagnostics: PipelineDiagnostics {
            select_strength: tuned.strength,
            infer_strength,
            lambda: tuned.fit.lambda,
            tau: tuned.fit.tau,
            phi: tuned.phi,
            select_beta: tuned.fit.beta.iter().copied().collect(),
            select_converged: tuned.fit.converged,
        },
    })
}

/// One group estimate from one stability run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub run: usize,
    pub seed: u64,
    pub label: String,
    /// 1-based, as in the label.
    pub group: usize,
    pub members: Vec<usize>,
    pub signs: Vec<i8>,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalGrouping {
    pub label: String,
    pub frequency: f64,
    pub median_estimates: Vec<f64>,
    pub median_ses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub repeats: usize,
    /// Fraction of runs in which exposures k and m share a group; the
    /// diagonal is the selection frequency.
    pub coassignment: DMatrix<f64>,
    pub rows: Vec<StabilityRow>,
    /// Per exposure: runs in which its group is significant at 1 − level.
    pub significance_counts: Vec<usize>,
    pub label_counts: Vec<(String, usize)>,
    pub modal: Option<ModalGrouping>,
    pub failures: Vec<(usize, String)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Repeats the pipeline with sub-seeds and summarizes how groupings vary.
/// Median estimates of the modal grouping are descriptive only: runs share
/// the data, so they are not independent.
pub fn stability_summary(ds: &SummaryDataset, cfg: &PipelineConfig, repeats: usize, seed: u64) -> Result<StabilitySummary> {
    if repeats < 2 {
        return Err(Error::Invalid("stability needs at least 2 repeats".into()));
    }
    let k = ds.num_exposures();
    let runs: Vec<(u64, Result<PipelineOutput>)> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            (s, post_selection_pipeline(ds, cfg, s))
        })
        .collect();
    let mut co = DMatrix::zeros(k, k);
    let mut rows = Vec::new();
    let mut sig = vec![0usize; k];
    let mut labels: Vec<(String, usize)> = Vec::new();
    let mut failures = Vec::new();
    let mut by_label: std::collections::BTreeMap<String, Vec<&GroupInference>> = Default::default();
    let alpha = 1.0 - cfg.level;
    for (r, (s, out)) in runs.iter().enumerate() {
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                failures.push((r, e.to_string()));
                continue;
            }
        };
        let label = out.selection.label(k);
        match labels.iter_mut().find(|(l, _)| *l == label) {
            Some(entry) => entry.1 += 1,
            None => labels.push((label.clone(), 1)),
        }
        let assign = out.selection.assignment();
        for a in 0..k {
            for b in 0..k {
                if assign[a].is_some() && assign[a] == assign[b] {
                    co[(a, b)] += 1.0;
                }
            }
        }
        if let Some(inf) = &out.inference {
            by_label.entry(label.clone()).or_default().push(inf);
            let se = inf.standard_errors();
            for (l, g) in out.selection.groups.iter().enumerate() {
                if inf.p_values[l] < alpha {
                    for &m in &g.members {
                        sig[m] += 1;
                    }
                }
                rows.push(StabilityRow {
                    run: r,
                    seed: *s,
                    label: label.clone(),
                    group: l + 1,
                    members: g.members.clone(),
                    signs: g.signs.clone(),
                    estimate: inf.group_estimates[l],
                    se: se[l],
                    ci_low: inf.ci_low[l],
                    ci_high: inf.ci_high[l],
                    p_value: inf.p_values[l],
                });
            }
        }
    }
    co /= repeats as f64;
    // most frequent first, ties by first appearance
    labels.sort_by(|a, b| b.1.cmp(&a.1));
    let modal = labels.first().map(|(label, count)| {
        let infs = by_label.get(label).cloned().unwrap_or_default();
        let l = infs.first().map(|i| i.group_estimates.len()).unwrap_or(0);
        ModalGrouping {
            label: label.clone(),
            frequency: *count as f64 / repeats as f64,
            median_estimates: (0..l).map(|g| median(infs.iter().map(|i| i.group_estimates[g]).collect())).collect(),
            median_ses: (0..l).map(|g| median(infs.iter().map(|i| i.standard_errors()[g]).collect())).collect(),
        }
    });
    Ok(StabilitySummary { repeats, coassignment: co, rows, significance_counts: sig, label_counts: labels, modal, failures })
}
