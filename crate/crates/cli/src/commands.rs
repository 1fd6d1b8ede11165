use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mvpacs::estimators::{self, FitResult, Problem};
use mvpacs::grouping::{self, GroupInference, PipelineConfig, SignalGroupSet};
use mvpacs::matrix_core::{self, InstrumentStrength, StrengthScaling};
use mvpacs::model_selection::{self, CvConfig, DEFAULT_TAUS};
use mvpacs::simulation::{self, Estimator, ExperimentConfig, PipelineRecord, ReplicateRecord, SigmaSource};
use mvpacs::summary_data::{self, build_design, SummaryDataset};
use mvpacs::thinning;

use crate::config::{merge, parse_enum, read_config};
use crate::output::{csv_field, file_checksum, OutputDir};
use crate::CliError;

fn set<T>(slot: &mut Option<T>, v: T) {
    if slot.is_none() {
        *slot = Some(v);
    }
}

fn resolve<T: Serialize + serde::de::DeserializeOwned>(args: &T, config: Option<PathBuf>) -> Result<T> {
    let file = config.as_deref().map(read_config).transpose()?;
    merge(args, file)
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct DataOpts {
    /// Summary statistics TSV (snp, beta_/se_ pairs per exposure, beta_outcome, se_outcome).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Shared exposure correlation matrix as CSV; identity when absent.
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    /// One-column CSV of exposure SDs used to rescale the associations.
    #[arg(long)]
    pub trait_sd: Option<PathBuf>,
}

impl DataOpts {
    fn load(&self) -> Result<(SummaryDataset, BTreeMap<String, String>)> {
        let data = self.data.as_ref().ok_or_else(|| CliError("--data is required".into()))?;
        let mut inputs = BTreeMap::new();
        let ds = summary_data::load_dataset(data, self.sigma.as_deref())?;
        inputs.insert(data.display().to_string(), file_checksum(data)?);
        if let Some(s) = &self.sigma {
            inputs.insert(s.display().to_string(), file_checksum(s)?);
        }
        let ds = match &self.trait_sd {
            Some(p) => {
                inputs.insert(p.display().to_string(), file_checksum(p)?);
                ds.rescaled(&summary_data::load_trait_sd(p)?)?
            }
            None => ds,
        };
        Ok((ds, inputs))
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct OutOpts {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat JSON config (or an earlier manifest.json); flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl OutOpts {
    fn fill(&mut self) {
        set(&mut self.out, PathBuf::from("mvpacs-out"));
    }

    fn open(&self) -> Result<OutputDir> {
        OutputDir::create(self.out.as_ref().expect("filled"))
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct CvOpts {
    /// Thinning folds used by cross-validation.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Number of λ values in the tuning grid.
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Candidate τ values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Number of ridge penalties tried for the initial estimator.
    #[arg(long)]
    pub ridge_points: Option<usize>,
    /// Tuning rule: one-se or min.
    #[arg(long)]
    pub rule: Option<String>,
    /// Correlation basis for the pairwise weights: raw or z-score.
    #[arg(long)]
    pub basis: Option<String>,
    /// Adaptive weights per fold (per-fold) or from the full data (full-data).
    #[arg(long)]
    pub weights: Option<String>,
    /// LQA iteration cap.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Count fold fits that hit the iteration cap as failures.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_convergence: Option<bool>,
}

impl CvOpts {
    fn fill(&mut self) {
        let d = CvConfig::default();
        set(&mut self.folds, d.folds);
        set(&mut self.grid_points, d.grid_points);
        set(&mut self.taus, DEFAULT_TAUS.to_vec());
        set(&mut self.ridge_points, d.ridge_points);
        set(&mut self.rule, "one-se".into());
        set(&mut self.basis, "raw".into());
        set(&mut self.weights, "per-fold".into());
        set(&mut self.max_iter, d.lqa.max_iter);
        set(&mut self.strict_convergence, false);
    }

    fn build(&self, repeats: usize, seed: u64, threshold: Option<f64>) -> Result<CvConfig> {
        let mut c = CvConfig::default();
        c.folds = self.folds.unwrap();
        c.repeats = repeats;
        c.seed = seed;
        c.grid_points = self.grid_points.unwrap();
        c.taus = self.taus.clone().unwrap();
        c.ridge_points = self.ridge_points.unwrap();
        c.rule = parse_enum("rule", self.rule.as_deref().unwrap())?;
        c.basis = parse_enum("basis", self.basis.as_deref().unwrap())?;
        c.weights = parse_enum("weights", self.weights.as_deref().unwrap())?;
        c.lqa.max_iter = self.max_iter.unwrap();
        c.strict_convergence = self.strict_convergence.unwrap();
        c.threshold = threshold;
        if c.folds < 2 || c.repeats < 1 || c.grid_points < 1 || c.taus.is_empty() {
            return Err(CliError("need folds ≥ 2, repeats ≥ 1, grid points ≥ 1 and at least one τ".into()).into());
        }
        Ok(c)
    }
}

#[derive(Serialize)]
struct GroupOut {
    members: Vec<String>,
    signs: Vec<i8>,
    magnitude: f64,
}

#[derive(Serialize)]
struct GroupsOut {
    label: String,
    groups: Vec<GroupOut>,
    nonmembers: Vec<String>,
}

fn groups_out(sgs: &SignalGroupSet, names: &[String]) -> GroupsOut {
    GroupsOut {
        label: sgs.label(names.len()),
        groups: sgs
            .groups
            .iter()
            .map(|g| GroupOut {
                members: g.members.iter().map(|&k| names[k].clone()).collect(),
                signs: g.signs.clone(),
                magnitude: g.magnitude,
            })
            .collect(),
        nonmembers: sgs.nonmembers.iter().map(|&k| names[k].clone()).collect(),
    }
}

fn signed_members(g: &grouping::SignalGroup, names: &[String]) -> String {
    g.members
        .iter()
        .zip(&g.signs)
        .map(|(&k, &s)| if s < 0 { format!("-{}", names[k]) } else { names[k].clone() })
        .collect::<Vec<_>>()
        .join(";")
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

// ---- fit ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvOpts,
    /// ivw, divw, dridge, dlasso, pacs or pacs-x.
    #[arg(long)]
    pub method: Option<String>,
    /// Correlation threshold of pacs-x.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Ridge penalty of the initial estimator; cross-validated when absent.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Fixed λ for dlasso/pacs; cross-validated when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// τ used with a fixed λ.
    #[arg(long)]
    pub tau: Option<f64>,
    /// CV repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Magnitude tolerance for forming signal-groups.
    #[arg(long)]
    pub precision: Option<f64>,
}

#[derive(Serialize)]
struct FitOutput {
    method: String,
    exposures: Vec<String>,
    beta: Vec<f64>,
    se: Option<Vec<f64>>,
    p_values: Option<Vec<f64>>,
    lambda: Option<f64>,
    tau: Option<f64>,
    phi: Option<f64>,
    converged: bool,
    iterations: usize,
    objective: f64,
    /// Nonzero for penalized fits, Bonferroni at 0.05 otherwise.
    selected: Vec<bool>,
    signal_groups: GroupsOut,
    strength: InstrumentStrength,
}

pub fn fit(args: FitArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    a.cv.fill();
    set(&mut a.method, "pacs".into());
    set(&mut a.repeats, CvConfig::default().repeats);
    set(&mut a.seed, 1);
    set(&mut a.precision, grouping::DEFAULT_PRECISION);
    let method = a.method.clone().unwrap();
    let est = Estimator::parse(&method).ok_or_else(|| CliError(format!("unknown method '{method}'")))?;
    if est == Estimator::PacsX {
        set(&mut a.threshold, 0.8);
    }
    if a.lambda.is_some() {
        set(&mut a.tau, 1.0);
    }
    let (ds, inputs) = a.data.load()?;
    let cv = a.cv.build(a.repeats.unwrap(), a.seed.unwrap(), a.threshold)?;
    let dq = build_design(&ds);
    let strength = matrix_core::instrument_strength(&dq, StrengthScaling::Standardized);
    let prob = Problem::from_design(&dq);
    let mut phi = a.phi;
    let fit: FitResult = match est {
        Estimator::Ivw => estimators::fit_ivw(&dq)?,
        Estimator::Divw => estimators::fit_divw_problem(&dq, &prob, true)?,
        Estimator::Dridge => {
            let p = match phi {
                Some(p) => p,
                None => model_selection::cv_ridge(&ds, &cv)?,
            };
            phi = Some(p);
            estimators::fit_dridge_with(&dq, &prob, p, true)?
        }
        Estimator::Dlasso | Estimator::Pacs | Estimator::PacsX => match a.lambda {
            Some(lambda) => {
                let tau = a.tau.unwrap();
                let p = match phi {
                    Some(p) => p,
                    None => model_selection::cv_ridge(&ds, &cv)?,
                };
                phi = Some(p);
                let b0 = estimators::fit_dridge_problem(&prob, p)?;
                if est == Estimator::Dlasso {
                    let w = b0.map(|b| b.abs().max(estimators::DENOM_FLOOR).powf(-tau));
                    estimators::fit_dlasso_problem(&prob, &w, tau, lambda, &b0, &cv.lqa)?
                } else {
                    let rhat = summary_data::exposure_correlation(&ds, cv.basis);
                    let w = estimators::pacs_weights(&b0, &rhat, tau, cv.threshold);
                    let mut f = estimators::fit_pacs_problem(&prob, &w, lambda, &b0, &cv.lqa, None)?;
                    f.method = estimators::Method::Pacs;
                    f
                }
            }
            None => {
                let t = if est == Estimator::Dlasso {
                    model_selection::tune_dlasso(&ds, &cv)?
                } else {
                    model_selection::tune_pacs(&ds, &cv)?
                };
                phi = Some(t.phi);
                t.fit
            }
        },
    };
    let penalized = matches!(est, Estimator::Dlasso | Estimator::Pacs | Estimator::PacsX);
    let se = fit.standard_errors();
    let selected = if penalized {
        fit.selected()
    } else {
        estimators::bonferroni_selected(&fit, 0.05).unwrap_or_else(|| fit.selected())
    };
    let names = ds.exposure_names().to_vec();
    let sgs = grouping::extract_signal_groups(&fit, a.precision.unwrap());
    let out = FitOutput {
        method: method.to_ascii_lowercase(),
        exposures: names.clone(),
        beta: vec_of(&fit.beta),
        p_values: se.as_ref().map(|s| vec_of(&estimators::wald_p_values(&fit.beta, s))),
        se: se.as_ref().map(vec_of),
        lambda: fit.lambda,
        tau: fit.tau,
        phi,
        converged: fit.converged,
        iterations: fit.iterations,
        objective: fit.objective,
        selected,
        signal_groups: groups_out(&sgs, &names),
        strength,
    };
    let mut dir = a.out.open()?;
    dir.write_json("fit.json", &out)?;
    dir.finish("fit", a.seed, serde_json::to_value(&a)?, inputs)
}

// ---- diagnose ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct DiagnoseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
}

#[derive(Serialize)]
struct DiagnoseOutput {
    num_snps: usize,
    num_exposures: usize,
    standardized: InstrumentStrength,
    raw: InstrumentStrength,
    /// Standardized strength parameter below the rule-of-thumb 7.
    weak: bool,
}

pub fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    let (ds, inputs) = a.data.load()?;
    let dq = build_design(&ds);
    let standardized = matrix_core::instrument_strength(&dq, StrengthScaling::Standardized);
    let out = DiagnoseOutput {
        num_snps: ds.num_snps(),
        num_exposures: ds.num_exposures(),
        raw: matrix_core::instrument_strength(&dq, StrengthScaling::Raw),
        weak: !(standardized.is_param >= 7.0),
        standardized,
    };
    let mut dir = a.out.open()?;
    dir.write_json("strength.json", &out)?;
    let json = serde_json::to_string_pretty(&out)?;
    println!("{json}");
    dir.finish("diagnose", None, serde_json::to_value(&a)?, inputs)
}

// ---- thin ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct ThinArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    /// Number of thinned copies.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Information fractions, comma separated; even split when absent.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn thin(args: ThinArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    set(&mut a.seed, 1);
    let plan = match (&a.eps, a.folds) {
        (Some(eps), Some(m)) if eps.len() != m => {
            return Err(CliError(format!("--eps has {} entries but --folds is {m}", eps.len())).into())
        }
        (Some(eps), _) => thinning::ThinningPlan::new(eps.clone(), a.seed.unwrap())?,
        (None, m) => thinning::ThinningPlan::even(m.unwrap_or(2), a.seed.unwrap())?,
    };
    a.folds = Some(plan.num_folds());
    a.eps = Some(plan.epsilons.clone());
    let (ds, inputs) = a.data.load()?;
    let reps = thinning::thin_multi_fold(&ds, &plan)?;
    let mut dir = a.out.open()?;
    for (m, fold) in reps.folds.iter().enumerate() {
        dir.write(&format!("fold_{}.tsv", m + 1), summary_data::format_dataset(fold).as_bytes())?;
    }
    dir.write("sigma.csv", summary_data::format_matrix_csv(ds.correlation().matrix()).as_bytes())?;
    dir.finish("thin", a.seed, serde_json::to_value(&a)?, inputs)
}

// ---- cv ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct CvArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvOpts,
    /// pacs or dlasso.
    #[arg(long)]
    pub method: Option<String>,
    /// Correlation threshold (PACS-x).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Repeats of the fold thinning; losses are averaged over repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct CvOutput<'a> {
    method: &'a str,
    phi: f64,
    chosen_lambda: f64,
    chosen_tau: f64,
    grid: &'a model_selection::TuningGrid,
    strength: InstrumentStrength,
    cv: &'a model_selection::CvResult,
    ridge_losses: &'a [model_selection::CandidateLoss],
}

pub fn cv(args: CvArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    a.cv.fill();
    set(&mut a.method, "pacs".into());
    set(&mut a.repeats, CvConfig::default().repeats);
    set(&mut a.seed, 1);
    let method = a.method.clone().unwrap();
    let (ds, inputs) = a.data.load()?;
    let cfg = a.cv.build(a.repeats.unwrap(), a.seed.unwrap(), a.threshold)?;
    let tuned = match method.as_str() {
        "pacs" => model_selection::tune_pacs(&ds, &cfg)?,
        "dlasso" => model_selection::tune_dlasso(&ds, &cfg)?,
        other => return Err(CliError(format!("cv supports pacs or dlasso, not '{other}'")).into()),
    };
    let mut csv = String::from("lambda,tau,mean_loss,se_loss,failures,nonconverged,chosen,minimum\n");
    for (i, c) in tuned.cv.candidates.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{:e},{},{:e},{:e},{},{},{},{}",
            c.lambda,
            c.tau,
            c.mean_loss,
            c.se_loss,
            c.failures,
            c.nonconverged,
            u8::from(i == tuned.cv.chosen_index),
            u8::from(i == tuned.cv.min_index)
        );
    }
    let out = CvOutput {
        method: &method,
        phi: tuned.phi,
        chosen_lambda: tuned.cv.chosen_lambda,
        chosen_tau: tuned.cv.chosen_tau,
        grid: &tuned.grid,
        strength: tuned.strength,
        cv: &tuned.cv,
        ridge_losses: &tuned.ridge_losses,
    };
    let mut dir = a.out.open()?;
    dir.write_json("cv.json", &out)?;
    dir.write("cv_losses.csv", csv.as_bytes())?;
    dir.finish("cv", a.seed, serde_json::to_value(&a)?, inputs)
}

// ---- select-infer ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct PipeOpts {
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvOpts,
    /// Confidence level of the group intervals.
    #[arg(long)]
    pub level: Option<f64>,
    /// Magnitude tolerance for forming signal-groups.
    #[arg(long)]
    pub precision: Option<f64>,
    /// Information share of the selection copy.
    #[arg(long)]
    pub select_fraction: Option<f64>,
    /// Select with the adaptive LASSO instead of PACS.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lasso: Option<bool>,
    /// Correlation threshold (PACS-x).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
}

impl PipeOpts {
    fn fill(&mut self) {
        self.cv.fill();
        set(&mut self.level, 0.95);
        set(&mut self.precision, grouping::DEFAULT_PRECISION);
        set(&mut self.select_fraction, 0.5);
        set(&mut self.lasso, false);
        set(&mut self.seed, 1);
    }

    fn build(&self, cv_repeats: usize) -> Result<PipelineConfig> {
        let level = self.level.unwrap();
        if !(level > 0.0 && level < 1.0) {
            return Err(CliError(format!("--level {level} must lie in (0, 1)")).into());
        }
        Ok(PipelineConfig {
            cv: self.cv.build(cv_repeats, self.seed.unwrap(), self.threshold)?,
            precision: self.precision.unwrap(),
            level,
            select_fraction: self.select_fraction.unwrap(),
            lasso: self.lasso.unwrap(),
        })
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct PipelineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipe: PipeOpts,
    /// CV repeats on the selection copy.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Serialize)]
struct InferenceOut {
    level: f64,
    estimates: Vec<f64>,
    se: Vec<f64>,
    ci_low: Vec<f64>,
    ci_high: Vec<f64>,
    p_values: Vec<f64>,
    strength: InstrumentStrength,
}

impl From<&GroupInference> for InferenceOut {
    fn from(g: &GroupInference) -> Self {
        Self {
            level: g.level,
            estimates: vec_of(&g.group_estimates),
            se: vec_of(&g.standard_errors()),
            ci_low: vec_of(&g.ci_low),
            ci_high: vec_of(&g.ci_high),
            p_values: vec_of(&g.p_values),
            strength: g.strength,
        }
    }
}

#[derive(Serialize)]
struct SelectionOutput {
    exposures: Vec<String>,
    selection: GroupsOut,
    inference: Option<InferenceOut>,
    inference_status: Option<String>,
    diagnostics: grouping::PipelineDiagnostics,
}

const INFERENCE_HEADER: &str = "group,members,estimate,se,ci_low,ci_high,p_value\n";

pub fn select_infer(args: PipelineArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    a.pipe.fill();
    set(&mut a.repeats, CvConfig::default().repeats);
    let (ds, inputs) = a.data.load()?;
    let pc = a.pipe.build(a.repeats.unwrap())?;
    let seed = a.pipe.seed.unwrap();
    let out = grouping::post_selection_pipeline(&ds, &pc, seed)?;
    let names = ds.exposure_names().to_vec();
    let mut csv = String::from(INFERENCE_HEADER);
    if let Some(inf) = &out.inference {
        let se = inf.standard_errors();
        for (l, g) in out.selection.groups.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                l + 1,
                csv_field(&signed_members(g, &names)),
                inf.group_estimates[l],
                se[l],
                inf.ci_low[l],
                inf.ci_high[l],
                inf.p_values[l]
            );
        }
    }
    let sel = SelectionOutput {
        exposures: names.clone(),
        selection: groups_out(&out.selection, &names),
        inference: out.inference.as_ref().map(InferenceOut::from),
        inference_status: out.inference_status.clone(),
        diagnostics: out.diagnostics.clone(),
    };
    let mut dir = a.out.open()?;
    dir.write_json("selection.json", &sel)?;
    dir.write("inference.csv", csv.as_bytes())?;
    dir.finish("select-infer", Some(seed), serde_json::to_value(&a)?, inputs)
}

// ---- stability ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct StabilityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipe: PipeOpts,
    /// Number of thinning runs.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// CV repeats inside each run.
    #[arg(long)]
    pub cv_repeats: Option<usize>,
    /// Also report median estimates and SEs of the most frequent grouping.
    /// Runs share the data, so these are descriptive only.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub median: Option<bool>,
}

#[derive(Serialize)]
struct StabilityOutput<'a> {
    exposures: &'a [String],
    repeats: usize,
    label_counts: &'a [(String, usize)],
    significance_counts: &'a [usize],
    failures: &'a [(usize, String)],
    modal: Option<&'a grouping::ModalGrouping>,
}

pub fn stability(args: StabilityArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    a.pipe.fill();
    set(&mut a.repeats, 20);
    set(&mut a.cv_repeats, CvConfig::default().repeats);
    set(&mut a.median, false);
    let (ds, inputs) = a.data.load()?;
    let pc = a.pipe.build(a.cv_repeats.unwrap())?;
    let seed = a.pipe.seed.unwrap();
    let s = grouping::stability_summary(&ds, &pc, a.repeats.unwrap(), seed)?;
    let names = ds.exposure_names();
    let k = names.len();
    let mut co = String::from("exposure");
    for n in names {
        co.push(',');
        co.push_str(&csv_field(n));
    }
    co.push('\n');
    for i in 0..k {
        co.push_str(&csv_field(&names[i]));
        for j in 0..k {
            let _ = write!(co, ",{}", s.coassignment[(i, j)]);
        }
        co.push('\n');
    }
    let mut runs = String::from("run,seed,label,group,members,estimate,se,ci_low,ci_high,p_value\n");
    for r in &s.rows {
        let members = r
            .members
            .iter()
            .zip(&r.signs)
            .map(|(&m, &sg)| if sg < 0 { format!("-{}", names[m]) } else { names[m].clone() })
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            runs,
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
            r.run,
            r.seed,
            csv_field(&r.label),
            r.group,
            csv_field(&members),
            r.estimate,
            r.se,
            r.ci_low,
            r.ci_high,
            r.p_value
        );
    }
    if a.median.unwrap() {
        log::warn!("median aggregation over thinning runs is descriptive: runs reuse the same data and are not independent");
    }
    let out = StabilityOutput {
        exposures: names,
        repeats: s.repeats,
        label_counts: &s.label_counts,
        significance_counts: &s.significance_counts,
        failures: &s.failures,
        modal: if a.median.unwrap() { s.modal.as_ref() } else { None },
    };
    let mut dir = a.out.open()?;
    dir.write_json("stability.json", &out)?;
    dir.write("coassignment.csv", co.as_bytes())?;
    dir.write("stability_runs.csv", runs.as_bytes())?;
    dir.finish("stability", Some(seed), serde_json::to_value(&a)?, inputs)
}

// ---- simulate ----

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvOpts,
    /// Individuals per cohort.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of instruments.
    #[arg(long)]
    pub snps: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Comma-separated: ivw, divw, dridge, dlasso, pacs, pacs-x.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// CV repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Correlation threshold of pacs-x.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Draw summary statistics from their sampling distribution instead of simulating cohorts.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fast: Option<bool>,
    /// Shared correlation supplied to the estimators: phenotypic or identity.
    #[arg(long)]
    pub sigma_source: Option<String>,
    /// Also run select-infer on every replicate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pipeline: Option<bool>,
}

#[derive(Serialize)]
struct PipelineSummary {
    runs: usize,
    true_label: String,
    true_model_runs: usize,
    /// Among true-model runs, the share of intervals covering each group effect.
    coverage: Vec<f64>,
    label_counts: Vec<(String, usize)>,
    failures: usize,
}

fn summarize_pipeline(records: &[PipelineRecord], truth: &[f64]) -> PipelineSummary {
    let target = simulation::true_label(truth);
    let hits: Vec<&PipelineRecord> = records.iter().filter(|r| r.true_model && !r.covered.is_empty()).collect();
    let ng = hits.first().map_or(0, |r| r.covered.len());
    let coverage = (0..ng)
        .map(|l| hits.iter().filter(|r| r.covered[l]).count() as f64 / hits.len() as f64)
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.label.is_empty()) {
        *counts.entry(r.label.clone()).or_default() += 1;
    }
    let mut label_counts: Vec<(String, usize)> = counts.into_iter().collect();
    label_counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    PipelineSummary {
        runs: records.len(),
        true_label: target,
        true_model_runs: hits.len(),
        coverage,
        label_counts,
        failures: records.iter().filter(|r| r.label.is_empty()).count(),
    }
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let mut a = resolve(&args, args.out.config.clone())?;
    a.out.fill();
    a.cv.fill();
    let d = ExperimentConfig::default();
    set(&mut a.n, d.dgp.n);
    set(&mut a.snps, d.dgp.num_snps);
    set(&mut a.replicates, d.replicates);
    set(&mut a.estimators, ["ivw", "divw", "pacs", "pacs-x"].iter().map(|s| s.to_string()).collect());
    set(&mut a.seed, d.seed);
    set(&mut a.repeats, d.cv.repeats);
    set(&mut a.threshold, d.pacs_x_threshold);
    set(&mut a.fast, false);
    set(&mut a.sigma_source, "phenotypic".into());
    set(&mut a.pipeline, false);
    let mut cfg = d;
    cfg.dgp.n = a.n.unwrap();
    cfg.dgp.num_snps = a.snps.unwrap();
    cfg.dgp.sigma = match a.sigma_source.as_deref().unwrap() {
        "phenotypic" => SigmaSource::Phenotypic,
        "identity" => SigmaSource::Identity,
        other => return Err(CliError(format!("invalid sigma source '{other}'")).into()),
    };
    cfg.replicates = a.replicates.unwrap();
    cfg.seed = a.seed.unwrap();
    cfg.fast = a.fast.unwrap();
    cfg.pacs_x_threshold = a.threshold.unwrap();
    cfg.cv = a.cv.build(a.repeats.unwrap(), cfg.seed, None)?;
    cfg.estimators = a
        .estimators
        .as_ref()
        .unwrap()
        .iter()
        .map(|s| Estimator::parse(s).ok_or_else(|| CliError(format!("unknown estimator '{s}'")).into()))
        .collect::<Result<Vec<_>>>()?;
    if cfg.estimators.is_empty() {
        return Err(CliError("--estimators is empty".into()).into());
    }
    cfg.dgp.validate()?;
    let pipeline = a.pipeline.unwrap();
    let pc = PipelineConfig { cv: cfg.cv.clone(), ..PipelineConfig::default() };
    let truth = simulation::generate_true_gammas(&cfg.dgp, cfg.dgp.seed)?;
    let results: Vec<(ReplicateRecord, Option<PipelineRecord>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let (seed, ds) = simulation::generate_replicate(&cfg, &truth, r)?;
            let rec = simulation::evaluate_replicate(&cfg, &ds, r, seed);
            let pr = pipeline.then(|| simulation::run_pipeline_replicate(&cfg, &pc, &ds, r, seed));
            Ok((rec, pr))
        })
        .collect::<mvpacs::Result<Vec<_>>>()?;
    let records: Vec<ReplicateRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let mut dir = a.out.open()?;
    dir.write("metrics.csv", simulation::summary_csv(&simulation::summarize(&cfg.estimators, &records)).as_bytes())?;
    dir.write("replicates.jsonl", jsonl.as_bytes())?;
    if pipeline {
        let prs: Vec<PipelineRecord> = results.into_iter().filter_map(|(_, p)| p).collect();
        let mut pj = String::new();
        for p in &prs {
            pj.push_str(&serde_json::to_string(p)?);
            pj.push('\n');
        }
        dir.write("pipeline.jsonl", pj.as_bytes())?;
        dir.write_json("pipeline_summary.json", &summarize_pipeline(&prs, &cfg.dgp.beta_true))?;
    }
    let config: Value = serde_json::to_value(&a)?;
    dir.finish("simulate", a.seed, config, BTreeMap::new())
}
