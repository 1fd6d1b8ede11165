//! Harmonized two-sample summary statistics and the design quantities
//! derived from them.
//!
//! A dataset holds, for each SNP, the estimated SNP–exposure associations
//! with their standard errors and the SNP–outcome association with its
//! standard error, plus the shared correlation matrix of the exposure
//! estimation errors. Every estimator in the crate consumes the
//! [`DesignQuantities`] built from a dataset.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SnpAssociation {
    pub snp_id: String,
    /// Per-exposure association estimates.
    pub gamma_hat: Vec<f64>,
    /// Per-exposure standard errors.
    pub se_x: Vec<f64>,
    pub gamma_outcome_hat: f64,
    pub se_y: f64,
}

/// Shared correlation of the exposure estimation errors (sample overlap
/// between exposure GWAS). Symmetric, unit diagonal, positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedCorrelation {
    sigma: DMatrix<f64>,
}

const SYMMETRY_TOL: f64 = 1e-10;

impl SharedCorrelation {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let k = sigma.nrows();
        if k == 0 || sigma.ncols() != k {
            return Err(Error::Dimension(format!(
                "correlation matrix must be square and non-empty, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        for i in 0..k {
            if (sigma[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::Invalid(format!(
                    "correlation matrix diagonal entry {i} is {} (expected 1)",
                    sigma[(i, i)]
                )));
            }
            for j in 0..i {
                let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
                if !a.is_finite() || (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::Invalid(format!(
                        "correlation matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if sigma.clone().cholesky().is_none() {
            return Err(Error::Invalid("correlation matrix is not positive definite".into()));
        }
        Ok(Self { sigma })
    }

    pub fn identity(k: usize) -> Self {
        Self { sigma: DMatrix::identity(k, k) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryDataset {
    snps: Vec<SnpAssociation>,
    correlation: SharedCorrelation,
    exposure_names: Vec<String>,
}

impl SummaryDataset {
    pub fn new(
        snps: Vec<SnpAssociation>,
        correlation: SharedCorrelation,
        exposure_names: Vec<String>,
    ) -> Result<Self> {
        let k = exposure_names.len();
        if k == 0 {
            return Err(Error::Invalid("dataset has no exposures".into()));
        }
        if correlation.dim() != k {
            return Err(Error::Dimension(format!(
                "correlation matrix is {0}x{0} but the dataset has {k} exposures",
                correlation.dim()
            )));
        }
        if snps.len() <= k {
            return Err(Error::Invalid(format!(
                "need more SNPs than exposures (p = {}, K = {k})",
                snps.len()
            )));
        }
        let mut seen = HashSet::with_capacity(snps.len());
        for (i, snp) in snps.iter().enumerate() {
            let row = i + 1;
            if snp.gamma_hat.len() != k || snp.se_x.len() != k {
                return Err(Error::Dimension(format!(
                    "row {row}: expected {k} exposure columns, found {} estimates and {} SEs",
                    snp.gamma_hat.len(),
                    snp.se_x.len()
                )));
            }
            validate_snp(snp, row, &exposure_names)?;
            if !seen.insert(snp.snp_id.as_str()) {
                return Err(Error::DuplicateSnp { id: snp.snp_id.clone(), row });
            }
        }
        Ok(Self { snps, correlation, exposure_names })
    }

    /// Builds a dataset from column-major arrays; SNP ids are `snp1..snpP`.
    pub fn from_arrays(
        gamma_hat: &DMatrix<f64>,
        se_x: &DMatrix<f64>,
        gamma_outcome: &DVector<f64>,
        se_y: &DVector<f64>,
        correlation: SharedCorrelation,
        exposure_names: Vec<String>,
    ) -> Result<Self> {
        let (p, k) = gamma_hat.shape();
        if se_x.shape() != (p, k) || gamma_outcome.len() != p || se_y.len() != p {
            return Err(Error::Dimension("array shapes disagree".into()));
        }
        let snps = (0..p)
            .map(|j| SnpAssociation {
                snp_id: format!("snp{}", j + 1),
                gamma_hat: gamma_hat.row(j).iter().copied().collect(),
                se_x: se_x.row(j).iter().copied().collect(),
                gamma_outcome_hat: gamma_outcome[j],
                se_y: se_y[j],
            })
            .collect();
        Self::new(snps, correlation, exposure_names)
    }

    pub fn snps(&self) -> &[SnpAssociation] {
        &self.snps
    }

    pub fn correlation(&self) -> &SharedCorrelation {
        &self.correlation
    }

    pub fn exposure_names(&self) -> &[String] {
        &self.exposure_names
    }

    pub fn num_snps(&self) -> usize {
        self.snps.len()
    }

    pub fn num_exposures(&self) -> usize {
        self.exposure_names.len()
    }

    /// p×K matrix of SNP–exposure estimates.
    pub fn pi_hat(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.snps.len(), self.num_exposures(), |j, k| self.snps[j].gamma_hat[k])
    }

    /// Replaces the shared correlation, keeping every association.
    pub fn with_correlation(&self, correlation: SharedCorrelation) -> Result<Self> {
        Self::new(self.snps.clone(), correlation, self.exposure_names.clone())
    }

    /// Rescales exposure `k`'s estimates and SEs by `trait_sd[k]`.
    pub fn rescaled(&self, trait_sd: &[f64]) -> Result<Self> {
        if trait_sd.len() != self.num_exposures() {
            return Err(Error::Dimension(format!(
                "trait SD vector has length {} but the dataset has {} exposures",
                trait_sd.len(),
                self.num_exposures()
            )));
        }
        if let Some(bad) = trait_sd.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("trait SD entry {} is not positive", bad + 1)));
        }
        let snps = self
            .snps
            .iter()
            .map(|s| SnpAssociation {
                snp_id: s.snp_id.clone(),
                gamma_hat: s.gamma_hat.iter().zip(trait_sd).map(|(g, sd)| g / sd).collect(),
                se_x: s.se_x.iter().zip(trait_sd).map(|(e, sd)| e / sd).collect(),
                gamma_outcome_hat: s.gamma_outcome_hat,
                se_y: s.se_y,
            })
            .collect();
        Self::new(snps, self.correlation.clone(), self.exposure_names.clone())
    }
}

fn validate_snp(snp: &SnpAssociation, row: usize, names: &[String]) -> Result<()> {
    for (k, (&g, &se)) in snp.gamma_hat.iter().zip(&snp.se_x).enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite { row, column: format!("beta_{}", names[k]) });
        }
        if !se.is_finite() {
            return Err(Error::NonFinite { row, column: format!("se_{}", names[k]) });
        }
        if se <= 0.0 {
            return Err(Error::NonPositiveSe { row, column: format!("se_{}", names[k]) });
        }
    }
    if !snp.gamma_outcome_hat.is_finite() {
        return Err(Error::NonFinite { row, column: "beta_outcome".into() });
    }
    if !snp.se_y.is_finite() {
        return Err(Error::NonFinite { row, column: "se_outcome".into() });
    }
    if snp.se_y <= 0.0 {
        return Err(Error::NonPositiveSe { row, column: "se_outcome".into() });
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn parse_header(path: &Path, line: &str) -> Result<Vec<String>> {
    let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
    let header_err = |msg: String| Error::Header { path: path.to_path_buf(), msg };
    if cols.len() < 5 || (cols.len() - 3) % 2 != 0 {
        return Err(header_err(format!("unexpected column count {}", cols.len())));
    }
    if cols[0] != "snp" {
        return Err(header_err(format!("first column must be 'snp', found '{}'", cols[0])));
    }
    let n = cols.len();
    if cols[n - 2] != "beta_outcome" || cols[n - 1] != "se_outcome" {
        return Err(header_err("last two columns must be beta_outcome, se_outcome".into()));
    }
    let mut names = Vec::new();
    for pair in cols[1..n - 2].chunks(2) {
        let name = pair[0]
            .strip_prefix("beta_")
            .ok_or_else(|| header_err(format!("expected beta_<name>, found '{}'", pair[0])))?;
        let se_name = pair[1]
            .strip_prefix("se_")
            .ok_or_else(|| header_err(format!("expected se_<name>, found '{}'", pair[1])))?;
        if name != se_name || name.is_empty() {
            return Err(header_err(format!("column pair '{}' / '{}' mismatched", pair[0], pair[1])));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

/// Parses a plain numeric CSV (no header) into a matrix.
pub fn read_numeric_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::MalformedRow {
                    path: path.to_path_buf(),
                    row: i + 1,
                    msg: format!("cannot parse '{}' as a number", t.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    row: i + 1,
                    msg: format!("expected {} fields, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Loads a summary dataset from a TSV file and an optional Σ CSV.
///
/// Without `sigma_path` the shared correlation defaults to the identity.
pub fn load_dataset(path: &Path, sigma_path: Option<&Path>) -> Result<SummaryDataset> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Header { path: path.to_path_buf(), msg: "file is empty".into() })?;
    let names = parse_header(path, header)?;
    let k = names.len();
    let mut snps = Vec::new();
    for (row, (_, line)) in lines.enumerate() {
        let row = row + 1;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 * k + 3 {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                msg: format!("expected {} fields, found {}", 2 * k + 3, fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                msg: format!("cannot parse '{}' as a number", fields[idx]),
            })
        };
        let mut gamma_hat = Vec::with_capacity(k);
        let mut se_x = Vec::with_capacity(k);
        for m in 0..k {
            gamma_hat.push(num(1 + 2 * m)?);
            se_x.push(num(2 + 2 * m)?);
        }
        snps.push(SnpAssociation {
            snp_id: fields[0].to_string(),
            gamma_hat,
            se_x,
            gamma_outcome_hat: num(2 * k + 1)?,
            se_y: num(2 * k + 2)?,
        });
    }
    let correlation = match sigma_path {
        Some(sp) => {
            let sigma = read_numeric_csv(sp)?;
            if sigma.nrows() != k || sigma.ncols() != k {
                return Err(Error::Dimension(format!(
                    "{} has {} exposures but {} is {}x{}",
                    path.display(),
                    k,
                    sp.display(),
                    sigma.nrows(),
                    sigma.ncols()
                )));
            }
            SharedCorrelation::new(sigma)?
        }
        None => {
            log::warn!("no correlation matrix supplied; assuming no overlap between exposure GWAS (identity)");
            SharedCorrelation::identity(k)
        }
    };
    SummaryDataset::new(snps, correlation, names)
}

/// Reads an optional trait-SD rescale vector (single-column CSV).
pub fn load_trait_sd(path: &Path) -> Result<Vec<f64>> {
    let m = read_numeric_csv(path)?;
    if m.ncols() != 1 {
        return Err(Error::Dimension(format!(
            "{}: trait SD file must have one column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.iter().copied().collect())
}

pub fn format_dataset(ds: &SummaryDataset) -> String {
    let mut out = String::from("snp");
    for name in ds.exposure_names() {
        let _ = write!(out, "\tbeta_{name}\tse_{name}");
    }
    out.push_str("\tbeta_outcome\tse_outcome\n");
    for snp in ds.snps() {
        out.push_str(&snp.snp_id);
        for (g, s) in snp.gamma_hat.iter().zip(&snp.se_x) {
            let _ = write!(out, "\t{g:e}\t{s:e}");
        }
        let _ = writeln!(out, "\t{:e}\t{:e}", snp.gamma_outcome_hat, snp.se_y);
    }
    out
}

pub fn format_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes the dataset TSV; float fields use shortest round-trip formatting.
pub fn write_dataset(ds: &SummaryDataset, path: &Path) -> Result<()> {
    fs::write(path, format_dataset(ds)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    fs::write(path, format_matrix_csv(m)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Quantities every estimator is built from: Π̂, Γ̂, the inverse outcome
/// variances W, the per-SNP exposure covariance Σ_Xj and
/// V = Σ_j Σ_Xj σ_Yj⁻².
#[derive(Debug, Clone)]
pub struct DesignQuantities {
    pub pi_hat: DMatrix<f64>,
    pub gamma_vec: DVector<f64>,
    /// Diagonal of W (σ_Yj⁻²).
    pub weights: DVector<f64>,
    pub v: DMatrix<f64>,
    pub sigma_xj: Vec<DMatrix<f64>>,
    /// Π̂ᵀWΠ̂
    pub normal: DMatrix<f64>,
    /// Π̂ᵀWΓ̂
    pub cross: DVector<f64>,
}

impl DesignQuantities {
    pub fn num_snps(&self) -> usize {
        self.pi_hat.nrows()
    }

    pub fn num_exposures(&self) -> usize {
        self.pi_hat.ncols()
    }

    /// Dense p×p W. Only for small problems and tests.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.weights)
    }

    /// Π̂ᵀWΠ̂ − V.
    pub fn debiased_normal(&self) -> DMatrix<f64> {
        &self.normal - &self.v
    }

    /// V_j = Σ_Xj σ_Yj⁻².
    pub fn v_j(&self, j: usize) -> DMatrix<f64> {
        &self.sigma_xj[j] * self.weights[j]
    }
}

pub fn build_design(ds: &SummaryDataset) -> DesignQuantities {
    let p = ds.num_snps();
    let k = ds.num_exposures();
    let sigma = ds.correlation().matrix();
    let pi_hat = ds.pi_hat();
    let gamma_vec = DVector::from_iterator(p, ds.snps().iter().map(|s| s.gamma_outcome_hat));
    let weights = DVector::from_iterator(p, ds.snps().iter().map(|s| 1.0 / (s.se_y * s.se_y)));
    let mut v = DMatrix::zeros(k, k);
    let mut sigma_xj = Vec::with_capacity(p);
    for (j, snp) in ds.snps().iter().enumerate() {
        let sx = DMatrix::from_fn(k, k, |a, b| snp.se_x[a] * sigma[(a, b)] * snp.se_x[b]);
        v += &sx * weights[j];
        sigma_xj.push(sx);
    }
    let weighted = DMatrix::from_fn(p, k, |j, a| pi_hat[(j, a)] * weights[j]);
    let normal = crate::matrix_core::symmetrize(&(pi_hat.transpose() * &weighted));
    let cross = weighted.transpose() * &gamma_vec;
    let v = crate::matrix_core::symmetrize(&v);
    DesignQuantities { pi_hat, gamma_vec, weights, v, sigma_xj, normal, cross }
}

/// What the exposure correlations r̂_km are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationBasis {
    /// Raw Π̂ columns.
    #[default]
    Raw,
    /// z-scores γ̂_jk / σ_Xjk.
    ZScore,
}

/// Pearson correlation between the columns of a matrix. Columns with zero
/// variance get 0 off-diagonal and are listed in the second return value.
pub fn column_correlation(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (n, k) = m.shape();
    let means: Vec<f64> = (0..k).map(|c| m.column(c).sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, k, |i, c| m[(i, c)] - means[c]);
    let cov = centered.transpose() * &centered;
    let degenerate: Vec<usize> = (0..k).filter(|&c| cov[(c, c)] <= 0.0).collect();
    let r = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else if cov[(a, a)] <= 0.0 || cov[(b, b)] <= 0.0 {
            0.0
        } else {
            (cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()).clamp(-1.0, 1.0)
        }
    });
    (r, degenerate)
}

/// Observed correlations r̂_km between SNP–exposure associations.
pub fn exposure_correlation(ds: &SummaryDataset, basis: CorrelationBasis) -> DMatrix<f64> {
    let m = match basis {
        CorrelationBasis::Raw => ds.pi_hat(),
        CorrelationBasis::ZScore => DMatrix::from_fn(ds.num_snps(), ds.num_exposures(), |j, k| {
            let s = &ds.snps()[j];
            s.gamma_hat[k] / s.se_x[k]
        }),
    };
    let (r, degenerate) = column_correlation(&m);
    for c in degenerate {
        log::warn!(
            "exposure '{}' has zero variance across SNPs; its correlations are undefined and set to 0",
            ds.exposure_names()[c]
        );
    }
    r
}
