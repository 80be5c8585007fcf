//! Design construction for the heterogeneous target model and GLM fitting by IRLS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PopulationId, Table};
use crate::model::{Family, TargetModelSpec};

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("column {column:?} has a missing value at row {row}; impute before fitting")]
    Incomplete { column: String, row: usize },
    #[error("column {0:?} not found")]
    MissingColumn(String),
    #[error("design matrix is rank deficient (column {0:?} is collinear with earlier columns)")]
    Singular(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("coefficient names do not match the design: {0}")]
    NameMismatch(String),
    #[error("fewer rows with positive weight ({rows}) than coefficients ({coefs})")]
    TooFewRows { rows: usize, coefs: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
}

/// One column of the target design.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    /// Indicator of population `k`.
    PopIntercept(PopulationId),
    /// Main effect of a covariate.
    Main(String),
    /// Covariate times the indicator of population `k`.
    Interaction { column: String, population: PopulationId },
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Intercept => "(Intercept)".into(),
            Term::PopIntercept(k) => format!("(Intercept):I{k}"),
            Term::Main(c) => c.clone(),
            Term::Interaction { column, population } => format!("{column}:I{population}"),
        }
    }
}

/// Terms of the target model in canonical order: intercept, population
/// intercepts by k, X main effects, interactions by (k, p), B main effects.
pub fn design_terms(spec: &TargetModelSpec) -> Vec<Term> {
    let mut terms = vec![Term::Intercept];
    terms.extend(spec.populations.iter().map(|&k| Term::PopIntercept(k)));
    terms.extend(spec.shared.iter().cloned().map(Term::Main));
    for &k in &spec.populations {
        for p in &spec.shared {
            if spec.specific_slopes(k).contains(p) {
                terms.push(Term::Interaction {
                    column: p.clone(),
                    population: k,
                });
            }
        }
    }
    terms.extend(spec.internal_only.iter().cloned().map(Term::Main));
    terms
}

/// Terms of the internal-only model: intercept and main effects.
pub fn internal_terms(spec: &TargetModelSpec) -> Vec<Term> {
    std::iter::once(Term::Intercept)
        .chain(spec.covariates().cloned().map(Term::Main))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub terms: Vec<Term>,
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }
}

pub fn build_design<T: Table>(data: &T, spec: &TargetModelSpec) -> Result<DesignMatrix, GlmError> {
    build_design_terms(data, &design_terms(spec))
}

/// Evaluate `terms` on every row of `data`.
pub fn build_design_terms<T: Table>(data: &T, terms: &[Term]) -> Result<DesignMatrix, GlmError> {
    let n = data.n_rows();
    let pops = data.populations();
    let column = |name: &str| -> Result<&[f64], GlmError> {
        let idx = data
            .column_index(name)
            .ok_or_else(|| GlmError::MissingColumn(name.to_string()))?;
        if let Some(mask) = data.missing(idx) {
            if let Some(row) = mask.iter().position(|&m| m) {
                return Err(GlmError::Incomplete {
                    column: name.to_string(),
                    row,
                });
            }
        }
        Ok(data.values(idx))
    };
    let mut matrix = DMatrix::zeros(n, terms.len());
    for (j, term) in terms.iter().enumerate() {
        let mut col = matrix.column_mut(j);
        match term {
            Term::Intercept => col.fill(1.0),
            Term::PopIntercept(k) => {
                for (c, &p) in col.iter_mut().zip(pops) {
                    *c = if p == *k { 1.0 } else { 0.0 };
                }
            }
            Term::Main(name) => {
                for (c, &v) in col.iter_mut().zip(column(name)?) {
                    *c = v;
                }
            }
            Term::Interaction { column: name, population } => {
                for ((c, &v), &p) in col.iter_mut().zip(column(name)?).zip(pops) {
                    *c = if p == *population { v } else { 0.0 };
                }
            }
        }
    }
    Ok(DesignMatrix {
        terms: terms.to_vec(),
        names: terms.iter().map(Term::name).collect(),
        matrix,
    })
}

/// Response vector of `data`'s outcome column.
pub fn response<T: Table>(data: &T, outcome: &str) -> Result<Vec<f64>, GlmError> {
    let idx = data
        .column_index(outcome)
        .ok_or_else(|| GlmError::MissingColumn(outcome.to_string()))?;
    if let Some(mask) = data.missing(idx) {
        if let Some(row) = mask.iter().position(|&m| m) {
            return Err(GlmError::Incomplete {
                column: outcome.to_string(),
                row,
            });
        }
    }
    Ok(data.values(idx).to_vec())
}

/// Iteration controls for IRLS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub family: Family,
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Inverse weighted Fisher information (XᵀWX)⁻¹, not scaled by dispersion.
    pub vcov: DMatrix<f64>,
    /// Residual variance estimate for gaussian fits; 1 for binomial.
    pub dispersion: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GlmFit {
    /// Covariance scaled by the dispersion (the usual model-based covariance).
    pub fn scaled_vcov(&self) -> DMatrix<f64> {
        &self.vcov * self.dispersion
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        let v = self.scaled_vcov();
        (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }
}

pub fn fit_glm(
    design: &DesignMatrix,
    y: &[f64],
    family: Family,
    weights: Option<&[f64]>,
) -> Result<GlmFit, GlmError> {
    fit_glm_with(design, y, family, weights, IrlsOptions::default())
}

pub fn fit_glm_with(
    design: &DesignMatrix,
    y: &[f64],
    family: Family,
    weights: Option<&[f64]>,
    options: IrlsOptions,
) -> Result<GlmFit, GlmError> {
    let fit = irls(&design.matrix, y, family, weights, options).map_err(|e| match e {
        GlmError::Singular(j) => {
            let idx: usize = j.parse().unwrap_or(0);
            GlmError::Singular(design.names.get(idx).cloned().unwrap_or(j))
        }
        other => other,
    })?;
    Ok(GlmFit {
        family,
        names: design.names.clone(),
        coefficients: fit.coefficients,
        vcov: fit.vcov,
        dispersion: fit.dispersion,
        deviance: fit.deviance,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Unnamed IRLS result on a raw matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsFit {
    pub coefficients: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub dispersion: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Relative size below which a diagonal entry of R marks a collinear column.
const RANK_TOLERANCE: f64 = 1e-10;

/// Weighted least squares by QR: minimizes Σ wᵢ (zᵢ − xᵢβ)².
/// Returns β and R⁻¹ where R is the triangular factor of diag(√w)X.
fn weighted_qr_solve(
    x: &DMatrix<f64>,
    z: &[f64],
    w: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>), GlmError> {
    let (n, p) = x.shape();
    let mut xw = x.clone();
    let mut zw = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            xw[(i, j)] *= s;
        }
        zw[i] = z[i] * s;
    }
    let qr = xw.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..p).find(|&j| !(r[(j, j)].abs() > RANK_TOLERANCE * max_diag)) {
        return Err(GlmError::Singular(j.to_string()));
    }
    qr.q_tr_mul(&mut zw);
    let rhs = zw.rows(0, p).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| GlmError::Singular("0".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| GlmError::Singular("0".into()))?;
    Ok((beta, r_inv))
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>, GlmError> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(GlmError::Dimension(format!("{n} design rows but {} responses", y.len())));
    }
    let w = match weights {
        Some(w) if w.len() != n => {
            return Err(GlmError::Dimension(format!("{n} design rows but {} weights", w.len())))
        }
        Some(w) => {
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(GlmError::Weights("weights must be finite and nonnegative".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let rows = w.iter().filter(|&&v| v > 0.0).count();
    if rows < p {
        return Err(GlmError::TooFewRows { rows, coefs: p });
    }
    Ok(w)
}

/// IRLS for `family` with optional observation weights.
///
/// Starts from zeros (logit) or the OLS solution (identity). Stops when the
/// sup-norm change in coefficients drops below `options.tolerance`.
/// Non-convergence (for example under separation) is reported through
/// `converged = false` rather than an error.
pub fn irls(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    weights: Option<&[f64]>,
    options: IrlsOptions,
) -> Result<IrlsFit, GlmError> {
    let w = check_inputs(x, y, weights)?;
    let (n, p) = x.shape();

    if family == Family::Gaussian {
        let (beta, r_inv) = weighted_qr_solve(x, y, &w)?;
        return Ok(finish(x, y, &w, family, beta, &r_inv, 1, true));
    }

    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut z = vec![0.0; n];
    let mut ww = vec![0.0; n];
    let mut r_inv = DMatrix::zeros(p, p);
    while iterations < options.max_iterations {
        iterations += 1;
        let eta = x * &beta;
        for i in 0..n {
            let mu = family.inverse_link(eta[i]);
            let d = family.mu_eta(eta[i]).max(f64::EPSILON);
            z[i] = eta[i] + (y[i] - mu) / d;
            ww[i] = w[i] * d;
        }
        let (next, ri) = weighted_qr_solve(x, &z, &ww)?;
        r_inv = ri;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < options.tolerance {
            converged = true;
            break;
        }
    }
    // Covariance at the final coefficients.
    let eta = x * &beta;
    for i in 0..n {
        ww[i] = w[i] * family.mu_eta(eta[i]).max(f64::EPSILON);
    }
    if beta.iter().all(|v| v.is_finite()) {
        if let Ok((_, ri)) = weighted_qr_solve(x, &z, &ww) {
            r_inv = ri;
        }
    } else {
        converged = false;
    }
    Ok(finish(x, y, &w, family, beta, &r_inv, iterations, converged))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    family: Family,
    beta: DVector<f64>,
    r_inv: &DMatrix<f64>,
    iterations: usize,
    converged: bool,
) -> IrlsFit {
    let eta = x * &beta;
    let mut deviance = 0.0;
    let mut wrss = 0.0;
    for i in 0..y.len() {
        let mu = family.inverse_link(eta[i]);
        deviance += w[i] * family.unit_deviance(y[i], mu);
        wrss += w[i] * (y[i] - mu) * (y[i] - mu);
    }
    let dispersion = match family {
        Family::Binomial => 1.0,
        Family::Gaussian => {
            // Residual variance with weights normalized to the positive-weight row count.
            let p = beta.len() as f64;
            let n_pos = w.iter().filter(|&&v| v > 0.0).count() as f64;
            let w_sum: f64 = w.iter().sum();
            if n_pos > p {
                wrss * n_pos / (w_sum * (n_pos - p))
            } else {
                f64::NAN
            }
        }
    };
    let mut vcov = r_inv * r_inv.transpose();
    vcov = (&vcov + vcov.transpose()) * 0.5;
    IrlsFit {
        coefficients: beta,
        vcov,
        dispersion,
        deviance,
        iterations,
        converged,
    }
}

/// Penalized logistic regression (ridge penalty on every coefficient).
///
/// Used as a fallback when an unpenalized fit separates. Returns the
/// coefficients and the inverse penalized information.
pub fn ridge_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    penalty: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), GlmError> {
    let w = check_inputs(x, y, weights).or_else(|e| match e {
        // The penalty makes the problem well posed with few rows.
        GlmError::TooFewRows { .. } => Ok(weights.map_or_else(|| vec![1.0; y.len()], <[f64]>::to_vec)),
        other => Err(other),
    })?;
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let mut info = DMatrix::identity(p, p);
    for _ in 0..200 {
        let eta = x * &beta;
        let mut grad = -&beta * penalty;
        info = DMatrix::identity(p, p) * penalty;
        for i in 0..n {
            let mu = crate::model::expit(eta[i]);
            let row = x.row(i);
            let wi = w[i] * mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += w[i] * (y[i] - mu) * row[a];
                for b in 0..=a {
                    info[(a, b)] += wi * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| GlmError::Singular("penalized information".into()))?;
        let step = chol.solve(&grad);
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    let inv = info
        .cholesky()
        .ok_or_else(|| GlmError::Singular("penalized information".into()))?
        .inverse();
    Ok((beta, inv))
}

/// Mean response g⁻¹(Xγ̂) for a design whose columns match the fit.
pub fn predict_glm(fit: &GlmFit, design: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    if fit.names != design.names {
        return Err(GlmError::NameMismatch(format!(
            "fit has {:?}, design has {:?}",
            fit.names, design.names
        )));
    }
    let eta = &design.matrix * &fit.coefficients;
    Ok(eta.iter().map(|&e| fit.family.inverse_link(e)).collect())
}
