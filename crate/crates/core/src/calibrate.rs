//! Population-specific starting coefficients from external summaries, and
//! the per-row weights of the stacked data.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CenteringRecord, ColumnKind, DataError, Dataset, PopulationId, Table, INTERNAL};
use crate::glm::{build_design_terms, fit_glm, internal_terms, irls, response, GlmError, GlmFit, IrlsOptions, Term};
use crate::impute::StackedDataset;
use crate::model::{expit, CoefficientSummary, ExternalModelSpec, Family, Payload, TargetModelSpec};
use crate::synth::{covariate_columns, generate_synthetic_population, SynthError};

/// Synthetic block size, in multiples of the internal sample, for Category 2 fits.
pub const DEFAULT_BETA_SYN_MULTIPLIER: usize = 50;

/// Search interval for the corrected intercept.
pub const BISECTION_BRACKET: (f64, f64) = (-30.0, 30.0);

/// Bisection stops once the bracket is narrower than this.
pub const BISECTION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("omitted covariate {column:?} is constant in the internal data")]
    Degenerate { column: String },
    #[error("population {population}: corrected intercept not bracketed by [{low}, {high}]")]
    Bracket { population: PopulationId, low: f64, high: f64 },
    #[error("population {population}: expected prevalence {value} too close to 0 or 1")]
    DegeneratePrevalence { population: PopulationId, value: f64 },
    #[error("population {population}: attenuation factor {factor} is not positive")]
    Attenuation { population: PopulationId, factor: f64 },
    #[error("{0} did not converge")]
    Nonconvergence(String),
    #[error("no estimates for population {0}")]
    MissingPopulation(PopulationId),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Regression of one omitted covariate on the external model's covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedFit {
    pub name: String,
    /// Gaussian means identity link, Binomial means logit.
    pub link: Family,
    /// Intercept followed by one coefficient per conditioning covariate.
    pub theta: Vec<f64>,
    /// Two admissible values of a binary covariate.
    pub levels: Option<(f64, f64)>,
}

impl OmittedFit {
    pub fn mean(&self, x: &[f64]) -> f64 {
        let eta = self.theta[0] + self.theta[1..].iter().zip(x).map(|(t, v)| t * v).sum::<f64>();
        match (self.link, self.levels) {
            (Family::Binomial, Some((low, high))) => low + (high - low) * expit(eta),
            _ => eta,
        }
    }
}

/// Conditional law of the omitted covariates given the external model's covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceBgivenX {
    /// Conditioning covariates X_k.
    pub covariates: Vec<String>,
    pub omitted: Vec<OmittedFit>,
    /// Residual covariance from internal residual cross-products. The
    /// diagonal entries of binary covariates are replaced by the model
    /// variance at the evaluation point.
    pub residual_cov: DMatrix<f64>,
}

impl NuisanceBgivenX {
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.omitted.iter().map(|f| f.mean(x)).collect()
    }

    pub fn covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let mut cov = self.residual_cov.clone();
        for (j, f) in self.omitted.iter().enumerate() {
            if let (Family::Binomial, Some((low, high))) = (f.link, f.levels) {
                let p = (f.mean(x) - low) / (high - low);
                cov[(j, j)] = (high - low).powi(2) * p * (1.0 - p);
            }
        }
        cov
    }

    /// E(B | x + 1_p) − E(B | x) for conditioning covariate `p`.
    pub fn mean_shift(&self, x: &[f64], p: usize) -> Vec<f64> {
        let mut moved = x.to_vec();
        moved[p] += 1.0;
        self.mean(&moved)
            .into_iter()
            .zip(self.mean(x))
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Regress each `omitted` column of the (complete) internal data on `covariates`.
pub fn fit_nuisance(
    internal: &Dataset,
    covariates: &[String],
    omitted: &[String],
) -> Result<NuisanceBgivenX, CalibrateError> {
    let terms: Vec<Term> = std::iter::once(Term::Intercept)
        .chain(covariates.iter().cloned().map(Term::Main))
        .collect();
    let design = build_design_terms(internal, &terms)?;
    let n = internal.n_rows();
    let p = terms.len();
    let mut fits = Vec::with_capacity(omitted.len());
    let mut residuals = Vec::with_capacity(omitted.len());
    for name in omitted {
        let j = internal.require_column(name)?;
        let values = response(internal, name)?;
        let first = values.first().copied().unwrap_or(0.0);
        if values.iter().all(|&v| v == first) {
            return Err(CalibrateError::Degenerate { column: name.clone() });
        }
        let fit = match internal.columns()[j].kind {
            ColumnKind::Binary { low, high } => {
                let y01: Vec<f64> = values.iter().map(|&v| (v - low) / (high - low)).collect();
                let f = irls(&design.matrix, &y01, Family::Binomial, None, IrlsOptions::default())?;
                if !f.converged {
                    return Err(CalibrateError::Nonconvergence(format!("logistic model for {name:?}")));
                }
                OmittedFit {
                    name: name.clone(),
                    link: Family::Binomial,
                    theta: f.coefficients.iter().copied().collect(),
                    levels: Some((low, high)),
                }
            }
            ColumnKind::Continuous => {
                let f = irls(&design.matrix, &values, Family::Gaussian, None, IrlsOptions::default())?;
                OmittedFit {
                    name: name.clone(),
                    link: Family::Gaussian,
                    theta: f.coefficients.iter().copied().collect(),
                    levels: None,
                }
            }
        };
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let x: Vec<f64> = (1..p).map(|c| design.matrix[(i, c)]).collect();
                values[i] - fit.mean(&x)
            })
            .collect();
        fits.push(fit);
        residuals.push(r);
    }
    let q = fits.len();
    let df = n.saturating_sub(p).max(1) as f64;
    let cov = DMatrix::from_fn(q, q, |a, b| {
        residuals[a].iter().zip(&residuals[b]).map(|(u, v)| u * v).sum::<f64>() / df
    });
    Ok(NuisanceBgivenX {
        covariates: covariates.to_vec(),
        omitted: fits,
        residual_cov: cov,
    })
}

/// How a population's coefficients were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateSource {
    Internal,
    CorrectedCat1,
    CorrectedCat2,
}

/// Full coefficient vector of one population's outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParameters {
    pub intercept: f64,
    /// One slope per covariate, X then B in target order.
    pub slopes: IndexMap<String, f64>,
    /// Residual SD used by gaussian weights; 1 for binomial.
    pub sigma: f64,
    pub source: EstimateSource,
    pub bisection_iterations: usize,
}

impl PopulationParameters {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.slopes.values().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimates {
    pub family: Family,
    pub entries: BTreeMap<PopulationId, PopulationParameters>,
}

impl PopulationEstimates {
    pub fn get(&self, k: PopulationId) -> Result<&PopulationParameters, CalibrateError> {
        self.entries.get(&k).ok_or(CalibrateError::MissingPopulation(k))
    }
}

/// Main-effects model on the (centered, complete) internal data.
pub fn fit_internal(
    internal: &Dataset,
    target: &TargetModelSpec,
) -> Result<(GlmFit, PopulationParameters), CalibrateError> {
    let design = build_design_terms(internal, &internal_terms(target))?;
    let y = response(internal, &target.outcome)?;
    let fit = fit_glm(&design, &y, target.family, None)?;
    if !fit.converged {
        return Err(CalibrateError::Nonconvergence("internal model".into()));
    }
    let slopes = target
        .covariates()
        .enumerate()
        .map(|(i, c)| (c.clone(), fit.coefficients[i + 1]))
        .collect();
    let params = PopulationParameters {
        intercept: fit.coefficients[0],
        slopes,
        sigma: fit.dispersion.sqrt(),
        source: EstimateSource::Internal,
        bisection_iterations: 0,
    };
    Ok((fit, params))
}

/// Shift a raw-scale summary so it applies to centered covariates.
pub fn center_summary(summary: &CoefficientSummary, record: &CenteringRecord) -> CoefficientSummary {
    let mut out = summary.clone();
    out.intercept += summary.slopes.iter().map(|(c, b)| b * record.mean(c)).sum::<f64>();
    out
}

/// Internal slopes of the omitted covariates, in nuisance order.
fn omitted_slopes(internal: &PopulationParameters, nuisance: &NuisanceBgivenX) -> Result<DVector<f64>, CalibrateError> {
    nuisance
        .omitted
        .iter()
        .map(|f| {
            internal
                .slopes
                .get(&f.name)
                .copied()
                .ok_or_else(|| CalibrateError::Dimension(format!("internal fit has no slope for {:?}", f.name)))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(DVector::from_vec)
}

fn external_slope(beta: &CoefficientSummary, name: &str) -> Result<f64, CalibrateError> {
    beta.slopes
        .get(name)
        .copied()
        .ok_or_else(|| CalibrateError::Dimension(format!("external model has no slope for {name:?}")))
}

fn conditioning_index(nuisance: &NuisanceBgivenX, name: &str) -> Result<usize, CalibrateError> {
    nuisance
        .covariates
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| CalibrateError::Dimension(format!("{name:?} is not an external covariate")))
}

/// Identity-link correction: match intercept and X_k slopes of the reduced model.
///
/// `heterogeneous` lists the X_k slopes that get their own value; the rest,
/// like the omitted-covariate slopes, are copied from `internal`.
pub fn correct_linear(
    beta: &CoefficientSummary,
    internal: &PopulationParameters,
    nuisance: &NuisanceBgivenX,
    heterogeneous: &[String],
    has_intercept: bool,
) -> Result<PopulationParameters, CalibrateError> {
    let g = omitted_slopes(internal, nuisance)?;
    let x0 = vec![0.0; nuisance.covariates.len()];
    let mut out = internal.clone();
    out.source = EstimateSource::CorrectedCat1;
    if has_intercept {
        let e0 = DVector::from_vec(nuisance.mean(&x0));
        out.intercept = beta.intercept - e0.dot(&g);
    }
    for p in heterogeneous {
        let idx = conditioning_index(nuisance, p)?;
        let shift = DVector::from_vec(nuisance.mean_shift(&x0, idx));
        out.slopes[p.as_str()] = external_slope(beta, p)? - shift.dot(&g);
    }
    Ok(out)
}

/// Second-order expansion of E[expit(w + Z)] for Z with mean 0 and variance `v`.
pub fn taylor_mean(w: f64, v: f64) -> f64 {
    let s = expit(w);
    s * (1.0 + 0.5 * (1.0 - s) * (1.0 - 2.0 * s) * v)
}

/// Second-order expansion of E[expit(w + Z)²].
pub fn taylor_second_moment(w: f64, v: f64) -> f64 {
    let s = expit(w);
    s * s * (1.0 + (1.0 - s) * (2.0 - 3.0 * s) * v)
}

/// Solve `f(x) = target` on `bracket` for increasing-at-the-root `f`.
///
/// Returns the root and the number of halvings. The loop runs past
/// [`BISECTION_TOLERANCE`] down to floating-point resolution.
fn bisect(f: impl Fn(f64) -> f64, target: f64, bracket: (f64, f64)) -> Option<(f64, usize)> {
    let (mut lo, mut hi) = bracket;
    let (flo, fhi) = (f(lo) - target, f(hi) - target);
    if flo == 0.0 {
        return Some((lo, 0));
    }
    if fhi == 0.0 {
        return Some((hi, 0));
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    let lo_negative = flo < 0.0;
    let mut iterations = 0;
    while iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let fm = f(mid) - target;
        if fm == 0.0 {
            return Some((mid, iterations));
        }
        if (fm < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug_assert!(hi - lo <= BISECTION_TOLERANCE);
    Some((0.5 * (lo + hi), iterations))
}

/// Logit-link correction through a second-order expansion over the omitted covariates.
pub fn correct_logistic(
    population: PopulationId,
    beta: &CoefficientSummary,
    internal: &PopulationParameters,
    nuisance: &NuisanceBgivenX,
    heterogeneous: &[String],
    has_intercept: bool,
) -> Result<PopulationParameters, CalibrateError> {
    let g = omitted_slopes(internal, nuisance)?;
    let x0 = vec![0.0; nuisance.covariates.len()];
    let offset = DVector::from_vec(nuisance.mean(&x0)).dot(&g);
    let var_z = (nuisance.covariance(&x0) * &g).dot(&g).max(0.0);
    let mut out = internal.clone();
    out.source = EstimateSource::CorrectedCat1;
    if has_intercept {
        let target = expit(beta.intercept);
        let (root, iterations) = bisect(|gamma0| taylor_mean(gamma0 + offset, var_z), target, BISECTION_BRACKET)
            .ok_or(CalibrateError::Bracket {
                population,
                low: BISECTION_BRACKET.0,
                high: BISECTION_BRACKET.1,
            })?;
        out.intercept = root;
        out.bisection_iterations = iterations;
    }
    if heterogeneous.is_empty() {
        return Ok(out);
    }
    let w = out.intercept + offset;
    let mean = taylor_mean(w, var_z);
    let var_mu = taylor_second_moment(w, var_z) - mean * mean;
    let denom = mean * (1.0 - mean);
    if denom < 1e-12 {
        return Err(CalibrateError::DegeneratePrevalence { population, value: mean });
    }
    let factor = 1.0 - var_mu / denom;
    if factor <= 0.0 {
        return Err(CalibrateError::Attenuation { population, factor });
    }
    for p in heterogeneous {
        let idx = conditioning_index(nuisance, p)?;
        let shift = DVector::from_vec(nuisance.mean_shift(&x0, idx));
        out.slopes[p.as_str()] = external_slope(beta, p)? / factor - shift.dot(&g);
    }
    Ok(out)
}

/// Main-effects logistic fit to a large synthetic block labelled by a black-box predictor.
///
/// `internal` must be on the predictor's (raw) scale. The result is on the same scale.
pub fn approximate_beta_syn<R: Rng + ?Sized>(
    spec: &ExternalModelSpec,
    internal: &Dataset,
    multiplier: usize,
    rng: &mut R,
) -> Result<CoefficientSummary, CalibrateError> {
    if !matches!(spec.payload, Payload::Predictor(_)) {
        return Err(CalibrateError::Dimension(format!("{} is not a predictor model", spec.name)));
    }
    let mut big = spec.clone();
    big.r = Some(multiplier.max(1));
    let block = generate_synthetic_population(internal, &big, Family::Binomial, rng)?;
    let terms: Vec<Term> = std::iter::once(Term::Intercept)
        .chain(spec.covariates.iter().cloned().map(Term::Main))
        .collect();
    let design = build_design_terms(&block, &terms)?;
    let y = response(&block, &internal.columns()[internal.outcome_index().unwrap_or(0)].name)?;
    let fit = irls(&design.matrix, &y, Family::Binomial, None, IrlsOptions::default())?;
    if !fit.converged {
        return Err(CalibrateError::Nonconvergence(format!("synthetic fit for {}", spec.name)));
    }
    Ok(CoefficientSummary {
        family: Family::Binomial,
        intercept: fit.coefficients[0],
        slopes: spec
            .covariates
            .iter()
            .cloned()
            .zip(fit.coefficients.iter().skip(1).copied())
            .collect(),
        sigma: None,
    })
}

/// Starting coefficients for every population.
///
/// `centered` is the centered internal data, `raw` the same rows on the
/// original scale (needed to query predictors), `record` the centering.
/// Category 2 models draw from `rng_for(k)`.
pub fn estimate_populations<R: Rng>(
    centered: &Dataset,
    raw: &Dataset,
    record: &CenteringRecord,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    multiplier: usize,
    mut rng_for: impl FnMut(PopulationId) -> R,
) -> Result<(GlmFit, PopulationEstimates), CalibrateError> {
    let (fit, internal) = fit_internal(centered, target)?;
    let mut entries = BTreeMap::new();
    for spec in externals {
        let k = spec.population;
        let (summary, source) = match &spec.payload {
            Payload::Coefficients(s) => (s.clone(), EstimateSource::CorrectedCat1),
            Payload::Predictor(_) => {
                // Fail early on an incomplete internal X_k before calling the predictor.
                covariate_columns(raw, spec)?;
                let mut rng = rng_for(k);
                (approximate_beta_syn(spec, raw, multiplier, &mut rng)?, EstimateSource::CorrectedCat2)
            }
        };
        let has_intercept = target.has_intercept(k);
        let heterogeneous = target.specific_slopes(k);
        if !has_intercept && heterogeneous.is_empty() {
            entries.insert(k, internal.clone());
            continue;
        }
        let beta = center_summary(&summary, record);
        let omitted: Vec<String> = target
            .covariates()
            .filter(|c| !spec.covariates.contains(c))
            .cloned()
            .collect();
        let nuisance = fit_nuisance(centered, &spec.covariates, &omitted)?;
        let mut params = match target.family {
            Family::Gaussian => correct_linear(&beta, &internal, &nuisance, heterogeneous, has_intercept)?,
            Family::Binomial => correct_logistic(k, &beta, &internal, &nuisance, heterogeneous, has_intercept)?,
        };
        params.source = source;
        entries.insert(k, params);
    }
    entries.insert(INTERNAL, internal);
    Ok((
        fit,
        PopulationEstimates {
            family: target.family,
            entries,
        },
    ))
}

/// Fill `stacked.weights` with each row's outcome density under its
/// population's coefficients, normalized within subject.
///
/// Returns the number of subjects whose densities all vanished; those get
/// uniform weights 1/M.
pub fn compute_weights(
    stacked: &mut StackedDataset,
    estimates: &PopulationEstimates,
    target: &TargetModelSpec,
) -> Result<usize, CalibrateError> {
    let y_idx = stacked
        .column_index(&target.outcome)
        .ok_or_else(|| GlmError::MissingColumn(target.outcome.clone()))?;
    let cov_idx: Vec<usize> = target
        .covariates()
        .map(|c| stacked.column_index(c).ok_or_else(|| GlmError::MissingColumn(c.clone())))
        .collect::<Result<_, _>>()?;
    for params in estimates.entries.values() {
        if params.slopes.len() != cov_idx.len() {
            return Err(CalibrateError::Dimension(format!(
                "estimates have {} slopes, target has {} covariates",
                params.slopes.len(),
                cov_idx.len()
            )));
        }
    }
    let n_rows = stacked.n_rows();
    let mut log_density = vec![0.0; n_rows];
    let mut x = vec![0.0; cov_idx.len()];
    for (row, ld) in log_density.iter_mut().enumerate() {
        let params = estimates.get(stacked.populations()[row])?;
        for (v, &j) in x.iter_mut().zip(&cov_idx) {
            *v = stacked.values(j)[row];
        }
        let eta = params.linear_predictor(&x);
        *ld = estimates.family.log_density(stacked.values(y_idx)[row], eta, params.sigma);
    }
    let m = stacked.m();
    let mut degenerate = 0;
    let mut weights = vec![0.0; n_rows];
    for s in 0..stacked.n_subjects() {
        let rows: Vec<usize> = (1..=m).map(|c| stacked.row(c, s)).collect();
        let max = rows.iter().map(|&r| log_density[r]).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            degenerate += 1;
            for &r in &rows {
                weights[r] = 1.0 / m as f64;
            }
            continue;
        }
        let total: f64 = rows.iter().map(|&r| (log_density[r] - max).exp()).sum();
        for &r in &rows {
            weights[r] = (log_density[r] - max).exp() / total;
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} subjects had zero density in every imputation; their weights were set to 1/{m}");
    }
    stacked.weights = weights;
    Ok(degenerate)
}
