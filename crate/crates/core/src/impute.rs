//! Multiple imputation of block-wise missing covariates by chained equations,
//! stacked into one long dataset.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{format_number, Column, ColumnKind, DataError, Dataset, PopulationId, Table};
use crate::exec::Parallelism;
use crate::glm::{irls, ridge_logistic, IrlsOptions};
use crate::model::{expit, Family};
use crate::rng::{label, stream, StreamRng};

/// Ridge penalty of the fallback logistic imputation model.
pub const RIDGE_PENALTY: f64 = 1e-4;
pub const DEFAULT_M: usize = 100;
pub const DEFAULT_CYCLES: usize = 10;

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("column {0:?} has no observed values anywhere")]
    AllMissing(String),
    #[error("outcome column {0:?} has missing values")]
    IncompleteOutcome(String),
    #[error("invalid imputation strategy: {0}")]
    Strategy(String),
    #[error("imputation model for {column:?} could not be fitted: {message}")]
    Numerical { column: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImputationMethod {
    /// Chained equations over covariates only; the outcome is never used.
    #[serde(rename = "syndi")]
    SynDiNoY,
    /// Fully conditional specification: all other covariates plus the outcome.
    #[serde(rename = "fcs")]
    Fcs,
    /// Imputation by ordered monotone blocks: one ordered pass conditioning on
    /// complete covariates, earlier imputed covariates and the outcome.
    #[serde(rename = "imb")]
    Imb,
}

impl ImputationMethod {
    pub fn uses_outcome(self) -> bool {
        !matches!(self, ImputationMethod::SynDiNoY)
    }

    fn stream_id(self) -> u64 {
        match self {
            ImputationMethod::SynDiNoY => 1,
            ImputationMethod::Fcs => 2,
            ImputationMethod::Imb => 3,
        }
    }
}

impl fmt::Display for ImputationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImputationMethod::SynDiNoY => "syndi",
            ImputationMethod::Fcs => "fcs",
            ImputationMethod::Imb => "imb",
        })
    }
}

impl FromStr for ImputationMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "syndi" => Ok(Self::SynDiNoY),
            "fcs" => Ok(Self::Fcs),
            "imb" => Ok(Self::Imb),
            other => Err(format!("unknown strategy {other:?} (expected syndi, fcs or imb)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationStrategy {
    pub method: ImputationMethod,
    /// Number of completed copies M.
    pub m: usize,
    /// Chained-equation sweeps (ignored by IMB, which makes one pass).
    pub cycles: usize,
}

impl ImputationStrategy {
    pub fn new(method: ImputationMethod, m: usize, cycles: usize) -> Self {
        Self { method, m, cycles }
    }

    pub fn validate(&self) -> Result<(), ImputeError> {
        if self.m == 0 {
            return Err(ImputeError::Strategy("M must be at least 1".into()));
        }
        if self.cycles == 0 {
            return Err(ImputeError::Strategy("cycles must be at least 1".into()));
        }
        Ok(())
    }
}

/// Covariate columns with missing values, by ascending missing count, ties in schema order.
pub fn monotone_order(data: &Dataset) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = (0..data.n_cols())
        .filter(|&j| data.columns()[j].role.is_covariate())
        .map(|j| (data.missing_count(j), j))
        .filter(|&(c, _)| c > 0)
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, j)| j).collect()
}

/// One univariate imputation model: `target` regressed on `predictors`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationStep {
    pub target: String,
    pub predictors: Vec<String>,
}

/// The sequence of imputation models one completed copy runs through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationPlan {
    pub method: ImputationMethod,
    pub steps: Vec<ImputationStep>,
    /// Passes over `steps`.
    pub sweeps: usize,
}

impl ImputationPlan {
    pub fn build(data: &Dataset, strategy: &ImputationStrategy) -> Result<Self, ImputeError> {
        Ok(Self::build_indexed(data, strategy)?.0)
    }

    fn build_indexed(
        data: &Dataset,
        strategy: &ImputationStrategy,
    ) -> Result<(Self, Vec<(usize, Vec<usize>)>), ImputeError> {
        strategy.validate()?;
        let cols = data.columns();
        let outcome = data.outcome_index();
        if let Some(y) = outcome {
            if data.missing_count(y) > 0 {
                return Err(ImputeError::IncompleteOutcome(cols[y].name.clone()));
            }
        }
        let order = monotone_order(data);
        for &j in &order {
            if data.missing_count(j) == data.n_rows() {
                return Err(ImputeError::AllMissing(cols[j].name.clone()));
            }
        }
        let covariates: Vec<usize> = (0..cols.len()).filter(|&j| cols[j].role.is_covariate()).collect();
        let mut indexed = Vec::with_capacity(order.len());
        for (pos, &target) in order.iter().enumerate() {
            let mut preds: Vec<usize> = match strategy.method {
                ImputationMethod::SynDiNoY | ImputationMethod::Fcs => {
                    covariates.iter().copied().filter(|&j| j != target).collect()
                }
                ImputationMethod::Imb => covariates
                    .iter()
                    .copied()
                    .filter(|&j| data.missing_count(j) == 0 || order[..pos].contains(&j))
                    .collect(),
            };
            if strategy.method.uses_outcome() {
                if let Some(y) = outcome {
                    preds.push(y);
                }
            }
            indexed.push((target, preds));
        }
        let plan = Self {
            method: strategy.method,
            steps: indexed
                .iter()
                .map(|(t, p)| ImputationStep {
                    target: cols[*t].name.clone(),
                    predictors: p.iter().map(|&j| cols[j].name.clone()).collect(),
                })
                .collect(),
            sweeps: match strategy.method {
                ImputationMethod::Imb => 1,
                _ => strategy.cycles,
            },
        };
        Ok((plan, indexed))
    }
}

/// M completed copies of a dataset stacked in (imputation, subject) order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDataset {
    columns: Vec<Column>,
    values: Vec<Vec<f64>>,
    population: Vec<PopulationId>,
    n_subjects: usize,
    m: usize,
    /// Per-row analysis weights; each subject's M weights sum to 1.
    pub weights: Vec<f64>,
    pub plan: ImputationPlan,
    /// Number of logistic imputation fits that fell back to the ridge fit.
    pub ridge_fallbacks: usize,
}

impl Table for StackedDataset {
    fn columns(&self) -> &[Column] {
        &self.columns
    }
    fn n_rows(&self) -> usize {
        self.population.len()
    }
    fn values(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }
    fn missing(&self, _idx: usize) -> Option<&[bool]> {
        None
    }
    fn populations(&self) -> &[PopulationId] {
        &self.population
    }
}

impl StackedDataset {
    /// Stack already completed copies of the same subjects.
    pub fn from_copies(copies: &[Dataset], plan: ImputationPlan) -> Result<Self, ImputeError> {
        let first = copies
            .first()
            .ok_or_else(|| ImputeError::Strategy("at least one copy is required".into()))?;
        let n = first.n_rows();
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(n * copies.len()); first.n_cols()];
        for copy in copies {
            if copy.columns() != first.columns() || copy.populations() != first.populations() {
                return Err(ImputeError::Strategy("copies differ in columns or populations".into()));
            }
            if copy.has_missing() {
                return Err(ImputeError::Strategy("copies must be complete".into()));
            }
            for (j, dst) in values.iter_mut().enumerate() {
                dst.extend_from_slice(copy.values(j));
            }
        }
        let m = copies.len();
        Ok(StackedDataset {
            columns: first.columns().to_vec(),
            values,
            population: first.populations().repeat(m),
            n_subjects: n,
            m,
            weights: vec![1.0 / m as f64; n * m],
            plan,
            ridge_fallbacks: 0,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    /// Subject id (0-based row of the combined data) of stacked row `row`.
    pub fn subject(&self, row: usize) -> usize {
        row % self.n_subjects
    }

    /// Imputation index (1-based) of stacked row `row`.
    pub fn imputation(&self, row: usize) -> usize {
        row / self.n_subjects + 1
    }

    /// Row of subject `s` in copy `m` (1-based).
    pub fn row(&self, m: usize, s: usize) -> usize {
        (m - 1) * self.n_subjects + s
    }

    /// Completed copy `m` (1-based) as a fully observed dataset.
    pub fn copy(&self, m: usize) -> Dataset {
        let range = (m - 1) * self.n_subjects..m * self.n_subjects;
        Dataset::new(
            self.columns.clone(),
            self.values.iter().map(|c| c[range.clone()].to_vec()).collect(),
            vec![vec![false; self.n_subjects]; self.columns.len()],
            self.population[range].to_vec(),
        )
        .expect("copy of a valid stack")
    }

    /// CSV dump with columns subject_id, pop, m, weight, then data columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "pop".into(), "m".into(), "weight".into()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                self.subject(i).to_string(),
                self.population[i].to_string(),
                self.imputation(i).to_string(),
                format_number(self.weights[i]),
            ];
            rec.extend(self.values.iter().map(|c| format_number(c[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

struct CopyResult {
    columns: Vec<Vec<f64>>,
    fallbacks: usize,
}

/// Impute the missing covariates of `data` M times and stack the copies.
///
/// Copy `m` draws from its own stream derived from `(seed, m)`, so the
/// result does not depend on `parallelism`.
pub fn impute_stack(
    data: &Dataset,
    strategy: &ImputationStrategy,
    seed: u64,
    parallelism: Parallelism,
) -> Result<StackedDataset, ImputeError> {
    let (plan, steps) = ImputationPlan::build_indexed(data, strategy)?;
    let n = data.n_rows();
    let m = strategy.m;
    let rows: Vec<(Vec<usize>, Vec<usize>)> = steps
        .iter()
        .map(|(t, _)| (0..n).partition(|&i| !data.is_missing(i, *t)))
        .collect();
    let copies: Vec<CopyResult> = parallelism
        .map(m, |c| {
            let mut rng = stream(seed, &[label::IMPUTE, strategy.method.stream_id(), c as u64 + 1]);
            impute_copy(data, &steps, &rows, plan.sweeps, &mut rng)
        })
        .into_iter()
        .collect::<Result<_, _>>()?;

    let mut values: Vec<Vec<f64>> = (0..data.n_cols()).map(|_| Vec::with_capacity(n * m)).collect();
    let mut ridge_fallbacks = 0;
    for copy in &copies {
        for (dst, src) in values.iter_mut().zip(&copy.columns) {
            dst.extend_from_slice(src);
        }
        ridge_fallbacks += copy.fallbacks;
    }
    if ridge_fallbacks > 0 {
        log::debug!("{ridge_fallbacks} logistic imputation fits used the ridge fallback");
    }
    Ok(StackedDataset {
        columns: data.columns().to_vec(),
        values,
        population: data.populations().repeat(m),
        n_subjects: n,
        m,
        weights: vec![1.0 / m as f64; n * m],
        plan,
        ridge_fallbacks,
    })
}

fn impute_copy(
    data: &Dataset,
    steps: &[(usize, Vec<usize>)],
    rows: &[(Vec<usize>, Vec<usize>)],
    sweeps: usize,
    rng: &mut StreamRng,
) -> Result<CopyResult, ImputeError> {
    let mut cols: Vec<Vec<f64>> = (0..data.n_cols()).map(|j| data.values(j).to_vec()).collect();
    // Start every missing cell from a random observed value of its column.
    for ((target, _), (obs, mis)) in steps.iter().zip(rows) {
        for &i in mis {
            let donor = obs[rng.random_range(0..obs.len())];
            cols[*target][i] = data.values(*target)[donor];
        }
    }
    let mut fallbacks = 0;
    for _ in 0..sweeps {
        for ((target, preds), (obs, mis)) in steps.iter().zip(rows) {
            let column = &data.columns()[*target];
            let x_obs = predictor_matrix(&cols, preds, obs);
            let x_mis = predictor_matrix(&cols, preds, mis);
            let y_obs: Vec<f64> = obs.iter().map(|&i| cols[*target][i]).collect();
            let draws = match column.kind {
                ColumnKind::Continuous => draw_normal(&x_obs, &y_obs, &x_mis, rng),
                ColumnKind::Binary { low, high } => {
                    let y01: Vec<f64> = y_obs.iter().map(|&v| f64::from(u8::from(v == high))).collect();
                    draw_logistic(&x_obs, &y01, &x_mis, rng, &mut fallbacks).map(|d| {
                        d.into_iter().map(|b| if b { high } else { low }).collect()
                    })
                }
            }
            .map_err(|message| ImputeError::Numerical {
                column: column.name.clone(),
                message,
            })?;
            for (&i, v) in mis.iter().zip(draws) {
                cols[*target][i] = v;
            }
        }
    }
    Ok(CopyResult { columns: cols, fallbacks })
}

fn predictor_matrix(cols: &[Vec<f64>], preds: &[usize], rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), preds.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            cols[preds[j - 1]][rows[i]]
        }
    })
}

/// Draw from the posterior predictive of a normal linear model
/// (flat prior): σ*² = RSS/χ²_df, β* ~ N(β̂, σ*²(XᵀX)⁻¹), y* ~ N(xβ*, σ*²).
fn draw_normal(
    x: &DMatrix<f64>,
    y: &[f64],
    x_mis: &DMatrix<f64>,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, String> {
    let (n, p) = x.shape();
    let yv = DVector::from_column_slice(y);
    let mut xtx = x.tr_mul(x);
    let xty = x.tr_mul(&yv);
    let chol = match xtx.clone().cholesky() {
        Some(c) if n > p => c,
        _ => {
            // Collinear predictors (or too few rows): stabilize with a small ridge.
            for j in 0..p {
                xtx[(j, j)] += RIDGE_PENALTY * (1.0 + xtx[(j, j)]);
            }
            xtx.cholesky().ok_or("normal equations are not positive definite")?
        }
    };
    let beta = chol.solve(&xty);
    let resid = &yv - x * &beta;
    let df = n.saturating_sub(p).max(1) as f64;
    let rss = resid.norm_squared();
    let chi: f64 = ChiSquared::new(df).map_err(|e| e.to_string())?.sample(rng);
    let sigma = (rss / chi).sqrt();
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // (XᵀX)⁻¹ = L⁻ᵀL⁻¹, so L⁻ᵀz has the required covariance.
    let u = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or("singular Cholesky factor")?;
    let beta_star = beta + u * sigma;
    let mean = x_mis * beta_star;
    Ok(mean
        .iter()
        .map(|&mu| mu + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Logistic model, β* ~ N(β̂, V̂), then Bernoulli draws. Separation or a
/// singular fit falls back to a ridge-penalized fit.
fn draw_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    x_mis: &DMatrix<f64>,
    rng: &mut StreamRng,
    fallbacks: &mut usize,
) -> Result<Vec<bool>, String> {
    let (beta, vcov) = match irls(x, y, Family::Binomial, None, IrlsOptions::default()) {
        Ok(fit) if fit.converged => (fit.coefficients, fit.vcov),
        _ => {
            *fallbacks += 1;
            ridge_logistic(x, y, None, RIDGE_PENALTY).map_err(|e| e.to_string())?
        }
    };
    let p = beta.len();
    let l = vcov
        .cholesky()
        .ok_or("coefficient covariance is not positive definite")?
        .l();
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta_star = beta + l * z;
    let eta = x_mis * beta_star;
    Ok(eta.iter().map(|&e| rng.random::<f64>() < expit(e)).collect())
}
