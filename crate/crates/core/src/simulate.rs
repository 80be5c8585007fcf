//! Simulation scenarios and the Monte Carlo replicate harness.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{DataError, Dataset, PopulationId, Role, Table};
use crate::estimate::{
    bootstrap_variance, fit_direct, run_comparison, run_syndi, ErrorKind, EstimateError, FitResult, Method,
    PipelineConfig,
};
use crate::exec::Parallelism;
use crate::glm::{build_design_terms, design_terms, fit_glm, response, GlmError, Term};
use crate::impute::ImputationMethod;
use crate::metrics::{report, MetricError, MetricReport};
use crate::model::{expit, CoefficientSummary, ExternalModelSpec, Family, HeterogeneitySelector, TargetModelSpec};
use crate::predictor::ClosurePredictor;
use crate::quadrature::NormalQuadrature;
use crate::rng::{derive_seed, label, stream};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("unknown scenario {0:?} (expected one of simI, simII, simS1, simS2, simS3, simS4a, simS4b)")]
    UnknownScenario(String),
    #[error("invalid harness configuration: {0}")]
    Config(String),
    #[error("external summary for population {population}: {message}")]
    External { population: PopulationId, message: String },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("write error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "simI")]
    SimI,
    #[serde(rename = "simII")]
    SimII,
    /// Gaussian outcome.
    #[serde(rename = "simS1")]
    SimS1,
    /// Smaller effects and intercept differences.
    #[serde(rename = "simS2")]
    SimS2,
    /// Population-specific X slopes.
    #[serde(rename = "simS3")]
    SimS3,
    /// B law differs in external population 2.
    #[serde(rename = "simS4a")]
    SimS4a,
    /// X1 law differs in the external populations.
    #[serde(rename = "simS4b")]
    SimS4b,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 7] = [
        ScenarioId::SimI,
        ScenarioId::SimII,
        ScenarioId::SimS1,
        ScenarioId::SimS2,
        ScenarioId::SimS3,
        ScenarioId::SimS4a,
        ScenarioId::SimS4b,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::SimI => "simI",
            ScenarioId::SimII => "simII",
            ScenarioId::SimS1 => "simS1",
            ScenarioId::SimS2 => "simS2",
            ScenarioId::SimS3 => "simS3",
            ScenarioId::SimS4a => "simS4a",
            ScenarioId::SimS4b => "simS4b",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = SimulateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SimulateError::UnknownScenario(s.to_string()))
    }
}

/// Pairwise correlation of the multivariate normal covariates.
pub const CORRELATION: f64 = 0.3;

/// Draws used to fit each external summary.
pub const EXTERNAL_SAMPLE: usize = 1_000_000;

/// Quadrature nodes for the black-box predictor of Simulation II.
const PREDICTOR_NODES: usize = 30;

/// Generative law of one population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationLaw {
    pub intercept: f64,
    /// Outcome slopes in covariate order.
    pub slopes: Vec<f64>,
    /// X1 = mean + sd · Z1.
    pub x1_location: (f64, f64),
    /// B1 = mean + sd · Z (four-covariate designs only).
    pub b1_location: (f64, f64),
    /// Logit coefficients of B2 on its predictors.
    pub b2_coefficients: Vec<f64>,
    /// Adds 0.5·X1² + 0.5·X1·X2 to the outcome's linear predictor.
    pub nonlinear: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub family: Family,
    pub shared: Vec<String>,
    pub internal_only: Vec<String>,
    /// Laws of populations 0, 1, 2.
    pub laws: Vec<PopulationLaw>,
    /// Covariates of each external model, for populations 1 and 2.
    pub external_covariates: Vec<Vec<String>>,
    /// Whether external population 2 is shared as a black-box predictor.
    pub predictor_population: Option<PopulationId>,
    pub heterogeneity: HeterogeneitySelector,
    /// Residual SD of gaussian outcomes.
    pub sigma: f64,
    /// True target coefficients; None where the target model is misspecified.
    pub truth: IndexMap<String, Option<f64>>,
    /// Prevalence of Y = 1 per population, where stated.
    pub prevalence: Option<[f64; 3]>,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn simi_law(intercept: f64, slope: f64) -> PopulationLaw {
    PopulationLaw {
        intercept,
        slopes: vec![slope; 4],
        x1_location: (0.0, 1.0),
        b1_location: (0.0, 1.0),
        b2_coefficients: vec![0.1, 0.2, 0.3],
        nonlinear: false,
    }
}

impl Scenario {
    pub fn new(id: ScenarioId) -> Self {
        let four = id != ScenarioId::SimII;
        let (shared, internal_only) = if four {
            (names(&["X1", "X2"]), names(&["B1", "B2"]))
        } else {
            (names(&["X1", "X2", "X3", "X4"]), names(&["B1", "B2"]))
        };
        let external_covariates = if four {
            vec![names(&["X1"]), names(&["X1", "X2"])]
        } else {
            vec![names(&["X1", "X2", "X3"]), names(&["X1", "X2", "X3", "X4"])]
        };
        let mut family = Family::Binomial;
        let mut heterogeneity = HeterogeneitySelector::Intercepts;
        let mut predictor_population = None;
        let mut prevalence = None;
        let laws = match id {
            ScenarioId::SimI | ScenarioId::SimS4a | ScenarioId::SimS4b => {
                let mut laws = vec![simi_law(-1.0, -1.0), simi_law(1.0, -1.0), simi_law(3.0, -1.0)];
                if id == ScenarioId::SimI {
                    prevalence = Some([0.30, 0.57, 0.81]);
                }
                if id == ScenarioId::SimS4a {
                    laws[2].b1_location = (1.5, 1.5);
                    laws[2].b2_coefficients = vec![0.2, 0.3, 0.4];
                }
                if id == ScenarioId::SimS4b {
                    laws[1].x1_location = (1.0, 1.5);
                    laws[2].x1_location = (1.0, 1.5);
                }
                laws
            }
            ScenarioId::SimS1 => {
                family = Family::Gaussian;
                vec![simi_law(-1.0, -1.0), simi_law(1.0, -1.0), simi_law(3.0, -1.0)]
            }
            ScenarioId::SimS2 => {
                vec![simi_law(-1.0, -0.5), simi_law(-0.5, -0.5), simi_law(0.0, -0.5)]
            }
            ScenarioId::SimS3 => {
                heterogeneity = HeterogeneitySelector::InterceptsAndSlopes;
                let mut laws = vec![simi_law(-1.0, -1.0), simi_law(1.0, -1.0), simi_law(3.0, -1.0)];
                laws[1].slopes[0] = 1.0;
                laws[2].slopes[0] = 3.0;
                laws[2].slopes[1] = 3.0;
                laws
            }
            ScenarioId::SimII => {
                predictor_population = Some(2);
                prevalence = Some([0.30, 0.65, 0.73]);
                let law = |intercept: f64, nonlinear: bool| PopulationLaw {
                    intercept,
                    slopes: vec![-1.0; 6],
                    x1_location: (0.0, 1.0),
                    b1_location: (0.0, 1.0),
                    b2_coefficients: vec![0.2, 0.2, 0.2, 0.1, 0.1],
                    nonlinear,
                };
                vec![law(-1.6, false), law(2.0, false), law(2.5, true)]
            }
        };
        let mut scenario = Scenario {
            id,
            family,
            shared,
            internal_only,
            laws,
            external_covariates,
            predictor_population,
            heterogeneity,
            sigma: 1.0,
            truth: IndexMap::new(),
            prevalence,
        };
        scenario.truth = scenario.true_coefficients();
        scenario
    }

    pub fn covariates(&self) -> impl Iterator<Item = &String> {
        self.shared.iter().chain(&self.internal_only)
    }

    pub fn target(&self) -> TargetModelSpec {
        let mut slopes = BTreeMap::new();
        if self.heterogeneity == HeterogeneitySelector::InterceptsAndSlopes {
            for (i, covs) in self.external_covariates.iter().enumerate() {
                slopes.insert(i + 1, covs.clone());
            }
        }
        TargetModelSpec {
            family: self.family,
            outcome: "Y".into(),
            shared: self.shared.clone(),
            internal_only: self.internal_only.clone(),
            populations: vec![1, 2],
            slopes,
        }
    }

    /// Target coefficients implied by the generative laws: internal values
    /// for shared effects, differences for population-specific terms.
    fn true_coefficients(&self) -> IndexMap<String, Option<f64>> {
        let base = &self.laws[0];
        let index = |c: &str| self.covariates().position(|x| x == c).expect("scenario covariate");
        design_terms(&self.target())
            .iter()
            .map(|t| {
                let v = match t {
                    Term::Intercept => Some(base.intercept),
                    Term::PopIntercept(k) => {
                        let law = &self.laws[*k];
                        (!law.nonlinear).then_some(law.intercept - base.intercept)
                    }
                    Term::Main(c) => Some(base.slopes[index(c)]),
                    Term::Interaction { column, population } => {
                        let law = &self.laws[*population];
                        (!law.nonlinear).then_some(law.slopes[index(column)] - base.slopes[index(column)])
                    }
                };
                (t.name(), v)
            })
            .collect()
    }

    fn law(&self, population: PopulationId) -> &PopulationLaw {
        &self.laws[population]
    }

    /// Linear predictor of the outcome given every covariate of a row.
    pub fn linear_predictor(&self, population: PopulationId, row: &[f64]) -> f64 {
        let law = self.law(population);
        let mut eta = law.intercept + law.slopes.iter().zip(row).map(|(b, x)| b * x).sum::<f64>();
        if law.nonlinear {
            eta += 0.5 * row[0] * row[0] + 0.5 * row[0] * row[1];
        }
        eta
    }

    /// E(Y | all covariates) for every row of `data`.
    pub fn true_mean(&self, population: PopulationId, data: &Dataset) -> Result<Vec<f64>, DataError> {
        let cols: Vec<&[f64]> = self
            .covariates()
            .map(|c| data.column_values(c))
            .collect::<Result<_, _>>()?;
        let mut row = vec![0.0; cols.len()];
        Ok((0..data.n_rows())
            .map(|i| {
                for (v, c) in row.iter_mut().zip(&cols) {
                    *v = c[i];
                }
                self.family.inverse_link(self.linear_predictor(population, &row))
            })
            .collect())
    }
}

fn correlated_normals<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol * z
}

fn equicorrelation_cholesky(dim: usize) -> DMatrix<f64> {
    let sigma = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { CORRELATION });
    sigma.cholesky().expect("equicorrelation matrix is positive definite").l()
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    f64::from(u8::from(rng.random::<f64>() < p))
}

/// `n` draws from population `population` of `scenario`.
pub fn gen_population<R: Rng + ?Sized>(
    scenario: &Scenario,
    population: PopulationId,
    n: usize,
    rng: &mut R,
) -> Dataset {
    let law = scenario.law(population);
    let p = scenario.covariates().count();
    let mut cols = vec![Vec::with_capacity(n); p + 1];
    let mut row = vec![0.0; p];
    if scenario.id == ScenarioId::SimII {
        let chol = equicorrelation_cholesky(3);
        for _ in 0..n {
            let x = correlated_normals(&chol, rng);
            let s = x.sum();
            let x4 = 0.2 * s + rng.sample::<f64, _>(StandardNormal);
            let b1 = 0.2 * s + 0.1 * x4 + rng.sample::<f64, _>(StandardNormal);
            let c = &law.b2_coefficients;
            let b2_eta = c[0] * x[0] + c[1] * x[1] + c[2] * x[2] + c[3] * x4 + c[4] * b1;
            let b2 = bernoulli(expit(b2_eta), rng);
            row.copy_from_slice(&[x[0], x[1], x[2], x4, b1, b2]);
            push_row(scenario, population, &row, &mut cols, rng);
        }
    } else {
        let chol = equicorrelation_cholesky(3);
        for _ in 0..n {
            let z = correlated_normals(&chol, rng);
            let x1 = law.x1_location.0 + law.x1_location.1 * z[0];
            let x2 = z[1];
            let b1 = law.b1_location.0 + law.b1_location.1 * z[2];
            let c = &law.b2_coefficients;
            let b2 = bernoulli(expit(c[0] * x1 + c[1] * x2 + c[2] * b1), rng);
            row.copy_from_slice(&[x1, x2, b1, b2]);
            push_row(scenario, population, &row, &mut cols, rng);
        }
    }
    let mut spec = vec![("Y".to_string(), Role::Outcome, cols.remove(0))];
    for (i, name) in scenario.covariates().enumerate() {
        let role = if i < scenario.shared.len() { Role::Shared } else { Role::InternalOnly };
        spec.push((name.clone(), role, std::mem::take(&mut cols[i])));
    }
    Dataset::from_columns(spec, vec![population; n]).expect("generated columns have equal length")
}

fn push_row<R: Rng + ?Sized>(
    scenario: &Scenario,
    population: PopulationId,
    row: &[f64],
    cols: &mut [Vec<f64>],
    rng: &mut R,
) {
    let eta = scenario.linear_predictor(population, row);
    let y = match scenario.family {
        Family::Binomial => bernoulli(expit(eta), rng),
        Family::Gaussian => eta + scenario.sigma * rng.sample::<f64, _>(StandardNormal),
    };
    cols[0].push(y);
    for (c, &v) in cols[1..].iter_mut().zip(row) {
        c.push(v);
    }
}

/// P(Y = 1 | X1..X4) in Simulation II's external population 2, integrating
/// over B1 | X (normal) and B2 | X, B1 (logistic).
pub fn simii_marginal_probability(scenario: &Scenario, quadrature: &NormalQuadrature, x: &[f64]) -> f64 {
    let law = scenario.law(2);
    let s = x[0] + x[1] + x[2];
    let c = &law.b2_coefficients;
    let b1_mean = 0.2 * s + 0.1 * x[3];
    quadrature.expect(b1_mean, 1.0, |b1| {
        let p_b2 = expit(c[0] * x[0] + c[1] * x[1] + c[2] * x[2] + c[3] * x[3] + c[4] * b1);
        let row = [x[0], x[1], x[2], x[3], b1, 0.0];
        let eta0 = scenario.linear_predictor(2, &row);
        let b2_slope = law.slopes[5];
        p_b2 * expit(eta0 + b2_slope) + (1.0 - p_b2) * expit(eta0)
    })
}

/// External model summaries: GLM fits of Y | X_k on `n` draws per external
/// population, or a black-box predictor where the scenario calls for one.
pub fn build_external_summaries(
    scenario: &Scenario,
    seed: u64,
    n: usize,
    r: Option<usize>,
) -> Result<Vec<ExternalModelSpec>, SimulateError> {
    let mut out = Vec::new();
    for (i, covariates) in scenario.external_covariates.iter().enumerate() {
        let k = i + 1;
        if scenario.predictor_population == Some(k) {
            let sc = scenario.clone();
            let quadrature = NormalQuadrature::new(PREDICTOR_NODES);
            let predictor = ClosurePredictor::new(format!("{} population {k} true probability", scenario.id), move |x| {
                simii_marginal_probability(&sc, &quadrature, x)
            });
            out.push(ExternalModelSpec::predictor(
                k,
                format!("ext{k}"),
                covariates.clone(),
                Arc::new(predictor),
                r,
            ));
            continue;
        }
        let mut rng = stream(seed, &[label::EXTERNAL, k as u64]);
        let data = gen_population(scenario, k, n, &mut rng);
        let terms: Vec<Term> = std::iter::once(Term::Intercept)
            .chain(covariates.iter().cloned().map(Term::Main))
            .collect();
        let design = build_design_terms(&data, &terms)?;
        let y = response(&data, "Y")?;
        let fit = fit_glm(&design, &y, scenario.family, None)?;
        if !fit.converged {
            return Err(SimulateError::External {
                population: k,
                message: "reduced-model fit did not converge".into(),
            });
        }
        let summary = CoefficientSummary {
            family: scenario.family,
            intercept: fit.coefficients[0],
            slopes: covariates
                .iter()
                .cloned()
                .zip(fit.coefficients.iter().skip(1).copied())
                .collect(),
            sigma: (scenario.family == Family::Gaussian).then(|| fit.dispersion.sqrt()),
        };
        out.push(ExternalModelSpec::coefficients(k, format!("ext{k}"), summary, r));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub seed: u64,
    #[serde(rename = "R")]
    pub replicates: usize,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub r: usize,
    pub cycles: usize,
    /// Bootstrap replicates for SynDI (0 disables the bootstrap).
    #[serde(rename = "B")]
    pub bootstrap: usize,
    /// Bootstrap only the first this-many outer replicates.
    pub bootstrap_replicates: Option<usize>,
    pub n_test: usize,
    pub n_external: usize,
    pub beta_syn_multiplier: usize,
    pub methods: Vec<Method>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            replicates: 100,
            n: 200,
            m: 20,
            r: 5,
            cycles: crate::impute::DEFAULT_CYCLES,
            bootstrap: 100,
            bootstrap_replicates: None,
            n_test: 2000,
            n_external: EXTERNAL_SAMPLE,
            beta_syn_multiplier: crate::calibrate::DEFAULT_BETA_SYN_MULTIPLIER,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl HarnessConfig {
    /// Replicate count and M used for the published results.
    pub fn full_scale(mut self) -> Self {
        self.replicates = 500;
        self.m = 100;
        self
    }

    fn validate(&self) -> Result<(), SimulateError> {
        if self.replicates < 2 {
            return Err(SimulateError::Config("at least 2 replicates are required".into()));
        }
        if self.n < 10 || self.m == 0 || self.r == 0 || self.cycles == 0 || self.n_test < 2 {
            return Err(SimulateError::Config("n >= 10, M, r, cycles >= 1 and n_test >= 2 required".into()));
        }
        if self.bootstrap == 1 {
            return Err(SimulateError::Config("B must be 0 or at least 2".into()));
        }
        if self.methods.is_empty() {
            return Err(SimulateError::Config("no methods selected".into()));
        }
        Ok(())
    }
}

/// One coefficient estimate from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub replicate: usize,
    pub method: Method,
    pub coefficient: String,
    pub estimate: f64,
    pub se: f64,
    /// Bootstrap SE, when this replicate was bootstrapped.
    pub bootstrap_se: Option<f64>,
}

/// Validation metrics of one method in one population of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub replicate: usize,
    pub method: Method,
    pub population: PopulationId,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStats {
    pub method: Method,
    pub coefficient: String,
    pub truth: Option<f64>,
    pub n: usize,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    pub abs_bias: Option<f64>,
    pub empirical_variance: Option<f64>,
    /// Mean of the reported variances (naive, Rubin or model-based).
    pub mean_reported_variance: Option<f64>,
    pub n_bootstrap: usize,
    pub mean_bootstrap_se: Option<f64>,
    /// Monte Carlo SE of the mean estimate.
    pub mc_se_mean: Option<f64>,
    /// Monte Carlo SE of the empirical variance (normal approximation).
    pub mc_se_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub method: Method,
    pub population: PopulationId,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub mc_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub scenario: ScenarioId,
    pub config: HarnessConfig,
    /// Replicates each method failed on numerically (dropped from the summary).
    pub failures: BTreeMap<String, usize>,
    pub coefficients: Vec<CoefficientStats>,
    pub metrics: Vec<MetricStats>,
    /// Set when external population 2 is a stand-in black-box predictor.
    pub substitutions: Vec<String>,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<Value>,
}

impl ReplicateSummary {
    pub fn coefficient(&self, method: Method, name: &str) -> Option<&CoefficientStats> {
        self.coefficients
            .iter()
            .find(|c| c.method == method && c.coefficient == name)
    }

    pub fn metric(&self, method: Method, population: PopulationId, metric: &str) -> Option<&MetricStats> {
        self.metrics
            .iter()
            .find(|m| m.method == method && m.population == population && m.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub summary: ReplicateSummary,
    pub estimates: Vec<EstimateRow>,
    pub metrics: Vec<MetricRow>,
}

impl SimulationOutput {
    /// Per-replicate estimates as CSV.
    pub fn write_estimates_csv<W: Write>(&self, writer: W) -> Result<(), SimulateError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "method", "coefficient", "estimate", "se", "bootstrap_se"])
            .map_err(DataError::from)?;
        for row in &self.estimates {
            w.write_record([
                row.replicate.to_string(),
                row.method.to_string(),
                row.coefficient.clone(),
                crate::data::format_number(row.estimate),
                crate::data::format_number(row.se),
                row.bootstrap_se.map(crate::data::format_number).unwrap_or_default(),
            ])
            .map_err(DataError::from)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

struct ReplicateOutcome {
    fits: Vec<(Method, Result<FitResult, EstimateError>)>,
    bootstrap_se: Option<Vec<f64>>,
    metrics: Vec<MetricRow>,
}

fn fit_method(
    method: Method,
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &PipelineConfig,
) -> Result<FitResult, EstimateError> {
    match method {
        Method::SynDi => run_syndi(internal, externals, target, config),
        Method::Direct => fit_direct(internal, target),
        Method::Fcs => run_comparison(internal, externals, target, ImputationMethod::Fcs, config),
        Method::Imb => run_comparison(internal, externals, target, ImputationMethod::Imb, config),
    }
}

fn run_one(
    scenario: &Scenario,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &HarnessConfig,
    replicate: usize,
) -> Result<ReplicateOutcome, SimulateError> {
    let path = [label::REPLICATE, replicate as u64];
    let mut rng = stream(config.seed, &path);
    let internal = gen_population(scenario, 0, config.n, &mut rng);
    let validation: Vec<(Dataset, Vec<f64>)> = (0..scenario.laws.len())
        .map(|k| {
            let mut vrng = stream(config.seed, &[label::VALIDATION, replicate as u64, k as u64]);
            let data = gen_population(scenario, k, config.n_test, &mut vrng);
            let truth = scenario.true_mean(k, &data)?;
            Ok((data, truth))
        })
        .collect::<Result<_, DataError>>()?;
    let pipeline = PipelineConfig {
        seed: derive_seed(config.seed, &path),
        m: config.m,
        cycles: config.cycles,
        beta_syn_multiplier: config.beta_syn_multiplier,
        parallelism: Parallelism::Serial,
    };
    let mut fits = Vec::new();
    let mut metrics = Vec::new();
    for &method in &config.methods {
        let fit = fit_method(method, &internal, externals, target, &pipeline);
        if let Ok(f) = &fit {
            for (k, (data, truth)) in validation.iter().enumerate() {
                let p_hat = f.predict(data, k)?;
                let y = response(data, "Y")?;
                metrics.push(MetricRow {
                    replicate,
                    method,
                    population: k,
                    report: report(&y, &p_hat, Some(truth))?,
                });
            }
        }
        fits.push((method, fit));
    }
    let wants_bootstrap = config.bootstrap >= 2
        && config.methods.contains(&Method::SynDi)
        && config.bootstrap_replicates.is_none_or(|limit| replicate < limit);
    let mut bootstrap_se = None;
    if wants_bootstrap {
        match bootstrap_variance(&internal, externals, target, &pipeline, config.bootstrap) {
            Ok(b) => bootstrap_se = Some(b.standard_errors),
            Err(e) if e.kind() == ErrorKind::Numerical => {
                log::warn!("replicate {replicate}: bootstrap failed: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ReplicateOutcome {
        fits,
        bootstrap_se,
        metrics,
    })
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (Some(mean), Some(var))
}

/// Run `config.replicates` independent replicates of `scenario` and summarize.
pub fn run_replicates(
    scenario: &Scenario,
    config: &HarnessConfig,
    parallelism: Parallelism,
) -> Result<SimulationOutput, SimulateError> {
    config.validate()?;
    let target = scenario.target();
    let externals = build_external_summaries(scenario, config.seed, config.n_external, Some(config.r))?;
    let outcomes: Vec<ReplicateOutcome> = parallelism
        .map(config.replicates, |i| run_one(scenario, &externals, &target, config, i))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let mut failures: BTreeMap<String, usize> = config.methods.iter().map(|m| (m.to_string(), 0)).collect();
    let mut estimates = Vec::new();
    let mut metric_rows = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        for (method, fit) in outcome.fits {
            match fit {
                Ok(f) => {
                    let se = f.standard_errors();
                    let boot = outcome.bootstrap_se.as_ref().filter(|_| method == Method::SynDi);
                    for (j, name) in f.names.iter().enumerate() {
                        estimates.push(EstimateRow {
                            replicate: i,
                            method,
                            coefficient: name.clone(),
                            estimate: f.coefficients[j],
                            se: se[j],
                            bootstrap_se: boot.map(|b| b[j]),
                        });
                    }
                }
                Err(e) if e.kind() == ErrorKind::Numerical => {
                    log::warn!("replicate {i}, {method}: {e}");
                    *failures.entry(method.to_string()).or_default() += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        metric_rows.extend(outcome.metrics);
    }

    let mut coefficients = Vec::new();
    for &method in &config.methods {
        for (name, &truth) in &scenario.truth {
            let rows: Vec<&EstimateRow> = estimates
                .iter()
                .filter(|r| r.method == method && &r.coefficient == name)
                .collect();
            let values: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
            let reported: Vec<f64> = rows.iter().map(|r| r.se * r.se).collect();
            let boot: Vec<f64> = rows.iter().filter_map(|r| r.bootstrap_se).collect();
            let (mean, var) = mean_sd(&values);
            let n = values.len();
            let bias = mean.zip(truth).map(|(m, t)| m - t);
            coefficients.push(CoefficientStats {
                method,
                coefficient: name.clone(),
                truth,
                n,
                mean,
                bias,
                abs_bias: bias.map(f64::abs),
                empirical_variance: var,
                mean_reported_variance: mean_sd(&reported).0,
                n_bootstrap: boot.len(),
                mean_bootstrap_se: mean_sd(&boot).0,
                mc_se_mean: var.map(|v| (v / n as f64).sqrt()),
                mc_se_variance: var.map(|v| v * (2.0 / (n as f64 - 1.0)).sqrt()),
            });
        }
    }

    let mut metrics = Vec::new();
    for &method in &config.methods {
        for k in 0..scenario.laws.len() {
            let rows: Vec<&MetricReport> = metric_rows
                .iter()
                .filter(|r| r.method == method && r.population == k)
                .map(|r| &r.report)
                .collect();
            let pick: [(&str, fn(&MetricReport) -> Option<f64>); 4] = [
                ("auc", |r| r.auc),
                ("scaled_brier", |r| r.scaled_brier),
                ("sse", |r| r.sse),
                ("sse_sum", |r| r.sse_sum),
            ];
            for (metric, get) in pick {
                let values: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, var) = mean_sd(&values);
                metrics.push(MetricStats {
                    method,
                    population: k,
                    metric: metric.into(),
                    n: values.len(),
                    mean,
                    mc_se: var.map(|v| (v / values.len() as f64).sqrt()),
                });
            }
        }
    }

    let substitutions = scenario
        .predictor_population
        .map(|k| {
            vec![format!(
                "external population {k} is shared as a black-box predictor returning the true P(Y=1 | X)"
            )]
        })
        .unwrap_or_default();
    Ok(SimulationOutput {
        summary: ReplicateSummary {
            scenario: scenario.id,
            config: config.clone(),
            failures,
            coefficients,
            metrics,
            substitutions,
            version: env!("CARGO_PKG_VERSION").into(),
            run_config: None,
        },
        estimates,
        metrics: metric_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenario_constants() {
        // (scenario, population, intercept, slopes)
        let table: &[(ScenarioId, usize, f64, &[f64])] = &[
            (ScenarioId::SimI, 0, -1.0, &[-1.0; 4]),
            (ScenarioId::SimI, 1, 1.0, &[-1.0; 4]),
            (ScenarioId::SimI, 2, 3.0, &[-1.0; 4]),
            (ScenarioId::SimS1, 2, 3.0, &[-1.0; 4]),
            (ScenarioId::SimS2, 0, -1.0, &[-0.5; 4]),
            (ScenarioId::SimS2, 1, -0.5, &[-0.5; 4]),
            (ScenarioId::SimS2, 2, 0.0, &[-0.5; 4]),
            (ScenarioId::SimS3, 1, 1.0, &[1.0, -1.0, -1.0, -1.0]),
            (ScenarioId::SimS3, 2, 3.0, &[3.0, 3.0, -1.0, -1.0]),
            (ScenarioId::SimII, 0, -1.6, &[-1.0; 6]),
            (ScenarioId::SimII, 1, 2.0, &[-1.0; 6]),
            (ScenarioId::SimII, 2, 2.5, &[-1.0; 6]),
        ];
        for &(id, k, intercept, slopes) in table {
            let s = Scenario::new(id);
            assert_eq!(s.laws[k].intercept, intercept, "{id} {k}");
            assert_eq!(s.laws[k].slopes, slopes, "{id} {k}");
        }
        assert_eq!(Scenario::new(ScenarioId::SimI).laws[0].b2_coefficients, [0.1, 0.2, 0.3]);
        let s4a = Scenario::new(ScenarioId::SimS4a);
        assert_eq!(s4a.laws[2].b1_location, (1.5, 1.5));
        assert_eq!(s4a.laws[2].b2_coefficients, [0.2, 0.3, 0.4]);
        assert_eq!(s4a.laws[1].b1_location, (0.0, 1.0));
        let s4b = Scenario::new(ScenarioId::SimS4b);
        assert_eq!(s4b.laws[1].x1_location, (1.0, 1.5));
        assert_eq!(s4b.laws[0].x1_location, (0.0, 1.0));
        assert!(Scenario::new(ScenarioId::SimII).laws[2].nonlinear);
        assert_eq!(Scenario::new(ScenarioId::SimS1).family, Family::Gaussian);
        assert_eq!(CORRELATION, 0.3);
    }

    #[test]
    fn truth_vectors() {
        let s = Scenario::new(ScenarioId::SimI);
        let t: Vec<(&str, Option<f64>)> = s.truth.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        assert_eq!(
            t,
            [
                ("(Intercept)", Some(-1.0)),
                ("(Intercept):I1", Some(2.0)),
                ("(Intercept):I2", Some(4.0)),
                ("X1", Some(-1.0)),
                ("X2", Some(-1.0)),
                ("B1", Some(-1.0)),
                ("B2", Some(-1.0)),
            ]
        );
        let s3 = Scenario::new(ScenarioId::SimS3);
        assert_eq!(s3.truth["X1:I1"], Some(2.0));
        assert_eq!(s3.truth["X1:I2"], Some(4.0));
        assert_eq!(s3.truth["X2:I2"], Some(4.0));
        assert!(!s3.truth.contains_key("X2:I1"));
        let s2 = Scenario::new(ScenarioId::SimII);
        assert_eq!(s2.truth["(Intercept):I1"], Some(3.6));
        assert_eq!(s2.truth["(Intercept):I2"], None);
    }

    #[test]
    fn scenario_ids_parse() {
        for id in ScenarioId::ALL {
            assert_eq!(id.as_str().parse::<ScenarioId>().unwrap(), id);
        }
        assert!("sim9".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn generated_covariates_have_stated_moments() {
        let s = Scenario::new(ScenarioId::SimI);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = gen_population(&s, 0, 100_000, &mut rng);
        let x1 = d.column_values("X1").unwrap();
        let b1 = d.column_values("B1").unwrap();
        let n = x1.len() as f64;
        let corr = x1.iter().zip(b1).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((corr - 0.3).abs() < 0.01, "{corr}");
        assert!((x1.iter().map(|v| v * v).sum::<f64>() / n - 1.0).abs() < 0.02);
        assert!(d.columns()[4].kind.is_binary());
    }

    #[test]
    fn stated_prevalences() {
        for id in [ScenarioId::SimI, ScenarioId::SimII] {
            let s = Scenario::new(id);
            for (k, target) in s.prevalence.unwrap().into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64);
                let d = gen_population(&s, k, 1_000_000, &mut rng);
                let y = d.column_values("Y").unwrap();
                let p = y.iter().sum::<f64>() / y.len() as f64;
                assert!((p - target).abs() < 0.01, "{id} population {k}: {p} vs {target}");
            }
        }
    }

    #[test]
    fn predictor_matches_monte_carlo() {
        let s = Scenario::new(ScenarioId::SimII);
        let q = NormalQuadrature::new(PREDICTOR_NODES);
        let x = [0.3, -0.5, 1.1, 0.2];
        let p = simii_marginal_probability(&s, &q, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 400_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let b1 = 0.2 * (x[0] + x[1] + x[2]) + 0.1 * x[3] + rng.sample::<f64, _>(StandardNormal);
            let pb2 = expit(0.2 * (x[0] + x[1] + x[2]) + 0.1 * (x[3] + b1));
            let b2 = bernoulli(pb2, &mut rng);
            acc += expit(s.linear_predictor(2, &[x[0], x[1], x[2], x[3], b1, b2]));
        }
        assert!((p - acc / draws as f64).abs() < 0.003, "{p} vs {}", acc / draws as f64);
    }

    #[test]
    fn external_summaries_absorb_correlated_effects() {
        let s = Scenario::new(ScenarioId::SimI);
        let ext = build_external_summaries(&s, 3, 200_000, Some(5)).unwrap();
        assert_eq!(ext.len(), 2);
        let crate::model::Payload::Coefficients(c) = &ext[0].payload else {
            panic!("expected coefficients")
        };
        assert!(c.slopes["X1"] < -1.0, "{}", c.slopes["X1"]);
        let s2 = Scenario::new(ScenarioId::SimII);
        let ext = build_external_summaries(&s2, 3, 20_000, Some(5)).unwrap();
        assert!(ext[1].is_predictor());
        let cols: Vec<Vec<f64>> = (0..4).map(|j| (0..100).map(|i| ((i * (j + 3)) % 17) as f64 / 8.0 - 1.0).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let crate::model::Payload::Predictor(p) = &ext[1].payload else {
            panic!("expected predictor")
        };
        let probs = p.predict(&ext[1].covariates, &refs).unwrap();
        assert_eq!(probs.len(), 100);
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn small_harness_run_is_deterministic() {
        let s = Scenario::new(ScenarioId::SimI);
        let config = HarnessConfig {
            replicates: 3,
            n: 100,
            m: 3,
            r: 2,
            cycles: 2,
            n_test: 200,
            n_external: 20_000,
            bootstrap: 3,
            bootstrap_replicates: Some(1),
            ..Default::default()
        };
        let a = run_replicates(&s, &config, Parallelism::Serial).unwrap();
        let b = run_replicates(&s, &config, Parallelism::Rayon).unwrap();
        assert_eq!(a.summary_json(), b.summary_json());
        assert_eq!(a.summary.coefficients.len(), 7 * 4);
        let direct = a.summary.coefficient(Method::Direct, "(Intercept):I1").unwrap();
        assert_eq!(direct.n, 0);
        let syndi = a.summary.coefficient(Method::SynDi, "X1").unwrap();
        assert_eq!((syndi.n, syndi.n_bootstrap), (3, 1));
        let mut csv = Vec::new();
        a.write_estimates_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("replicate,method,coefficient"));
    }
}
