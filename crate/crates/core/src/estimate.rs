//! End-to-end pipeline, comparison methods and variance estimation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::calibrate::{
    compute_weights, estimate_populations, CalibrateError, PopulationParameters, DEFAULT_BETA_SYN_MULTIPLIER,
};
use crate::data::{center, CenteringRecord, DataError, Dataset, PopulationId, Table, INTERNAL};
use crate::exec::Parallelism;
use crate::glm::{
    build_design, build_design_terms, design_terms, fit_glm, internal_terms, response, GlmError, GlmFit, Term,
};
use crate::impute::{impute_stack, ImputationMethod, ImputationStrategy, ImputeError, DEFAULT_CYCLES, DEFAULT_M};
use crate::model::{validate_spec, ExternalModelSpec, Family, Payload, SpecError, TargetModelSpec};
use crate::rng::{derive_seed, label, stream};
use crate::synth::{combine, generate_blocks, SynthError};

/// Largest fraction of bootstrap replicates that may fail before the estimate is refused.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.10;

/// Default bootstrap replicate count.
pub const DEFAULT_BOOTSTRAP: usize = 500;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("step 1 (synthetic data): {0}")]
    Synthetic(#[source] SynthError),
    #[error("step 2 (imputation): {0}")]
    Imputation(#[source] ImputeError),
    #[error("step 3 (initial estimates): {0}")]
    Calibration(#[source] CalibrateError),
    #[error("step 4 (stacked fit): {0}")]
    Fit(#[source] GlmError),
    #[error("{0} did not converge")]
    Nonconvergence(String),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("bootstrap: {dropped} of {total} replicates failed (limit {limit:.0}%)")]
    BootstrapFailures { dropped: usize, total: usize, limit: f64 },
    #[error("fit result: {0}")]
    Format(String),
}

/// Coarse error class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Predictor,
}

impl EstimateError {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            EstimateError::Validation(_)
            | EstimateError::Spec(_)
            | EstimateError::Data(_)
            | EstimateError::Format(_) => Validation,
            EstimateError::Synthetic(e) => synth_kind(e),
            EstimateError::Calibration(CalibrateError::Synth(e)) => synth_kind(e),
            EstimateError::Calibration(CalibrateError::Data(_)) => Validation,
            EstimateError::Imputation(ImputeError::Strategy(_) | ImputeError::Data(_)) => Validation,
            EstimateError::Imputation(ImputeError::AllMissing(_) | ImputeError::IncompleteOutcome(_)) => Validation,
            _ => Numerical,
        }
    }
}

fn synth_kind(e: &SynthError) -> ErrorKind {
    match e {
        SynthError::Predictor { .. } => ErrorKind::Predictor,
        _ => ErrorKind::Validation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SynDI")]
    SynDi,
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "FCS")]
    Fcs,
    #[serde(rename = "IMB")]
    Imb,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SynDi, Method::Direct, Method::Fcs, Method::Imb];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SynDi => "SynDI",
            Method::Direct => "direct",
            Method::Fcs => "FCS",
            Method::Imb => "IMB",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Where the reported covariance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceTag {
    Bootstrap,
    Rubin,
    /// Stacked-fit covariance; ignores between-imputation variation.
    Naive,
    /// Model-based covariance of a single complete-data fit.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub m: usize,
    pub cycles: usize,
    pub beta_syn_multiplier: usize,
    pub parallelism: Parallelism,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            m: DEFAULT_M,
            cycles: DEFAULT_CYCLES,
            beta_syn_multiplier: DEFAULT_BETA_SYN_MULTIPLIER,
            parallelism: Parallelism::Serial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Replication factor per external population.
    pub r: BTreeMap<PopulationId, usize>,
    #[serde(rename = "M")]
    pub m: usize,
    pub cycles: usize,
    pub strategy: String,
    pub beta_syn_multiplier: usize,
    /// Gaussian external models that fell back to the default residual SD.
    pub sigma_defaults: Vec<String>,
    #[serde(rename = "B")]
    pub bootstrap: Option<usize>,
    pub bootstrap_dropped: Option<usize>,
    /// Whether each bootstrap replicate redraws synthetic data and imputations.
    pub bootstrap_rerandomized: bool,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Subjects whose weights fell back to 1/M.
    pub weight_degenerate_subjects: usize,
    pub ridge_fallbacks: usize,
    /// Starting coefficients per population on the centered scale.
    #[serde(default)]
    pub populations: BTreeMap<PopulationId, PopulationParameters>,
}

/// Fitted target model on the original covariate scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub family: Family,
    pub terms: Vec<Term>,
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub variance: VarianceTag,
    pub target: TargetModelSpec,
    pub provenance: Provenance,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize, Deserialize)]
struct CoefficientEntry {
    est: Option<f64>,
    se: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct FitResultJson {
    method: Method,
    family: Family,
    link: String,
    coefficients: IndexMap<String, CoefficientEntry>,
    vcov: Vec<Vec<Option<f64>>>,
    variance: VarianceTag,
    target: TargetModelSpec,
    provenance: Provenance,
    diagnostics: Diagnostics,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl FitResult {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.vcov.nrows()).map(|i| self.vcov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn standard_error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vcov[(i, i)].max(0.0).sqrt())
    }

    pub fn to_json(&self) -> Value {
        let se = self.standard_errors();
        let wire = FitResultJson {
            method: self.method,
            family: self.family,
            link: self.family.link_name().into(),
            coefficients: self
                .names
                .iter()
                .zip(self.coefficients.iter())
                .zip(&se)
                .map(|((n, &c), &s)| (n.clone(), CoefficientEntry { est: finite(c), se: finite(s) }))
                .collect(),
            vcov: self
                .vcov
                .row_iter()
                .map(|row| row.iter().map(|&v| finite(v)).collect())
                .collect(),
            variance: self.variance,
            target: self.target.clone(),
            provenance: self.provenance.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        serde_json::to_value(wire).expect("fit result serializes")
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("fit result serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self, EstimateError> {
        let wire: FitResultJson = serde_json::from_str(text).map_err(|e| EstimateError::Format(e.to_string()))?;
        if wire.link != wire.family.link_name() {
            return Err(EstimateError::Format(format!(
                "link {:?} does not match family {}",
                wire.link, wire.family
            )));
        }
        let terms = match wire.method {
            Method::Direct => internal_terms(&wire.target),
            _ => design_terms(&wire.target),
        };
        let names: Vec<String> = wire.coefficients.keys().cloned().collect();
        let expected: Vec<String> = terms.iter().map(Term::name).collect();
        if names != expected {
            return Err(EstimateError::Format(format!(
                "coefficient names {names:?} do not match the target model {expected:?}"
            )));
        }
        let p = names.len();
        if wire.vcov.len() != p || wire.vcov.iter().any(|r| r.len() != p) {
            return Err(EstimateError::Format(format!("vcov must be {p} x {p}")));
        }
        let coefficients = DVector::from_iterator(
            p,
            wire.coefficients.values().map(|c| c.est.unwrap_or(f64::NAN)),
        );
        let vcov = DMatrix::from_fn(p, p, |i, j| wire.vcov[i][j].unwrap_or(f64::NAN));
        Ok(FitResult {
            method: wire.method,
            family: wire.family,
            terms,
            names,
            coefficients,
            vcov,
            variance: wire.variance,
            target: wire.target,
            provenance: wire.provenance,
            diagnostics: wire.diagnostics,
        })
    }

    /// Populations the fit can predict for: the internal one and every external one.
    pub fn known_populations(&self) -> Vec<PopulationId> {
        let mut pops = vec![INTERNAL];
        pops.extend(self.target.populations.iter().copied());
        pops.extend(self.provenance.r.keys().copied());
        pops.sort_unstable();
        pops.dedup();
        pops
    }

    /// Mean response for every row of `data` as a member of `population`.
    pub fn predict(&self, data: &Dataset, population: PopulationId) -> Result<Vec<f64>, EstimateError> {
        if !self.known_populations().contains(&population) {
            return Err(EstimateError::Validation(format!(
                "unknown population {population}; the fit knows {:?}",
                self.known_populations()
            )));
        }
        let mut rows = data.clone();
        rows.set_population(population);
        let design = build_design_terms(&rows, &self.terms).map_err(|e| EstimateError::Validation(e.to_string()))?;
        let eta = &design.matrix * &self.coefficients;
        Ok(eta.iter().map(|&e| self.family.inverse_link(e)).collect())
    }
}

/// Map from centered to original-scale coefficients: γ' = Aγ.
fn uncentering_matrix(terms: &[Term], record: &CenteringRecord) -> DMatrix<f64> {
    let p = terms.len();
    let mut a = DMatrix::identity(p, p);
    for (i, ti) in terms.iter().enumerate() {
        for (j, tj) in terms.iter().enumerate() {
            match (ti, tj) {
                (Term::Intercept, Term::Main(c)) => a[(i, j)] = -record.mean(c),
                (Term::PopIntercept(k), Term::Interaction { column, population }) if k == population => {
                    a[(i, j)] = -record.mean(column)
                }
                _ => {}
            }
        }
    }
    a
}

fn uncenter(
    terms: &[Term],
    record: &CenteringRecord,
    coefficients: &DVector<f64>,
    vcov: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let a = uncentering_matrix(terms, record);
    (&a * coefficients, &a * vcov * a.transpose())
}

/// Checks shared by every method, before any computation.
pub fn validate_inputs(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &PipelineConfig,
) -> Result<(), EstimateError> {
    if config.m == 0 || config.cycles == 0 || config.beta_syn_multiplier == 0 {
        return Err(EstimateError::Validation(
            "M, cycles and the synthetic multiplier must be at least 1".into(),
        ));
    }
    if internal.n_rows() == 0 {
        return Err(EstimateError::Validation("internal data has no rows".into()));
    }
    if let Some(j) = (0..internal.n_cols()).find(|&j| internal.missing_count(j) > 0) {
        return Err(EstimateError::Validation(format!(
            "internal column {:?} has missing values; the internal study must be complete",
            internal.columns()[j].name
        )));
    }
    internal.check_outcome(target.family)?;
    if internal.column_index(&target.outcome) != internal.outcome_index() {
        return Err(EstimateError::Validation(format!(
            "target outcome {:?} is not the outcome column of the internal data",
            target.outcome
        )));
    }
    for c in target.covariates() {
        internal.require_column(c)?;
    }
    let mut pops = std::collections::BTreeSet::new();
    for spec in externals {
        validate_spec(spec, internal)?;
        if !pops.insert(spec.population) {
            return Err(EstimateError::Validation(format!(
                "population label {} used by more than one external model",
                spec.population
            )));
        }
        if let Payload::Predictor(_) = spec.payload {
            if target.family != Family::Binomial {
                return Err(EstimateError::Validation(format!(
                    "external model {}: predictors require a binomial target",
                    spec.name
                )));
            }
        }
        if let Payload::Coefficients(s) = &spec.payload {
            if s.family != target.family {
                return Err(EstimateError::Validation(format!(
                    "external model {} is {} but the target is {}",
                    spec.name, s.family, target.family
                )));
            }
        }
    }
    for k in &target.populations {
        if !pops.contains(k) {
            return Err(EstimateError::Validation(format!(
                "target has an intercept for population {k} but no external model provides it"
            )));
        }
    }
    target.validate(externals)?;
    Ok(())
}

fn base_provenance(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    config: &PipelineConfig,
    strategy: &str,
) -> Provenance {
    Provenance {
        seed: config.seed,
        r: externals
            .iter()
            .map(|s| (s.population, s.replication(internal.n_rows())))
            .collect(),
        m: config.m,
        cycles: config.cycles,
        strategy: strategy.into(),
        beta_syn_multiplier: config.beta_syn_multiplier,
        sigma_defaults: externals
            .iter()
            .filter(|s| matches!(&s.payload, Payload::Coefficients(c) if c.family == Family::Gaussian && c.sigma.is_none()))
            .map(|s| s.name.clone())
            .collect(),
        bootstrap: None,
        bootstrap_dropped: None,
        bootstrap_rerandomized: false,
        version: env!("CARGO_PKG_VERSION").into(),
        run_config: None,
    }
}

/// Steps 1 and 2 shared by every stacked method: synthetic blocks on the
/// raw scale, then centering by the internal means.
fn combined_centered(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &PipelineConfig,
) -> Result<(Dataset, CenteringRecord), EstimateError> {
    let blocks = generate_blocks(internal, externals, target.family, config.seed, config.parallelism)
        .map_err(EstimateError::Synthetic)?;
    let combined = combine(internal, &blocks).map_err(EstimateError::Synthetic)?;
    let (_, record) = center(internal);
    Ok((record.apply(&combined.data), record))
}

/// The full four-step estimator.
pub fn run_syndi(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &PipelineConfig,
) -> Result<FitResult, EstimateError> {
    validate_inputs(internal, externals, target, config)?;
    let (data, record) = combined_centered(internal, externals, target, config)?;
    let strategy = ImputationStrategy::new(ImputationMethod::SynDiNoY, config.m, config.cycles);
    let mut stack =
        impute_stack(&data, &strategy, config.seed, config.parallelism).map_err(EstimateError::Imputation)?;

    let centered_internal = record.apply(internal);
    let (_, estimates) = estimate_populations(
        &centered_internal,
        internal,
        &record,
        externals,
        target,
        config.beta_syn_multiplier,
        |k| stream(config.seed, &[label::BETA_SYN, k as u64]),
    )
    .map_err(EstimateError::Calibration)?;
    let degenerate = compute_weights(&mut stack, &estimates, target).map_err(EstimateError::Calibration)?;

    let design = build_design(&stack, target).map_err(EstimateError::Fit)?;
    let y = response(&stack, &target.outcome).map_err(EstimateError::Fit)?;
    let fit = fit_glm(&design, &y, target.family, Some(&stack.weights)).map_err(EstimateError::Fit)?;
    if !fit.converged {
        return Err(EstimateError::Nonconvergence("weighted stacked fit".into()));
    }
    let (coefficients, vcov) = uncenter(&design.terms, &record, &fit.coefficients, &fit.scaled_vcov());
    Ok(FitResult {
        method: Method::SynDi,
        family: target.family,
        terms: design.terms,
        names: design.names,
        coefficients,
        vcov,
        variance: VarianceTag::Naive,
        target: target.clone(),
        provenance: base_provenance(internal, externals, config, "syndi"),
        diagnostics: Diagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            weight_degenerate_subjects: degenerate,
            ridge_fallbacks: stack.ridge_fallbacks,
            populations: estimates.entries,
        },
    })
}

/// Internal-only regression of the main-effects model.
pub fn fit_direct(internal: &Dataset, target: &TargetModelSpec) -> Result<FitResult, EstimateError> {
    validate_inputs(internal, &[], &without_populations(target), &PipelineConfig::default())?;
    let (centered, record) = center(internal);
    let terms = internal_terms(target);
    let design = build_design_terms(&centered, &terms).map_err(EstimateError::Fit)?;
    let y = response(&centered, &target.outcome).map_err(EstimateError::Fit)?;
    let fit = fit_glm(&design, &y, target.family, None).map_err(EstimateError::Fit)?;
    if !fit.converged {
        return Err(EstimateError::Nonconvergence("internal fit".into()));
    }
    let (coefficients, vcov) = uncenter(&terms, &record, &fit.coefficients, &fit.scaled_vcov());
    Ok(FitResult {
        method: Method::Direct,
        family: target.family,
        terms,
        names: design.names,
        coefficients,
        vcov,
        variance: VarianceTag::Model,
        target: target.clone(),
        provenance: base_provenance(internal, &[], &PipelineConfig { m: 1, ..Default::default() }, "none"),
        diagnostics: Diagnostics {
            converged: true,
            iterations: fit.iterations,
            ..Default::default()
        },
    })
}

fn without_populations(target: &TargetModelSpec) -> TargetModelSpec {
    TargetModelSpec {
        populations: vec![],
        slopes: BTreeMap::new(),
        ..target.clone()
    }
}

/// Pooled estimates from M completed-data fits.
#[derive(Debug, Clone, PartialEq)]
pub struct RubinPool {
    pub coefficients: DVector<f64>,
    /// Mean within-imputation covariance.
    pub within: DMatrix<f64>,
    /// Between-imputation covariance (divisor M − 1).
    pub between: DMatrix<f64>,
    /// within + (1 + 1/M) between.
    pub total: DMatrix<f64>,
}

impl RubinPool {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.total.nrows()).map(|i| self.total[(i, i)].max(0.0).sqrt()).collect()
    }
}

pub fn rubin_pool(fits: &[GlmFit]) -> Result<RubinPool, EstimateError> {
    if fits.len() < 2 {
        return Err(EstimateError::Validation("Rubin's rules need at least two fits".into()));
    }
    let names = &fits[0].names;
    if let Some(f) = fits.iter().find(|f| &f.names != names) {
        return Err(EstimateError::Validation(format!(
            "coefficient names differ between fits: {:?} vs {:?}",
            names, f.names
        )));
    }
    let m = fits.len() as f64;
    let p = names.len();
    let mean = fits.iter().fold(DVector::zeros(p), |acc, f| acc + &f.coefficients) / m;
    let within = fits.iter().fold(DMatrix::zeros(p, p), |acc, f| acc + f.scaled_vcov()) / m;
    let between = fits.iter().fold(DMatrix::zeros(p, p), |acc, f| {
        let d = &f.coefficients - &mean;
        acc + &d * d.transpose()
    }) / (m - 1.0);
    let total = &within + &between * (1.0 + 1.0 / m);
    Ok(RubinPool {
        coefficients: mean,
        within,
        between,
        total,
    })
}

/// FCS or IMB imputation of the combined data, unweighted fits per copy, Rubin pooling.
pub fn run_comparison(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    method: ImputationMethod,
    config: &PipelineConfig,
) -> Result<FitResult, EstimateError> {
    let tag = match method {
        ImputationMethod::Fcs => Method::Fcs,
        ImputationMethod::Imb => Method::Imb,
        ImputationMethod::SynDiNoY => {
            return Err(EstimateError::Validation(
                "comparison methods are fcs and imb; use run_syndi for syndi".into(),
            ))
        }
    };
    validate_inputs(internal, externals, target, config)?;
    let (data, record) = combined_centered(internal, externals, target, config)?;
    let strategy = ImputationStrategy::new(method, config.m, config.cycles);
    let stack = impute_stack(&data, &strategy, config.seed, config.parallelism).map_err(EstimateError::Imputation)?;
    let terms = design_terms(target);
    let fits: Vec<GlmFit> = config
        .parallelism
        .map(config.m, |c| {
            let copy = stack.copy(c + 1);
            let design = build_design_terms(&copy, &terms)?;
            let y = response(&copy, &target.outcome)?;
            fit_glm(&design, &y, target.family, None)
        })
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(EstimateError::Fit)?;
    if let Some(i) = fits.iter().position(|f| !f.converged) {
        return Err(EstimateError::Nonconvergence(format!("fit to completed copy {}", i + 1)));
    }
    let (coefficients, vcov, variance) = if fits.len() == 1 {
        (fits[0].coefficients.clone(), fits[0].scaled_vcov(), VarianceTag::Model)
    } else {
        let pool = rubin_pool(&fits)?;
        (pool.coefficients, pool.total, VarianceTag::Rubin)
    };
    let (coefficients, vcov) = uncenter(&terms, &record, &coefficients, &vcov);
    Ok(FitResult {
        method: tag,
        family: target.family,
        names: terms.iter().map(Term::name).collect(),
        terms,
        coefficients,
        vcov,
        variance,
        target: target.clone(),
        provenance: base_provenance(internal, externals, config, &method.to_string()),
        diagnostics: Diagnostics {
            converged: true,
            iterations: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
            ridge_fallbacks: stack.ridge_fallbacks,
            ..Default::default()
        },
    })
}

/// Covariance of the pipeline estimates across internal-data resamples.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub standard_errors: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub replicates: usize,
    pub dropped: usize,
    /// Uncentered estimates of every kept replicate, in replicate order.
    pub estimates: Vec<DVector<f64>>,
}

/// Resample internal rows with replacement `b` times and rerun the whole
/// pipeline on each resample with its own derived seed. Replicates that
/// fail numerically are dropped and counted.
pub fn bootstrap_variance(
    internal: &Dataset,
    externals: &[ExternalModelSpec],
    target: &TargetModelSpec,
    config: &PipelineConfig,
    b: usize,
) -> Result<BootstrapResult, EstimateError> {
    if b < 2 {
        return Err(EstimateError::Bootstrap(format!("need at least 2 replicates, got {b}")));
    }
    validate_inputs(internal, externals, target, config)?;
    let n = internal.n_rows();
    let outcomes = config.parallelism.map(b, |i| {
        let path = [label::BOOTSTRAP, i as u64];
        let mut rng = stream(config.seed, &path);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sample = internal.select_rows(&rows);
        let inner = PipelineConfig {
            seed: derive_seed(config.seed, &path),
            parallelism: Parallelism::Serial,
            ..config.clone()
        };
        run_syndi(&sample, externals, target, &inner)
    });
    let mut estimates = Vec::with_capacity(b);
    let mut names = Vec::new();
    let mut dropped = 0;
    for outcome in outcomes {
        match outcome {
            Ok(fit) => {
                names = fit.names;
                estimates.push(fit.coefficients);
            }
            Err(e) if e.kind() == ErrorKind::Numerical => {
                log::debug!("bootstrap replicate dropped: {e}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if dropped as f64 > MAX_BOOTSTRAP_FAILURE * b as f64 || estimates.len() < 2 {
        return Err(EstimateError::BootstrapFailures {
            dropped,
            total: b,
            limit: MAX_BOOTSTRAP_FAILURE * 100.0,
        });
    }
    let vcov = empirical_covariance(&estimates);
    Ok(BootstrapResult {
        names,
        standard_errors: (0..vcov.nrows()).map(|i| vcov[(i, i)].sqrt()).collect(),
        vcov,
        replicates: estimates.len(),
        dropped,
        estimates,
    })
}

/// Sample covariance (divisor n − 1) of a set of vectors.
pub fn empirical_covariance(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let p = xs.first().map_or(0, |x| x.len());
    let n = xs.len() as f64;
    let mean = xs.iter().fold(DVector::zeros(p), |acc, x| acc + x) / n;
    xs.iter().fold(DMatrix::zeros(p, p), |acc, x| {
        let d = x - &mean;
        acc + &d * d.transpose()
    }) / (n - 1.0)
}

impl FitResult {
    /// Replace the covariance with a bootstrap estimate.
    pub fn attach_bootstrap(&mut self, boot: &BootstrapResult, requested: usize) -> Result<(), EstimateError> {
        if boot.names != self.names {
            return Err(EstimateError::Bootstrap("replicate coefficients do not match the fit".into()));
        }
        self.vcov = boot.vcov.clone();
        self.variance = VarianceTag::Bootstrap;
        self.provenance.bootstrap = Some(requested);
        self.provenance.bootstrap_dropped = Some(boot.dropped);
        self.provenance.bootstrap_rerandomized = true;
        Ok(())
    }
}
