//! Model specifications: GLM families, external model summaries and the
//! heterogeneity pattern of the target model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::data::{read_to_string, DataError, Dataset, PopulationId, Role, Table};
use crate::predictor::{RiskPredictor, SubprocessPredictor};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("external model {model}: covariate {name:?} is not a column of the internal data")]
    MissingCovariate { model: String, name: String },
    #[error("external model {model}: covariate {name:?} is not a shared (x) covariate")]
    NotShared { model: String, name: String },
    #[error("external model {model}: replication r must be at least 1")]
    ZeroReplication { model: String },
    #[error("external model {model}: slope names {slopes:?} do not match covariates {covariates:?}")]
    SlopeMismatch {
        model: String,
        slopes: Vec<String>,
        covariates: Vec<String>,
    },
    #[error("external model {model}: {message}")]
    Invalid { model: String, message: String },
    #[error("invalid external model configuration: {0}")]
    Config(String),
    #[error("invalid heterogeneity selector {input:?}: {message}")]
    Selector { input: String, message: String },
    #[error("target model: {0}")]
    Target(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// GLM family with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Normal errors, identity link.
    Gaussian,
    /// Bernoulli outcome, logit link.
    Binomial,
}

impl Family {
    pub fn link_name(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Binomial => "logit",
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Binomial => expit(eta),
        }
    }

    /// d mu / d eta.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => {
                let p = expit(eta);
                p * (1.0 - p)
            }
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => mu * (1.0 - mu),
        }
    }

    /// Unit deviance contribution of one observation.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Binomial => {
                let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
                2.0 * (term(y, mu) + term(1.0 - y, 1.0 - mu))
            }
        }
    }

    /// Log density of `y` given linear predictor `eta` (sigma ignored for binomial).
    pub fn log_density(self, y: f64, eta: f64, sigma: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let z = (y - eta) / sigma;
                -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            // y*eta - log(1 + e^eta), computed without overflow.
            Family::Binomial => y * eta - log1p_exp(eta),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        })
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "binomial" => Ok(Family::Binomial),
            other => Err(format!("unknown family {other:?} (expected gaussian or binomial)")),
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ln(1 + e^x).
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Coefficients of a fitted reduced model (Category 1 summary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub family: Family,
    pub intercept: f64,
    pub slopes: IndexMap<String, f64>,
    /// Residual standard deviation of a gaussian model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// What an external study shares.
#[derive(Debug, Clone)]
pub enum Payload {
    Coefficients(CoefficientSummary),
    Predictor(Arc<dyn RiskPredictor>),
}

#[derive(Debug, Clone)]
pub struct ExternalModelSpec {
    /// Population label `k >= 1` assigned to this model's synthetic rows.
    pub population: PopulationId,
    pub name: String,
    /// Covariates X_k used by the external model, in the order the predictor expects.
    pub covariates: Vec<String>,
    pub payload: Payload,
    /// Replication factor r_k; derived from `study_size` when absent.
    pub r: Option<usize>,
    pub study_size: Option<usize>,
}

/// Largest replication factor chosen automatically from a study size.
pub const MAX_AUTO_R: usize = 50;

impl ExternalModelSpec {
    pub fn coefficients(
        population: PopulationId,
        name: impl Into<String>,
        summary: CoefficientSummary,
        r: Option<usize>,
    ) -> Self {
        Self {
            population,
            name: name.into(),
            covariates: summary.slopes.keys().cloned().collect(),
            payload: Payload::Coefficients(summary),
            r,
            study_size: None,
        }
    }

    pub fn predictor(
        population: PopulationId,
        name: impl Into<String>,
        covariates: Vec<String>,
        predictor: Arc<dyn RiskPredictor>,
        r: Option<usize>,
    ) -> Self {
        Self {
            population,
            name: name.into(),
            covariates,
            payload: Payload::Predictor(predictor),
            r,
            study_size: None,
        }
    }

    pub fn is_predictor(&self) -> bool {
        matches!(self.payload, Payload::Predictor(_))
    }

    /// r_k for an internal sample of size `n`: the explicit value, else
    /// round(study_size / n) clamped to [1, 50], else 1.
    pub fn replication(&self, n: usize) -> usize {
        if let Some(r) = self.r {
            return r;
        }
        match self.study_size {
            Some(size) if n > 0 => ((size as f64 / n as f64).round() as usize).clamp(1, MAX_AUTO_R),
            _ => 1,
        }
    }

    /// Parse one external model from its JSON configuration.
    ///
    /// Category 1: `{"type":"coefficients","family":"binomial","intercept":..,"slopes":{..}}`.
    /// Category 2: `{"type":"predictor","exec":path,"args":[..],"covariates":[..]}`.
    /// Optional keys: `population`, `name`, `r`, `study_size`, `sigma`.
    pub fn from_json_str(text: &str, default_population: PopulationId) -> Result<Self, SpecError> {
        let raw: RawExternal = serde_json::from_str(text).map_err(|e| SpecError::Config(e.to_string()))?;
        let population = raw.population.unwrap_or(default_population);
        let name = raw.name.unwrap_or_else(|| format!("external{population}"));
        let payload = match raw.kind.as_str() {
            "coefficients" => {
                let family = raw
                    .family
                    .as_deref()
                    .unwrap_or("binomial")
                    .parse::<Family>()
                    .map_err(SpecError::Config)?;
                let intercept = raw
                    .intercept
                    .ok_or_else(|| SpecError::Config(format!("{name}: missing \"intercept\"")))?;
                let slopes = raw.slopes.unwrap_or_default();
                Payload::Coefficients(CoefficientSummary {
                    family,
                    intercept,
                    slopes,
                    sigma: raw.sigma,
                })
            }
            "predictor" => {
                let exec = raw
                    .exec
                    .ok_or_else(|| SpecError::Config(format!("{name}: predictor needs \"exec\"")))?;
                Payload::Predictor(Arc::new(SubprocessPredictor::new(exec, raw.args.unwrap_or_default())))
            }
            other => {
                return Err(SpecError::Config(format!(
                    "{name}: unknown type {other:?} (expected \"coefficients\" or \"predictor\")"
                )))
            }
        };
        let covariates = match (&payload, raw.covariates) {
            (_, Some(c)) => c,
            (Payload::Coefficients(s), None) => s.slopes.keys().cloned().collect(),
            (Payload::Predictor(_), None) => {
                return Err(SpecError::Config(format!("{name}: predictor needs \"covariates\"")))
            }
        };
        Ok(Self {
            population,
            name,
            covariates,
            payload,
            r: raw.r,
            study_size: raw.study_size,
        })
    }

    pub fn from_json_path(path: &Path, default_population: PopulationId) -> Result<Self, SpecError> {
        Self::from_json_str(&read_to_string(path)?, default_population)
    }

    /// JSON description for provenance blocks.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "population": self.population,
            "name": self.name,
            "covariates": self.covariates,
        });
        let obj = v.as_object_mut().expect("object literal");
        match &self.payload {
            Payload::Coefficients(s) => {
                obj.insert("type".into(), json!("coefficients"));
                obj.insert("family".into(), json!(s.family));
                obj.insert("intercept".into(), json!(s.intercept));
                obj.insert("slopes".into(), json!(s.slopes));
                if let Some(sigma) = s.sigma {
                    obj.insert("sigma".into(), json!(sigma));
                }
            }
            Payload::Predictor(p) => {
                obj.insert("type".into(), json!("predictor"));
                obj.insert("predictor".into(), json!(p.describe()));
            }
        }
        if let Some(r) = self.r {
            obj.insert("r".into(), json!(r));
        }
        if let Some(s) = self.study_size {
            obj.insert("study_size".into(), json!(s));
        }
        v
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExternal {
    #[serde(rename = "type")]
    kind: String,
    population: Option<PopulationId>,
    name: Option<String>,
    covariates: Option<Vec<String>>,
    family: Option<String>,
    intercept: Option<f64>,
    slopes: Option<IndexMap<String, f64>>,
    sigma: Option<f64>,
    exec: Option<String>,
    args: Option<Vec<String>>,
    r: Option<usize>,
    study_size: Option<usize>,
}

/// Check an external model against the internal data it will be combined with.
pub fn validate_spec(spec: &ExternalModelSpec, internal: &Dataset) -> Result<(), SpecError> {
    let model = spec.name.clone();
    let invalid = |message: String| SpecError::Invalid {
        model: model.clone(),
        message,
    };
    if spec.population == 0 {
        return Err(invalid("population label 0 is reserved for the internal study".into()));
    }
    if spec.r == Some(0) {
        return Err(SpecError::ZeroReplication { model });
    }
    let mut seen = HashSet::new();
    for name in &spec.covariates {
        if !seen.insert(name) {
            return Err(invalid(format!("covariate {name:?} listed twice")));
        }
        let idx = internal
            .column_index(name)
            .ok_or_else(|| SpecError::MissingCovariate {
                model: model.clone(),
                name: name.clone(),
            })?;
        if internal.columns()[idx].role != Role::Shared {
            return Err(SpecError::NotShared {
                model: model.clone(),
                name: name.clone(),
            });
        }
    }
    if let Payload::Coefficients(s) = &spec.payload {
        let slopes: BTreeSet<&String> = s.slopes.keys().collect();
        let covs: BTreeSet<&String> = spec.covariates.iter().collect();
        if slopes != covs || s.slopes.len() != spec.covariates.len() {
            return Err(SpecError::SlopeMismatch {
                model,
                slopes: s.slopes.keys().cloned().collect(),
                covariates: spec.covariates.clone(),
            });
        }
        if !s.intercept.is_finite() || s.slopes.values().any(|v| !v.is_finite()) {
            return Err(invalid("coefficients must be finite".into()));
        }
        if let Some(sigma) = s.sigma {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(invalid(format!("sigma must be positive, got {sigma}")));
            }
        }
    }
    Ok(())
}

/// Which terms may differ by population.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeterogeneitySelector {
    /// Population-specific intercepts only.
    Intercepts,
    /// Intercepts plus slopes for every covariate each external model uses.
    InterceptsAndSlopes,
    /// Listed populations get an intercept and the listed slopes: `"1:X1,X2;2:"`.
    Explicit(BTreeMap<PopulationId, Vec<String>>),
}

impl FromStr for HeterogeneitySelector {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |message: &str| SpecError::Selector {
            input: s.to_string(),
            message: message.to_string(),
        };
        match s.trim() {
            "intercepts" => return Ok(Self::Intercepts),
            "intercepts+slopes" => return Ok(Self::InterceptsAndSlopes),
            "" => return Err(err("empty selector")),
            _ => {}
        }
        let mut map = BTreeMap::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, terms) = part
                .split_once(':')
                .ok_or_else(|| err("expected \"intercepts\", \"intercepts+slopes\" or \"k:cov,..;k:..\""))?;
            let k: PopulationId = k
                .trim()
                .parse()
                .map_err(|_| err("population must be a positive integer"))?;
            if k == 0 {
                return Err(err("population 0 is the internal study"));
            }
            let mut covs: Vec<String> = Vec::new();
            for t in terms.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if covs.iter().any(|c| c == t) {
                    return Err(err("covariate listed twice"));
                }
                covs.push(t.to_string());
            }
            if map.insert(k, covs).is_some() {
                return Err(err("population listed twice"));
            }
        }
        if map.is_empty() {
            return Err(err("no populations listed"));
        }
        Ok(Self::Explicit(map))
    }
}

impl fmt::Display for HeterogeneitySelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Intercepts => f.write_str("intercepts"),
            Self::InterceptsAndSlopes => f.write_str("intercepts+slopes"),
            Self::Explicit(map) => {
                let parts: Vec<String> = map
                    .iter()
                    .map(|(k, covs)| format!("{k}:{}", covs.join(",")))
                    .collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}

/// The expanded target model: family plus which effects are population-specific.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModelSpec {
    pub family: Family,
    pub outcome: String,
    /// Shared covariates X in design order.
    pub shared: Vec<String>,
    /// Internal-only covariates B in design order.
    pub internal_only: Vec<String>,
    /// Populations with their own intercept, ascending.
    pub populations: Vec<PopulationId>,
    /// Population-specific slopes, each list in X order.
    pub slopes: BTreeMap<PopulationId, Vec<String>>,
}

impl TargetModelSpec {
    /// Target with population-specific intercepts for `populations` and no slope heterogeneity.
    pub fn intercepts_only(
        family: Family,
        outcome: &str,
        shared: &[&str],
        internal_only: &[&str],
        populations: &[PopulationId],
    ) -> Self {
        Self {
            family,
            outcome: outcome.to_string(),
            shared: shared.iter().map(|s| s.to_string()).collect(),
            internal_only: internal_only.iter().map(|s| s.to_string()).collect(),
            populations: populations.to_vec(),
            slopes: BTreeMap::new(),
        }
    }

    /// Resolve a selector against the internal data's roles and the external models.
    pub fn from_selector(
        family: Family,
        internal: &Dataset,
        externals: &[ExternalModelSpec],
        selector: &HeterogeneitySelector,
    ) -> Result<Self, SpecError> {
        let outcome = internal
            .outcome_index()
            .map(|i| internal.columns()[i].name.clone())
            .ok_or_else(|| SpecError::Target("the internal data has no outcome column".into()))?;
        let shared = internal.names_with_role(Role::Shared);
        let internal_only = internal.names_with_role(Role::InternalOnly);
        let in_x_order = |covs: &[String]| -> Vec<String> {
            shared.iter().filter(|x| covs.contains(x)).cloned().collect()
        };
        let mut populations: Vec<PopulationId> = Vec::new();
        let mut slopes = BTreeMap::new();
        match selector {
            HeterogeneitySelector::Intercepts => {
                populations = externals.iter().map(|e| e.population).collect();
            }
            HeterogeneitySelector::InterceptsAndSlopes => {
                for e in externals {
                    populations.push(e.population);
                    let s = in_x_order(&e.covariates);
                    if !s.is_empty() {
                        slopes.insert(e.population, s);
                    }
                }
            }
            HeterogeneitySelector::Explicit(map) => {
                for (&k, covs) in map {
                    if !externals.iter().any(|e| e.population == k) {
                        return Err(SpecError::Target(format!(
                            "selector names population {k} but no external model has that label"
                        )));
                    }
                    populations.push(k);
                    for c in covs {
                        if !shared.contains(c) {
                            return Err(SpecError::Target(format!(
                                "selector slope {c:?} is not a shared covariate"
                            )));
                        }
                    }
                    let s = in_x_order(covs);
                    if !s.is_empty() {
                        slopes.insert(k, s);
                    }
                }
            }
        }
        populations.sort_unstable();
        populations.dedup();
        let target = Self {
            family,
            outcome,
            shared,
            internal_only,
            populations,
            slopes,
        };
        target.validate(externals)?;
        Ok(target)
    }

    /// Population-specific slopes must be covariates the external model used.
    pub fn validate(&self, externals: &[ExternalModelSpec]) -> Result<(), SpecError> {
        for (&k, covs) in &self.slopes {
            if !self.populations.contains(&k) {
                return Err(SpecError::Target(format!(
                    "population {k} has specific slopes but no specific intercept"
                )));
            }
            let ext = externals
                .iter()
                .find(|e| e.population == k)
                .ok_or_else(|| SpecError::Target(format!("no external model for population {k}")))?;
            for c in covs {
                if !ext.covariates.contains(c) {
                    return Err(SpecError::Target(format!(
                        "population {k} cannot have a specific {c:?} effect: external model {} does not use it",
                        ext.name
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for name in self.shared.iter().chain(&self.internal_only) {
            if !seen.insert(name) || *name == self.outcome {
                return Err(SpecError::Target(format!("covariate {name:?} repeated")));
            }
        }
        Ok(())
    }

    pub fn specific_slopes(&self, k: PopulationId) -> &[String] {
        self.slopes.get(&k).map_or(&[], Vec::as_slice)
    }

    pub fn has_intercept(&self, k: PopulationId) -> bool {
        self.populations.contains(&k)
    }

    /// All covariates (X then B) in design order.
    pub fn covariates(&self) -> impl Iterator<Item = &String> {
        self.shared.iter().chain(&self.internal_only)
    }
}
