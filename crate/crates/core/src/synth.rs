//! Synthetic outcome generation from external model summaries.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{DataError, Dataset, PopulationId, Table, INTERNAL};
use crate::exec::Parallelism;
use crate::model::{expit, ExternalModelSpec, Family, Payload};
use crate::predictor::{checked_predict, PredictorError};
use crate::rng::{label, stream};

/// Residual SD assumed for gaussian external models that do not report one.
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("external model {model}: {source}")]
    Predictor {
        model: String,
        #[source]
        source: PredictorError,
    },
    #[error("external model {model}: {message}")]
    Incompatible { model: String, message: String },
    #[error("internal data: column {column:?} has a missing value at row {row}")]
    Incomplete { column: String, row: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Conditional law of the synthetic outcome for each internal row.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeLaw {
    Bernoulli(Vec<f64>),
    Normal { mean: Vec<f64>, sigma: f64 },
}

impl OutcomeLaw {
    fn draw<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        match self {
            OutcomeLaw::Bernoulli(p) => f64::from(u8::from(rng.random::<f64>() < p[i])),
            OutcomeLaw::Normal { mean, sigma } => mean[i] + sigma * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

/// Internal values of the external model's covariates, in the model's order.
pub(crate) fn covariate_columns<'a>(
    internal: &'a Dataset,
    spec: &ExternalModelSpec,
) -> Result<Vec<&'a [f64]>, SynthError> {
    spec.covariates
        .iter()
        .map(|name| {
            let j = internal.require_column(name)?;
            if let Some(row) = (0..internal.n_rows()).find(|&i| internal.is_missing(i, j)) {
                return Err(SynthError::Incomplete {
                    column: name.clone(),
                    row: row + 1,
                });
            }
            Ok(internal.values(j))
        })
        .collect()
}

/// Evaluate the external model on every internal row.
pub fn external_law(internal: &Dataset, spec: &ExternalModelSpec, family: Family) -> Result<OutcomeLaw, SynthError> {
    let incompatible = |message: String| SynthError::Incompatible {
        model: spec.name.clone(),
        message,
    };
    let cols = covariate_columns(internal, spec)?;
    let n = internal.n_rows();
    match &spec.payload {
        Payload::Coefficients(s) => {
            if s.family != family {
                return Err(incompatible(format!(
                    "model family {} differs from the target family {family}",
                    s.family
                )));
            }
            let mut eta = vec![s.intercept; n];
            for (name, col) in spec.covariates.iter().zip(&cols) {
                let b = s.slopes[name];
                for (e, &x) in eta.iter_mut().zip(*col) {
                    *e += b * x;
                }
            }
            Ok(match family {
                Family::Binomial => OutcomeLaw::Bernoulli(eta.into_iter().map(expit).collect()),
                Family::Gaussian => {
                    let sigma = s.sigma.unwrap_or_else(|| {
                        log::warn!(
                            "external model {}: no residual SD given, using {DEFAULT_SIGMA}",
                            spec.name
                        );
                        DEFAULT_SIGMA
                    });
                    OutcomeLaw::Normal { mean: eta, sigma }
                }
            })
        }
        Payload::Predictor(p) => {
            if family != Family::Binomial {
                return Err(incompatible("black-box predictors require a binomial target".into()));
            }
            // One batched call on the n distinct rows; replicates reuse the probabilities.
            let probs = checked_predict(p.as_ref(), &spec.covariates, &cols).map_err(|e| SynthError::Predictor {
                model: spec.name.clone(),
                source: e,
            })?;
            Ok(OutcomeLaw::Bernoulli(probs))
        }
    }
}

/// Synthetic block for one external model: the internal X_k replicated r_k
/// times, outcomes drawn from the external conditional law, all other
/// covariates masked.
pub fn generate_synthetic_population<R: Rng + ?Sized>(
    internal: &Dataset,
    spec: &ExternalModelSpec,
    family: Family,
    rng: &mut R,
) -> Result<Dataset, SynthError> {
    let n = internal.n_rows();
    let r = spec.replication(n);
    let law = external_law(internal, spec, family)?;
    let y_idx = internal
        .outcome_index()
        .ok_or_else(|| DataError::Invalid("internal data has no outcome column".into()))?;
    let total = n * r;
    let mut y = Vec::with_capacity(total);
    for _ in 0..r {
        for i in 0..n {
            y.push(law.draw(i, rng));
        }
    }
    let mut values = Vec::with_capacity(internal.n_cols());
    let mut missing = Vec::with_capacity(internal.n_cols());
    for (j, col) in internal.columns().iter().enumerate() {
        if j == y_idx {
            values.push(std::mem::take(&mut y));
            missing.push(vec![false; total]);
        } else if spec.covariates.contains(&col.name) {
            values.push(internal.values(j).repeat(r));
            missing.push(vec![false; total]);
        } else {
            values.push(vec![f64::NAN; total]);
            missing.push(vec![true; total]);
        }
    }
    Ok(Dataset::new(
        internal.columns().to_vec(),
        values,
        missing,
        vec![spec.population; total],
    )?)
}

/// Synthetic blocks for all external models, one seeded stream per population.
pub fn generate_blocks(
    internal: &Dataset,
    specs: &[ExternalModelSpec],
    family: Family,
    seed: u64,
    parallelism: Parallelism,
) -> Result<Vec<Dataset>, SynthError> {
    parallelism
        .map(specs.len(), |i| {
            let spec = &specs[i];
            let mut rng = stream(seed, &[label::SYNTHETIC, spec.population as u64]);
            generate_synthetic_population(internal, spec, family, &mut rng)
        })
        .into_iter()
        .collect()
}

/// Internal rows followed by the synthetic blocks in population order.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDataset {
    pub data: Dataset,
    pub n_internal: usize,
    /// (population, row count) of each synthetic block, in row order.
    pub blocks: Vec<(PopulationId, usize)>,
}

pub fn combine(internal: &Dataset, synthetic_blocks: &[Dataset]) -> Result<CombinedDataset, SynthError> {
    let mut internal = internal.clone();
    internal.set_population(INTERNAL);
    let mut blocks: Vec<&Dataset> = synthetic_blocks.iter().collect();
    let pop_of = |b: &Dataset| b.populations().first().copied();
    blocks.sort_by_key(|b| pop_of(b));
    let mut info = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let pops = b.populations();
        let Some(&k) = pops.first() else { continue };
        if k == INTERNAL || pops.iter().any(|&p| p != k) {
            return Err(DataError::Invalid("each synthetic block needs one external population label".into()).into());
        }
        if info.iter().any(|&(p, _)| p == k) {
            return Err(DataError::Invalid(format!("two synthetic blocks for population {k}")).into());
        }
        info.push((k, b.n_rows()));
    }
    let mut parts = vec![&internal];
    parts.extend(blocks.iter().copied());
    let data = Dataset::concat(&parts)?;
    Ok(CombinedDataset {
        n_internal: internal.n_rows(),
        data,
        blocks: info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use crate::glm::{fit_glm, DesignMatrix, Term};
    use crate::model::CoefficientSummary;
    use crate::predictor::ClosurePredictor;
    use indexmap::IndexMap;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn internal(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut b1 = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x1.push(a);
            x2.push(0.3 * a + b);
            b1.push(rng.sample::<f64, _>(StandardNormal) + 0.5 * a);
            y.push(f64::from(u8::from(rng.random::<f64>() < 0.4)));
        }
        Dataset::from_columns(
            vec![
                ("Y".into(), Role::Outcome, y),
                ("X1".into(), Role::Shared, x1),
                ("X2".into(), Role::Shared, x2),
                ("B1".into(), Role::InternalOnly, b1),
            ],
            vec![0; n],
        )
        .unwrap()
    }

    fn logistic(pop: usize, intercept: f64, slopes: &[(&str, f64)], r: usize) -> ExternalModelSpec {
        let slopes: IndexMap<String, f64> = slopes.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        ExternalModelSpec::coefficients(
            pop,
            format!("ext{pop}"),
            CoefficientSummary {
                family: Family::Binomial,
                intercept,
                slopes,
                sigma: None,
            },
            Some(r),
        )
    }

    #[test]
    fn intercept_only_model_gives_half_prevalence() {
        let ds = internal(1000, 1);
        let spec = logistic(1, 0.0, &[], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = generate_synthetic_population(&ds, &spec, Family::Binomial, &mut rng).unwrap();
        assert_eq!(block.n_rows(), 100_000);
        let mean = block.values(0).iter().sum::<f64>() / 100_000.0;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        for j in 1..4 {
            assert_eq!(block.missing_count(j), 100_000);
        }
    }

    #[test]
    fn block_replicates_internal_covariates() {
        let ds = internal(50, 3);
        let spec = logistic(1, -0.2, &[("X1", 0.5)], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = generate_synthetic_population(&ds, &spec, Family::Binomial, &mut rng).unwrap();
        assert_eq!(block.n_rows(), 150);
        assert_eq!(block.values(1), ds.values(1).repeat(3).as_slice());
        // X2 and B1 masked in every row, Y and X1 never.
        assert_eq!(block.missing_count(0), 0);
        assert_eq!(block.missing_count(1), 0);
        assert_eq!(block.missing_count(2), 150);
        assert_eq!(block.missing_count(3), 150);
        assert!(block.populations().iter().all(|&p| p == 1));
    }

    #[test]
    fn combined_sizes() {
        let ds = internal(200, 5);
        let fam = Family::Binomial;
        let one = [logistic(1, 0.0, &[("X1", 1.0)], 1), logistic(2, 0.0, &[("X1", 1.0), ("X2", 1.0)], 1)];
        let blocks = generate_blocks(&ds, &one, fam, 9, Parallelism::Serial).unwrap();
        assert_eq!(combine(&ds, &blocks).unwrap().data.n_rows(), 600);
        let ten = [logistic(1, 0.0, &[("X1", 1.0)], 10), logistic(2, 0.0, &[("X1", 1.0), ("X2", 1.0)], 10)];
        let blocks = generate_blocks(&ds, &ten, fam, 9, Parallelism::Serial).unwrap();
        let c = combine(&ds, &blocks).unwrap();
        assert_eq!(c.data.n_rows(), 4200);
        assert_eq!(c.blocks, vec![(1, 2000), (2, 2000)]);
        let pops = c.data.populations();
        assert!(pops[..200].iter().all(|&p| p == 0));
        assert!(pops[200..2200].iter().all(|&p| p == 1));
        let empty = combine(&ds, &[]).unwrap();
        assert_eq!(empty.data, ds);
    }

    #[test]
    fn out_of_range_predictor_is_protocol_error() {
        let ds = internal(20, 6);
        let spec = ExternalModelSpec::predictor(
            1,
            "bad",
            vec!["X1".into()],
            Arc::new(ClosurePredictor::new("const", |_| 1.2)),
            Some(1),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = generate_synthetic_population(&ds, &spec, Family::Binomial, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            SynthError::Predictor {
                source: PredictorError::OutOfRange { row: 1, .. },
                ..
            }
        ));
    }

    #[test]
    fn synthetic_block_recovers_external_coefficients() {
        let ds = internal(400, 7);
        let spec = logistic(1, -0.5, &[("X1", 0.8), ("X2", -0.4)], 50);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = generate_synthetic_population(&ds, &spec, Family::Binomial, &mut rng).unwrap();
        let n = block.n_rows();
        let design = DesignMatrix {
            terms: vec![Term::Intercept, Term::Main("X1".into()), Term::Main("X2".into())],
            names: vec!["(Intercept)".into(), "X1".into(), "X2".into()],
            matrix: DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { block.values(j)[i] }),
        };
        let fit = fit_glm(&design, block.values(0), Family::Binomial, None).unwrap();
        let se = fit.standard_errors();
        for (j, truth) in [-0.5, 0.8, -0.4].iter().enumerate() {
            assert!((fit.coefficients[j] - truth).abs() < 3.0 * se[j], "{j}: {}", fit.coefficients[j]);
        }
    }

    #[test]
    fn gaussian_block_uses_default_sigma() {
        let mut ds = internal(2000, 9);
        // any real outcome is fine for a gaussian model
        ds = Dataset::from_columns(
            vec![
                ("Y".into(), Role::Outcome, ds.values(1).to_vec()),
                ("X1".into(), Role::Shared, ds.values(1).to_vec()),
            ],
            vec![0; 2000],
        )
        .unwrap();
        let spec = ExternalModelSpec::coefficients(
            1,
            "lin",
            CoefficientSummary {
                family: Family::Gaussian,
                intercept: 2.0,
                slopes: [("X1".to_string(), 0.0)].into_iter().collect(),
                sigma: None,
            },
            Some(5),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let block = generate_synthetic_population(&ds, &spec, Family::Gaussian, &mut rng).unwrap();
        let y = block.values(0);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((mean - 2.0).abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
        assert!(generate_synthetic_population(&ds, &spec, Family::Binomial, &mut rng).is_err());
    }
}
