//! Discrimination and calibration metrics on a validation set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} outcomes, {1} predictions")]
    Length(usize, usize),
    #[error("outcome vector has a single class")]
    SingleClass,
    #[error("outcome {0} is not 0 or 1")]
    NotBinary(f64),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub scaled_brier: Option<f64>,
    /// Mean squared error against the true probabilities.
    pub sse: Option<f64>,
    /// Unnormalized sum of squared errors against the true probabilities.
    pub sse_sum: Option<f64>,
    pub n_test: usize,
}

fn check(y: &[f64], p: &[f64]) -> Result<(), MetricError> {
    if y.len() != p.len() {
        return Err(MetricError::Length(y.len(), p.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mann–Whitney estimate of P(p_case > p_control), ties counted ½.
pub fn auc(y: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    check(y, p)?;
    if let Some(&v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(MetricError::NotBinary(v));
    }
    let n1 = y.iter().filter(|&&v| v == 1.0).count();
    let n0 = y.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // Midranks over tie groups; sum the case ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| y[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (n1 as f64, n0 as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Σ(y − p)² / Σ(y − ȳ)².
pub fn scaled_brier(y: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    check(y, p)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let denom: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(MetricError::SingleClass);
    }
    let num: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / denom)
}

/// Raw sum of squared differences between predicted and true probabilities.
pub fn sse_sum(p_hat: &[f64], p_true: &[f64]) -> Result<f64, MetricError> {
    check(p_hat, p_true)?;
    Ok(p_hat.iter().zip(p_true).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Mean squared difference between predicted and true probabilities.
pub fn sse(p_hat: &[f64], p_true: &[f64]) -> Result<f64, MetricError> {
    Ok(sse_sum(p_hat, p_true)? / p_hat.len() as f64)
}

/// All metrics that apply. Binary-outcome metrics are skipped (None) for
/// non-binary `y`; SSE needs `p_true`.
pub fn report(y: &[f64], p_hat: &[f64], p_true: Option<&[f64]>) -> Result<MetricReport, MetricError> {
    check(y, p_hat)?;
    let binary = y.iter().all(|&v| v == 0.0 || v == 1.0);
    let (auc, scaled_brier) = if binary {
        (Some(auc(y, p_hat)?), Some(scaled_brier(y, p_hat)?))
    } else {
        (None, None)
    };
    let (sse, sse_sum) = match p_true {
        Some(t) => (Some(sse(p_hat, t)?), Some(sse_sum(p_hat, t)?)),
        None => (None, None),
    };
    Ok(MetricReport {
        auc,
        scaled_brier,
        sse,
        sse_sum,
        n_test: y.len(),
    })
}
