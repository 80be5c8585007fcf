//! Black-box risk predictors (external models that only return probabilities).
//!
//! A subprocess predictor receives a headered CSV of covariate rows on stdin
//! and must print one probability per line, in row order, then exit with 0.

use std::fmt;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;

use thiserror::Error;

use crate::data::format_number;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("failed to launch predictor {exec:?}: {source}")]
    Spawn {
        exec: String,
        #[source]
        source: std::io::Error,
    },
    #[error("predictor i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("predictor exited with status {status}: {stderr}")]
    Exit { status: String, stderr: String },
    #[error("predictor output line {line}: {message}")]
    Protocol { line: usize, message: String },
    #[error("predictor returned {got} probabilities for {expected} rows")]
    Count { expected: usize, got: usize },
    #[error("predictor returned {value} for row {row}; probabilities must lie in [0, 1]")]
    OutOfRange { row: usize, value: f64 },
}

/// Anything that maps covariate rows to P(Y = 1 | covariates).
pub trait RiskPredictor: Send + Sync + fmt::Debug {
    /// `columns[j][i]` is covariate `names[j]` for row `i`. Returns one value per row.
    fn predict(&self, names: &[String], columns: &[&[f64]]) -> Result<Vec<f64>, PredictorError>;

    /// Short human-readable description for provenance.
    fn describe(&self) -> String;
}

/// Calls `predictor` and enforces the protocol (row count, values in [0, 1]).
pub fn checked_predict(
    predictor: &dyn RiskPredictor,
    names: &[String],
    columns: &[&[f64]],
) -> Result<Vec<f64>, PredictorError> {
    let n = columns.first().map_or(0, |c| c.len());
    let p = predictor.predict(names, columns)?;
    if p.len() != n {
        return Err(PredictorError::Count {
            expected: n,
            got: p.len(),
        });
    }
    if let Some((row, &value)) = p
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(PredictorError::OutOfRange { row: row + 1, value });
    }
    Ok(p)
}

/// Parse predictor stdout: one decimal per line, optional final newline.
pub fn parse_predictor_output(text: &str) -> Result<Vec<f64>, PredictorError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line).trim();
            line.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PredictorError::Protocol {
                    line: i + 1,
                    message: format!("expected a decimal probability, found {line:?}"),
                })
        })
        .collect()
}

/// Headered CSV of the covariate rows, as written to a predictor's stdin.
pub fn encode_predictor_input(names: &[String], columns: &[&[f64]]) -> String {
    let n = columns.first().map_or(0, |c| c.len());
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..n {
        for (j, col) in columns.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_number(col[i]));
        }
        out.push('\n');
    }
    out
}

/// External executable speaking the stdin/stdout protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubprocessPredictor {
    pub exec: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessPredictor {
    pub fn new(exec: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            exec: exec.into(),
            args,
        }
    }
}

impl RiskPredictor for SubprocessPredictor {
    fn predict(&self, names: &[String], columns: &[&[f64]]) -> Result<Vec<f64>, PredictorError> {
        let input = encode_predictor_input(names, columns);
        let mut child = Command::new(&self.exec)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| PredictorError::Spawn {
                exec: self.exec.display().to_string(),
                source: e,
            })?;

        // Feed stdin from a separate thread so a predictor that streams its
        // answers cannot deadlock against a full pipe.
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let writer = std::thread::spawn(move || -> std::io::Result<()> {
            match stdin.write_all(input.as_bytes()) {
                // A predictor may legitimately stop reading early.
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => other,
            }
        });
        let mut stdout = String::new();
        child
            .stdout
            .take()
            .expect("stdout is piped")
            .read_to_string(&mut stdout)?;
        let mut stderr = String::new();
        child
            .stderr
            .take()
            .expect("stderr is piped")
            .read_to_string(&mut stderr)?;
        let status = child.wait()?;
        writer.join().expect("stdin writer panicked")?;
        if !status.success() {
            return Err(PredictorError::Exit {
                status: status.to_string(),
                stderr: stderr.trim().to_string(),
            });
        }
        parse_predictor_output(&stdout)
    }

    fn describe(&self) -> String {
        let mut s = self.exec.display().to_string();
        for a in &self.args {
            s.push(' ');
            s.push_str(a);
        }
        s
    }
}

type RowFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// In-process predictor from a per-row closure (row values in column order).
#[derive(Clone)]
pub struct ClosurePredictor {
    label: String,
    f: Arc<RowFn>,
}

impl ClosurePredictor {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for ClosurePredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosurePredictor")
            .field("label", &self.label)
            .finish()
    }
}

impl RiskPredictor for ClosurePredictor {
    fn predict(&self, _names: &[String], columns: &[&[f64]]) -> Result<Vec<f64>, PredictorError> {
        let n = columns.first().map_or(0, |c| c.len());
        let mut row = vec![0.0; columns.len()];
        Ok((0..n)
            .map(|i| {
                for (slot, col) in row.iter_mut().zip(columns) {
                    *slot = col[i];
                }
                (self.f)(&row)
            })
            .collect())
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}
