//! Error types shared across the inference modules.

use thiserror::Error;

use crate::scan::ScanError;

/// A single constraint violation found while validating an [`SsmSpec`](crate::model::SsmSpec).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecViolation {
    #[error("state dimension must be at least 1")]
    ZeroDimension,
    #[error("spec must contain at least one step")]
    EmptySteps,
    #[error("var_floor must be a finite positive real, got {0}")]
    BadVarFloor(f64),
    #[error("non-finite value in {field}{}[{index}]", step_suffix(*.step))]
    NonFinite {
        field: &'static str,
        step: Option<usize>,
        index: usize,
    },
    #[error("{field}{} has length {got}, expected {expected}", step_suffix(*.step))]
    DimensionMismatch {
        field: &'static str,
        step: Option<usize>,
        expected: usize,
        got: usize,
    },
    #[error("step {step}: observation w and noise r must be present together")]
    UnpairedObservation { step: usize },
    #[error("transition coefficient {value} is not stable (|a| must be < 1)")]
    UnstableTransition { value: f64 },
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(t) => format!(" at step {t}"),
        None => String::new(),
    }
}

/// Validation failed; lists every violation found, not just the first.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid spec: {}", format_violations(violations))]
pub struct SpecError {
    pub violations: Vec<SpecViolation>,
}

impl SpecError {
    pub fn single(violation: SpecViolation) -> Self {
        Self {
            violations: vec![violation],
        }
    }
}

fn format_violations(violations: &[SpecViolation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Errors raised by the filtering, smoothing, and bound-evaluation routines.
#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch in {what} at step {step}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        step: usize,
        expected: usize,
        got: usize,
    },
    #[error("observation pattern mismatch at step {step}: {detail}")]
    ObservationMismatch { step: usize, detail: String },
    #[error("numerical breakdown in {op} over steps {t_start}..={t_end}: {detail}")]
    Breakdown {
        op: &'static str,
        t_start: usize,
        t_end: usize,
        detail: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

/// Errors from the dense brute-force oracle.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("dense joint has {n} variables, above the supported cap of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("observation covariance is not positive definite; cannot condition")]
    SingularConditioning,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}
