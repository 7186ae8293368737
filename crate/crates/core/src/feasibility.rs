//! Inequality reports shared by the parameter solvers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("infeasible: {reason}")]
pub struct Infeasible {
    pub reason: String,
    /// Name and value of the violated threshold, when there is one.
    pub threshold: Option<(String, f64)>,
}

impl Infeasible {
    pub fn new(reason: impl Into<String>) -> Self {
        Infeasible { reason: reason.into(), threshold: None }
    }

    pub fn threshold(name: &str, value: f64, reason: impl Into<String>) -> Self {
        Infeasible { reason: reason.into(), threshold: Some((name.to_string(), value)) }
    }
}

/// One checked inequality `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Relative slack used by every envelope and inequality comparison.
pub fn slack(bound: f64) -> f64 {
    1e-9 * bound.abs().max(1.0)
}

impl Inequality {
    pub fn le(name: &str, round: Option<u32>, lhs: f64, rhs: f64) -> Self {
        Inequality { name: name.to_string(), round, lhs, rhs, holds: lhs <= rhs + slack(rhs) }
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Keeps only the failing rows.
pub fn failures(rows: &[Inequality]) -> Vec<Inequality> {
    rows.iter().filter(|r| !r.holds).cloned().collect()
}
