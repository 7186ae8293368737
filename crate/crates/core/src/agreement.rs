//! Trimmed-midpoint approximate agreement.

use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgreementError {
    #[error("insufficient data: only {finite} finite values, {needed} needed")]
    InsufficientData { finite: usize, needed: usize },
    #[error("{n} values cannot tolerate {f} faults")]
    TooFewValues { n: usize, f: usize },
}

/// What a receiver records for a sender it heard nothing from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingValue {
    /// `+inf`, trimmed away from the top (round protocols).
    Infinity,
    /// The receiver's own value (standalone agreement step).
    OwnValue,
}

fn ascending(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("agreement values are never NaN")
}

/// Midpoint of the `(f+1)`-th and `(n-f)`-th smallest values; `+inf` sorts last.
pub fn select_midpoint(values: &[f64], f: usize) -> Result<f64, AgreementError> {
    let n = values.len();
    if n < 3 * f + 1 {
        return Err(AgreementError::TooFewValues { n, f });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(ascending);
    let lo = sorted[f];
    let hi = sorted[n - f - 1];
    if hi == f64::INFINITY {
        let finite = sorted.iter().filter(|x| x.is_finite()).count();
        return Err(AgreementError::InsufficientData { finite, needed: n - f });
    }
    Ok((lo + hi) / 2.0)
}

/// Fills a receiver's view of all `n` senders.
pub fn perceived(received: &[Option<f64>], own: f64, missing: MissingValue) -> Vec<f64> {
    received
        .iter()
        .map(|x| match (x, missing) {
            (Some(x), _) => *x,
            (None, MissingValue::Infinity) => f64::INFINITY,
            (None, MissingValue::OwnValue) => own,
        })
        .collect()
}

/// One synchronous agreement step observed from every correct node.
///
/// `inputs[v]` is `Some(x_v)` for correct nodes and `None` for faulty ones.
/// `views[v][w]` is what correct node `v` received from `w`.
#[derive(Debug, Clone)]
pub struct AgreementStep {
    pub f: usize,
    pub delta: f64,
    pub inputs: Vec<Option<f64>>,
    pub views: Vec<Vec<Option<f64>>>,
}

impl AgreementStep {
    pub fn run(&self, missing: MissingValue) -> Result<Vec<Option<f64>>, AgreementError> {
        self.inputs
            .iter()
            .zip(&self.views)
            .map(|(input, view)| match input {
                Some(x) => select_midpoint(&perceived(view, *x, missing), self.f).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    pub fn correct_inputs(&self) -> impl Iterator<Item = f64> + '_ {
        self.inputs.iter().flatten().copied()
    }
}

/// `max - min` of a finite sample; zero when empty.
pub fn diameter(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = xs
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}
