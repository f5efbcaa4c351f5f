use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};

/// Spread of a per-worker quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fairness {
    /// Population variance.
    pub variance: f64,
    /// `max - min`.
    pub gap: f64,
    pub mean: f64,
}

pub fn fairness_metrics(values: &[f64]) -> Result<Fairness> {
    if values.is_empty() {
        return Err(CflError::Argument("fairness of an empty set".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(CflError::Argument(format!("non-finite value {} in fairness input", v)));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    Ok(Fairness { variance, gap: max - min, mean })
}
