//! Aggregates over trials.

use serde::Serialize;

/// Per-trial values with their mean and standard error `sd/√n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let se = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { values, mean, se }
    }
}

/// Element-wise summaries of equal-length curves, one per trial.
pub fn summarize_curves(curves: &[Vec<f64>]) -> Vec<Summary> {
    let len = curves.first().map_or(0, Vec::len);
    (0..len).map(|i| Summary::new(curves.iter().map(|c| c[i]).collect())).collect()
}

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn all_pass(gates: &[Gate]) -> bool {
    gates.iter().all(|g| g.passed)
}
