//! Per-iteration logs of optimization runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::field::PassCount;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iter: usize,
    pub t: f64,
    /// Norm of the flow residual used for the logged step.
    pub residual_norm: f64,
    /// Residual norm after the inner noise phase, where there is one.
    pub inner_residual_norm: Option<f64>,
    /// Optimized variable after the step (θ, or ε for inversion).
    pub state: Vec<f64>,
    /// Passes since the start of the run.
    pub passes: PassCount,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: serde_json::Value,
    pub rows: Vec<RunRow>,
    pub summary: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, config: serde_json::Value) -> Self {
        Self { run_id: run_id.into(), config, rows: vec![], summary: BTreeMap::new() }
    }

    pub fn push(&mut self, row: RunRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.iter < row.iter));
        self.rows.push(row);
    }

    /// Mean residual norm over the trailing `fraction` of rows (at least one).
    pub fn tail_residual(&self, fraction: f64) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).clamp(1, self.rows.len());
        let tail = &self.rows[self.rows.len() - n..];
        Some(tail.iter().map(|r| r.residual_norm).sum::<f64>() / n as f64)
    }

    /// Passes per iteration averaged over the run.
    pub fn passes_per_iter(&self) -> Option<(f64, f64)> {
        let last = self.rows.last()?;
        let n = self.rows.len() as f64;
        Some((last.passes.forwards as f64 / n, last.passes.backwards as f64 / n))
    }
}
