//! Rectified activations (ReAct): clamp penultimate activations above the
//! p-th percentile of the pooled ID training activations.

use serde::{Deserialize, Serialize};

use super::ScoreError;
use crate::metrics::linear_quantile;

/// Fitted clamp limit. `clamp` is the linear-interpolation percentile of all
/// scalar entries of all training embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReactState {
    pub clamp: f64,
    pub percentile: f64,
    pub fitted_on: usize,
}

impl ReactState {
    /// Clamp at +∞: applying it is the identity (useful as a control).
    pub fn unbounded() -> Self {
        ReactState { clamp: f64::INFINITY, percentile: 100.0, fitted_on: 0 }
    }

    /// Element-wise min(value, clamp); order-preserving and idempotent.
    pub fn apply(&self, embedding: &[f64]) -> Vec<f64> {
        embedding.iter().map(|&v| v.min(self.clamp)).collect()
    }
}

/// Pool every activation of every training embedding and take the p-th
/// linear-interpolation percentile as the clamp limit.
pub fn react_fit(train_embeddings: &[Vec<f64>], percentile: f64) -> Result<ReactState, ScoreError> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(ScoreError::Config("react percentile must lie in (0, 100]".into()));
    }
    let mut pooled: Vec<f64> = train_embeddings.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(ScoreError::EmptyFit);
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::Config("non-finite activation".into()));
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let clamp = linear_quantile(&pooled, percentile);
    Ok(ReactState { clamp, percentile, fitted_on: pooled.len() })
}
