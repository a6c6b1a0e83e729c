//! Layer × timestep analysis grids and the rank-based selectors over them.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// `steps × depth` matrix of a per-cell quality metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisGrid {
    pub steps: usize,
    pub depth: usize,
    pub metric: String,
    pub fingerprint: u64,
    values: Vec<f64>,
}

impl AnalysisGrid {
    pub fn new(
        steps: usize,
        depth: usize,
        metric: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != steps * depth {
            return Err(shape_err("AnalysisGrid", steps * depth, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            steps,
            depth,
            metric: metric.into(),
            fingerprint: 0,
            values,
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: u64) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    pub fn get(&self, step: usize, layer: usize) -> f64 {
        self.values[step * self.depth + layer]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-layer mean over all steps.
    pub fn layer_means(&self) -> Vec<f64> {
        (0..self.depth)
            .map(|l| (0..self.steps).map(|s| self.get(s, l)).sum::<f64>() / self.steps as f64)
            .collect()
    }

    /// Per-step mean over `layers`.
    pub fn step_curve(&self, layers: &[usize]) -> Vec<f64> {
        (0..self.steps)
            .map(|s| layers.iter().map(|&l| self.get(s, l)).sum::<f64>() / layers.len() as f64)
            .collect()
    }

    /// Elementwise map, keeping shape and labels.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        Ok(
            Self::new(self.steps, self.depth, self.metric.clone(), values)?
                .with_fingerprint(self.fingerprint),
        )
    }
}

/// Indices of the `k` best scores, ascending; equal scores prefer lower indices.
pub fn top_k(scores: &[f64], k: usize, higher_is_better: bool) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(alloc::format!(
            "k = {k} exceeds {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if higher_is_better { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Converts 0-based layer indices to the 1-based numbering of the reference model.
pub fn to_reference_numbering(layers: &[usize]) -> Vec<usize> {
    layers.iter().map(|l| l + 1).collect()
}

/// Converts 1-based reference layer numbers to 0-based indices.
pub fn from_reference_numbering(layers: &[usize]) -> Vec<usize> {
    layers.iter().map(|l| l.saturating_sub(1)).collect()
}
