use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_data, invalid_param, Result};

/// Post-activation values of one fully-connected layer: `N` samples (rows) by
/// `K` neurons (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    values: DMatrix<f64>,
    layer_id: String,
    sample_fraction: f64,
}

impl ActivationMatrix {
    pub fn new(values: DMatrix<f64>, layer_id: impl Into<String>, sample_fraction: f64) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(invalid_param(format!(
                "activation matrix needs at least 2 samples and 2 neurons, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
            return Err(invalid_param(format!("sample fraction {sample_fraction} outside (0, 1]")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(invalid_data(format!("non-finite activation at row {r}, neuron {c}")));
        }
        Ok(Self { values, layer_id: layer_id.into(), sample_fraction })
    }

    /// Builds from row-major sample vectors.
    pub fn from_rows(rows: &[Vec<f64>], layer_id: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(invalid_data("ragged activation rows"));
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]), layer_id, 1.0)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_neurons(&self) -> usize {
        self.values.ncols()
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn sample_fraction(&self) -> f64 {
        self.sample_fraction
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.values.column(k).into_owned()
    }

    /// Keeps the given rows (in the given order). The recorded sample fraction is
    /// scaled by the retained share.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(invalid_param(format!("row {bad} out of range")));
        }
        let values = self.values.select_rows(rows.iter());
        let fraction = self.sample_fraction * rows.len() as f64 / self.n_samples() as f64;
        Self::new(values, self.layer_id.clone(), fraction)
    }

    /// Seeded uniform subsample of `ceil(fraction * N)` rows (at least 2),
    /// kept in their original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid_param(format!("sample fraction must lie in (0, 1], got {fraction}")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let n = self.n_samples();
        let take = ((fraction * n as f64).ceil() as usize).clamp(2, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = rand::seq::index::sample(&mut rng, n, take).into_vec();
        rows.sort_unstable();
        self.select_rows(&rows)
    }

    /// Keeps the given neurons (columns) in the given order.
    pub fn select_neurons(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_neurons()) {
            return Err(invalid_param(format!("neuron {bad} out of range")));
        }
        Self::new(self.values.select_columns(cols.iter()), self.layer_id.clone(), self.sample_fraction)
    }
}
