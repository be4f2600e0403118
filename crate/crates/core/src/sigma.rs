//! Per-neuron kernel widths.
//!
//! The layer width comes from Scott's rule with the whole layer treated as one
//! `K`-dimensional variable. Each neuron then gets the width whose Gram matrix
//! is best aligned with the layer Gram, searched over a log-spaced grid, and
//! the per-batch optima are folded with an exponential moving average.

use log::warn;
use nalgebra::{DMatrix, Dim, Dyn, Matrix, Storage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMatrix;
use crate::entropy::Alpha;
use crate::error::{invalid_param, Error, Result};
use crate::gram::{rbf_gram, NormalizedGram};

/// Scott's rule bandwidth `gamma * N^(-1/(4+d))`.
pub fn scott_sigma(n: usize, d: usize, gamma: f64) -> Result<f64> {
    if n < 2 {
        return Err(invalid_param(format!("Scott's rule needs N >= 2, got {n}")));
    }
    if d < 1 {
        return Err(invalid_param("Scott's rule needs d >= 1"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid_param(format!("gamma must be positive, got {gamma}")));
    }
    Ok(gamma * (n as f64).powf(-1.0 / (4.0 + d as f64)))
}

/// Kernel alignment: normalized Frobenius inner product of two Gram matrices.
pub fn alignment(k1: &NormalizedGram, k2: &NormalizedGram) -> Result<f64> {
    if k1.size() != k2.size() {
        return Err(invalid_param(format!("Gram size mismatch: {} vs {}", k1.size(), k2.size())));
    }
    let inner = k1.matrix().dot(k2.matrix());
    let norms = k1.matrix().norm() * k2.matrix().norm();
    if !(norms > 0.0) {
        return Err(Error::Numerical("alignment of a zero-norm kernel matrix".into()));
    }
    Ok(inner / norms)
}

/// `beta * prev + (1 - beta) * current_opt`.
pub fn ema_update(prev: f64, current_opt: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid_param(format!("EMA coefficient must lie in [0, 1], got {beta}")));
    }
    Ok(beta * prev + (1.0 - beta) * current_opt)
}

/// Log-spaced candidate widths spanning `[low * s, high * s]`, where `s` is
/// the one-dimensional Scott width of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub low: f64,
    pub high: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 50, low: 0.1, high: 10.0 }
    }
}

impl GridSpec {
    pub fn build(&self, scale: f64) -> Result<Vec<f64>> {
        if self.points == 0 {
            return Err(invalid_param("sigma grid must have at least one point"));
        }
        if !(self.low > 0.0 && self.high >= self.low) || !(scale > 0.0) {
            return Err(invalid_param(format!(
                "invalid sigma grid [{}, {}] x {scale}",
                self.low, self.high
            )));
        }
        if self.points == 1 {
            return Ok(vec![self.low * scale]);
        }
        let (lo, hi) = (self.low.ln(), self.high.ln());
        let step = (hi - lo) / (self.points - 1) as f64;
        Ok((0..self.points).map(|i| (lo + step * i as f64).exp() * scale).collect())
    }
}

/// Outcome of the alignment search for one neuron in one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridChoice {
    pub sigma: f64,
    pub alignment: f64,
    /// Position in the ascending grid.
    pub index: usize,
    pub grid_len: usize,
}

impl GridChoice {
    /// The optimum sits on the edge of the search range.
    pub fn at_endpoint(&self) -> bool {
        self.index == 0 || self.index + 1 == self.grid_len
    }
}

/// Picks the grid width whose Gram matrix of `column` best aligns with
/// `layer_gram`; ties go to the smaller width.
pub fn tune_neuron_sigma<C, S>(
    column: &Matrix<f64, Dyn, C, S>,
    layer_gram: &NormalizedGram,
    grid: &[f64],
) -> Result<GridChoice>
where
    C: Dim,
    S: Storage<f64, Dyn, C>,
{
    if grid.is_empty() {
        return Err(invalid_param("empty sigma grid"));
    }
    if grid.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid_param("sigma grid values must be positive and finite"));
    }
    let n = column.nrows();
    if n != layer_gram.size() {
        return Err(invalid_param(format!("column has {n} samples, layer Gram is {}", layer_gram.size())));
    }
    if n < 2 {
        return Err(invalid_param("need at least 2 samples"));
    }
    if column.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("column contains non-finite values".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);

    // Pairwise squared distances are shared by every candidate width; the
    // alignment is scale-free so the unnormalized kernel is used directly.
    let layer = layer_gram.matrix();
    let layer_norm = layer.norm();
    if !(layer_norm > 0.0) {
        return Err(Error::Numerical("layer Gram has zero norm".into()));
    }
    let mut sq = Vec::with_capacity(n * (n - 1) / 2);
    let mut layer_upper = Vec::with_capacity(n * (n - 1) / 2);
    let mut layer_diag = 0.0;
    for j in 0..n {
        layer_diag += layer[(j, j)];
        for i in (j + 1)..n {
            let mut d2 = 0.0;
            for c in 0..column.ncols() {
                let delta = column[(i, c)] - column[(j, c)];
                d2 += delta * delta;
            }
            sq.push(d2);
            layer_upper.push(layer[(i, j)]);
        }
    }

    let mut best: Option<GridChoice> = None;
    for (index, &sigma) in sorted.iter().enumerate() {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut inner_off = 0.0;
        let mut norm_off = 0.0;
        for (&d2, &l) in sq.iter().zip(&layer_upper) {
            let k = (-d2 * inv).exp();
            inner_off += k * l;
            norm_off += k * k;
        }
        let inner = layer_diag + 2.0 * inner_off;
        let norm = (n as f64 + 2.0 * norm_off).sqrt();
        let value = inner / (norm * layer_norm);
        if best.is_none_or(|b| value > b.alignment) {
            best = Some(GridChoice { sigma, alignment: value, index, grid_len: sorted.len() });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Tuning constants for [`tune_all`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub gamma: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub grid: GridSpec,
    pub seed: u64,
    pub alpha: Alpha,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self { gamma: 1.0, beta: 0.9, batch_size: 100, grid: GridSpec::default(), seed: 0, alpha: Alpha::DEFAULT }
    }
}

/// Tuned kernel widths for every neuron of a layer, with the constants that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub layer_sigma: f64,
    pub neuron_sigmas: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: Alpha,
    pub batch_size: usize,
    pub grid: Vec<f64>,
    /// Number of (neuron, batch) searches whose optimum hit a grid edge.
    #[serde(default)]
    pub endpoint_hits: usize,
}

impl SigmaSchedule {
    /// Same width for every neuron; no tuning involved.
    pub fn uniform(k: usize, sigma: f64) -> Self {
        Self::from_neuron_sigmas(vec![sigma; k])
    }

    pub fn from_neuron_sigmas(neuron_sigmas: Vec<f64>) -> Self {
        let layer_sigma = neuron_sigmas.first().copied().unwrap_or(1.0);
        Self {
            layer_sigma,
            neuron_sigmas,
            gamma: 1.0,
            beta: 0.0,
            alpha: Alpha::DEFAULT,
            batch_size: 0,
            grid: Vec::new(),
            endpoint_hits: 0,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.neuron_sigmas.len() != k {
            return Err(invalid_param(format!(
                "sigma schedule covers {} neurons, layer has {k}",
                self.neuron_sigmas.len()
            )));
        }
        if let Some(bad) = self.neuron_sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(invalid_param(format!("kernel width {bad} is not positive and finite")));
        }
        Ok(())
    }
}

/// Row batches used for tuning: a seeded shuffle sliced into consecutive full
/// batches (a trailing partial batch is dropped). Falls back to one batch of
/// every row when `N < batch_size`.
pub fn tuning_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(invalid_param(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < batch_size {
        warn!("only {n} samples for batch size {batch_size}; tuning on a single batch");
        return Ok(vec![order]);
    }
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Tunes a kernel width for every neuron of `x`.
pub fn tune_all(x: &ActivationMatrix, config: &TuningConfig) -> Result<SigmaSchedule> {
    let batches = tuning_batches(x.n_samples(), config.batch_size, config.seed)?;
    tune_on_batches(x, &batches, config)
}

/// Runs the per-batch search on explicit row batches, folding the optima in
/// batch order. `config.batch_size` and `config.seed` are only recorded.
pub fn tune_on_batches(x: &ActivationMatrix, batches: &[Vec<usize>], config: &TuningConfig) -> Result<SigmaSchedule> {
    if !(0.0..=1.0).contains(&config.beta) {
        return Err(invalid_param(format!("EMA coefficient must lie in [0, 1], got {}", config.beta)));
    }
    if batches.is_empty() {
        return Err(invalid_param("no tuning batches"));
    }
    if let Some(&bad) = batches.iter().flatten().find(|&&r| r >= x.n_samples()) {
        return Err(invalid_param(format!("batch row {bad} out of range")));
    }
    let k = x.n_neurons();

    let mut sigmas: Option<Vec<f64>> = None;
    let mut endpoint_hits = 0;
    let mut layer_sigma = 0.0;
    let mut grid = Vec::new();
    for rows in batches {
        let block: DMatrix<f64> = x.values().select_rows(rows.iter());
        let n_b = block.nrows();
        layer_sigma = scott_sigma(n_b, k, config.gamma)?;
        let layer_gram = rbf_gram(&block, layer_sigma)?;
        grid = config.grid.build(scott_sigma(n_b, 1, config.gamma)?)?;

        let mut optimum = Vec::with_capacity(k);
        for neuron in 0..k {
            let choice = tune_neuron_sigma(&block.column(neuron), &layer_gram, &grid)?;
            if choice.at_endpoint() {
                endpoint_hits += 1;
            }
            optimum.push(choice.sigma);
        }
        sigmas = Some(match sigmas {
            None => optimum,
            Some(prev) => prev
                .iter()
                .zip(&optimum)
                .map(|(&p, &c)| ema_update(p, c, config.beta))
                .collect::<Result<_>>()?,
        });
    }
    if endpoint_hits > 0 {
        warn!(
            "{endpoint_hits} of {} width searches ended on a grid edge; consider widening the grid",
            k * batches.len()
        );
    }

    Ok(SigmaSchedule {
        layer_sigma,
        neuron_sigmas: sigmas.expect("at least one batch"),
        gamma: config.gamma,
        beta: config.beta,
        alpha: config.alpha,
        batch_size: config.batch_size,
        grid,
        endpoint_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn scott_rule_values() {
        assert_abs_diff_eq!(scott_sigma(100, 1, 1.0).unwrap(), 0.39811, epsilon = 1e-5);
        assert_abs_diff_eq!(scott_sigma(100, 512, 1.0).unwrap(), 0.99112, epsilon = 1e-5);
        assert_eq!(scott_sigma(100, 3, 2.0).unwrap(), 2.0 * scott_sigma(100, 3, 1.0).unwrap());
        assert!(scott_sigma(1, 1, 1.0).is_err());
        assert!(scott_sigma(10, 0, 1.0).is_err());
        assert!(scott_sigma(10, 1, 0.0).is_err());
    }

    #[test]
    fn alignment_basics() {
        let x = DVector::from_column_slice(&[0.0, 0.4, 1.1, -0.3]);
        let g = rbf_gram(&x, 0.5).unwrap();
        assert_abs_diff_eq!(alignment(&g, &g).unwrap(), 1.0, epsilon = 1e-12);

        // <J, I> = 4, ||J|| = 4, ||I|| = 2
        let ones = NormalizedGram::from_kernel(DMatrix::from_element(4, 4, 1.0)).unwrap();
        let eye = NormalizedGram::from_kernel(DMatrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!(alignment(&ones, &eye).unwrap(), 0.5, epsilon = 1e-12);

        let h = rbf_gram(&x, 2.0).unwrap();
        assert_eq!(alignment(&g, &h).unwrap(), alignment(&h, &g).unwrap());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(1.0, 2.0, 0.5).unwrap(), 1.5);
        assert_eq!(ema_update(1.0, 2.0, 1.0).unwrap(), 1.0);
        assert_eq!(ema_update(1.0, 2.0, 0.0).unwrap(), 2.0);
        assert!(ema_update(1.0, 2.0, 1.5).is_err());
        assert!(ema_update(1.0, 2.0, -0.1).is_err());
    }

    #[test]
    fn grid_is_log_spaced_and_closed() {
        let g = GridSpec::default().build(2.0).unwrap();
        assert_eq!(g.len(), 50);
        assert_abs_diff_eq!(g[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[49], 20.0, epsilon = 1e-10);
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn fast_search_agrees_with_explicit_alignment() {
        let x = gaussian_matrix(40, 5, 3);
        let layer = rbf_gram(&x, 2.0).unwrap();
        let grid = GridSpec::default().build(0.5).unwrap();
        let choice = tune_neuron_sigma(&x.column(2), &layer, &grid).unwrap();
        let explicit: Vec<f64> = grid
            .iter()
            .map(|&s| alignment(&rbf_gram(&x.column(2), s).unwrap(), &layer).unwrap())
            .collect();
        let best = explicit.iter().cloned().fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(choice.alignment, best, epsilon = 1e-12);
        assert_abs_diff_eq!(explicit[choice.index], best, epsilon = 1e-12);
    }

    #[test]
    fn single_neuron_layer_recovers_its_own_width() {
        let x = gaussian_matrix(60, 1, 9);
        let layer_sigma = 0.37;
        let layer = rbf_gram(&x, layer_sigma).unwrap();
        let grid = GridSpec::default().build(0.4).unwrap();
        let choice = tune_neuron_sigma(&x.column(0), &layer, &grid).unwrap();
        let nearest = grid
            .iter()
            .cloned()
            .min_by(|a, b| (a.ln() - layer_sigma.ln()).abs().total_cmp(&(b.ln() - layer_sigma.ln()).abs()))
            .unwrap();
        assert_eq!(choice.sigma, nearest);
    }

    #[test]
    fn ties_go_to_smaller_width() {
        // A constant column produces the same Gram for every width.
        let col = DVector::from_element(10, 1.5);
        let layer = rbf_gram(&gaussian_matrix(10, 3, 1), 1.0).unwrap();
        let choice = tune_neuron_sigma(&col, &layer, &[3.0, 0.5, 1.0]).unwrap();
        assert_eq!(choice.sigma, 0.5);
        assert!(tune_neuron_sigma(&col, &layer, &[]).is_err());
    }

    #[test]
    fn iid_gaussian_layer_pushes_optimum_to_lower_edge() {
        // 16 independent unit-variance neurons, 100 samples: the layer width
        // from Scott's rule (about 0.79) is tiny next to typical 16-d squared
        // distances (about 32), so the layer Gram is numerically the identity
        // and alignment keeps growing as the neuron width shrinks. The search
        // therefore lands on the lower grid edge, which `at_endpoint` flags.
        for seed in 0..5 {
            let x = gaussian_matrix(100, 16, seed);
            let layer = rbf_gram(&x, scott_sigma(100, 16, 1.0).unwrap()).unwrap();
            let grid = GridSpec::default().build(scott_sigma(100, 1, 1.0).unwrap()).unwrap();
            let curve: Vec<f64> = grid
                .iter()
                .map(|&s| alignment(&rbf_gram(&x.column(0), s).unwrap(), &layer).unwrap())
                .collect();
            assert!(curve.windows(2).all(|w| w[0] >= w[1]), "curve not monotone for seed {seed}");
            let choice = tune_neuron_sigma(&x.column(0), &layer, &grid).unwrap();
            assert_eq!(choice.index, 0);
            assert!(choice.at_endpoint());
        }
    }

    #[test]
    fn low_rank_layer_has_interior_optimum() {
        // Neurons that are noisy copies of two latent factors: the layer Gram
        // carries real neighbourhood structure and the search settles inside
        // the grid.
        let latent = gaussian_matrix(100, 2, 21);
        let noise = gaussian_matrix(100, 16, 22);
        let x = DMatrix::from_fn(100, 16, |i, j| 0.15 * latent[(i, j % 2)] + 0.01 * noise[(i, j)]);
        let layer = rbf_gram(&x, scott_sigma(100, 16, 1.0).unwrap()).unwrap();
        let grid = GridSpec::default().build(scott_sigma(100, 1, 1.0).unwrap()).unwrap();
        let choice = tune_neuron_sigma(&x.column(0), &layer, &grid).unwrap();
        assert!(!choice.at_endpoint(), "{choice:?}");
    }

    fn activations(values: DMatrix<f64>) -> ActivationMatrix {
        ActivationMatrix::new(values, "t", 1.0).unwrap()
    }

    #[test]
    fn single_batch_equals_per_batch_optimum() {
        let x = activations(gaussian_matrix(100, 4, 5));
        let cfg = TuningConfig { beta: 0.3, ..TuningConfig::default() };
        let sched = tune_all(&x, &cfg).unwrap();
        let rows = &tuning_batches(100, 100, cfg.seed).unwrap()[0];
        let block = x.values().select_rows(rows.iter());
        let layer = rbf_gram(&block, scott_sigma(100, 4, 1.0).unwrap()).unwrap();
        for k in 0..4 {
            let c = tune_neuron_sigma(&block.column(k), &layer, &sched.grid).unwrap();
            assert_eq!(sched.neuron_sigmas[k], c.sigma);
        }
        assert_eq!(sched.layer_sigma, scott_sigma(100, 4, 1.0).unwrap());
    }

    #[test]
    fn identical_batches_are_an_ema_fixed_point() {
        let x = activations(gaussian_matrix(80, 3, 8));
        let rows: Vec<usize> = (0..50).collect();
        let cfg = TuningConfig { batch_size: 50, beta: 0.7, ..Default::default() };
        let single = tune_on_batches(&x, &[rows.clone()], &cfg).unwrap();
        let twice = tune_on_batches(&x, &[rows.clone(), rows], &cfg).unwrap();
        for (a, b) in single.neuron_sigmas.iter().zip(&twice.neuron_sigmas) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn duplicated_columns_share_a_width() {
        let mut m = gaussian_matrix(200, 4, 13);
        let dup = m.column(1).into_owned();
        m.set_column(3, &dup);
        let sched = tune_all(&activations(m), &TuningConfig::default()).unwrap();
        assert_eq!(sched.neuron_sigmas[1], sched.neuron_sigmas[3]);
    }

    #[test]
    fn small_input_falls_back_to_one_batch() {
        let x = activations(gaussian_matrix(30, 3, 2));
        let sched = tune_all(&x, &TuningConfig::default()).unwrap();
        assert_eq!(sched.layer_sigma, scott_sigma(30, 3, 1.0).unwrap());
        assert_eq!(tuning_batches(30, 100, 0).unwrap().len(), 1);
    }

    #[test]
    fn tune_all_is_deterministic_and_in_range() {
        let x = activations(gaussian_matrix(250, 5, 4));
        let cfg = TuningConfig { seed: 77, ..Default::default() };
        let a = tune_all(&x, &cfg).unwrap();
        assert_eq!(a, tune_all(&x, &cfg).unwrap());
        let (lo, hi) = (a.grid[0], *a.grid.last().unwrap());
        assert!(a.neuron_sigmas.iter().all(|&s| s >= lo && s <= hi));
        assert_eq!(tuning_batches(250, 100, 77).unwrap().len(), 2);
    }

    #[test]
    fn neuron_permutation_is_equivariant() {
        let m = gaussian_matrix(120, 5, 6);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = m.select_columns(perm.iter());
        let cfg = TuningConfig::default();
        let a = tune_all(&activations(m), &cfg).unwrap();
        let b = tune_all(&activations(permuted), &cfg).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.neuron_sigmas[i], a.neuron_sigmas[p]);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(SigmaSchedule::uniform(3, 1.0).validate(3).is_ok());
        assert!(SigmaSchedule::uniform(2, 1.0).validate(3).is_err());
        assert!(SigmaSchedule::uniform(3, 0.0).validate(3).is_err());
    }
}
