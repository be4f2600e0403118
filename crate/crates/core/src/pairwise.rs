//! Randomized pairwise redundancy filtering and the unsupervised baselines.
//!
//! The filter repeatedly draws two surviving neurons, scores the pair, and
//! switches off the second-drawn neuron when the score reaches the threshold.
//!
//! Draw protocol (per iteration, with `s` survivors kept in ascending index
//! order): `i = rng.random_range(0..s)`, `j = rng.random_range(0..s - 1)`,
//! and `j += 1` when `j >= i`. The pair is `(survivors[i], survivors[j])`.
//! The generator is `ChaCha8Rng::seed_from_u64(seed)`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::ActivationMatrix;
use crate::entropy::{Alpha, GramCache};
use crate::error::{invalid_param, Result};
use crate::mask::{PruneMask, PruneMethod};
use crate::sigma::SigmaSchedule;

/// `ceil(10 K ln K)`, at least 1.
pub fn default_max_itr(k: usize) -> usize {
    if k < 2 {
        return 1;
    }
    ((10.0 * k as f64 * (k as f64).ln()).ceil() as usize).max(1)
}

/// Survivors of the pairwise filter and the number of iterations run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub keep: Vec<bool>,
    pub iterations_used: usize,
}

/// The pairwise filter over an arbitrary symmetric redundancy score.
///
/// `score` is called at most once per unordered pair.
pub fn redundancy_filter<F>(k: usize, threshold: f64, max_itr: usize, seed: u64, mut score: F) -> Result<FilterOutcome>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if k == 0 {
        return Err(invalid_param("no neurons to filter"));
    }
    if max_itr == 0 {
        return Err(invalid_param("max_itr must be at least 1"));
    }
    if threshold.is_nan() {
        return Err(invalid_param("threshold is NaN"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut survivors: Vec<usize> = (0..k).collect();
    let mut memo: HashMap<(usize, usize), f64> = HashMap::new();
    let mut iterations_used = 0;

    for _ in 0..max_itr {
        let s = survivors.len();
        if s < 2 {
            break;
        }
        iterations_used += 1;
        let i = rng.random_range(0..s);
        let mut j = rng.random_range(0..s - 1);
        if j >= i {
            j += 1;
        }
        let (first, second) = (survivors[i], survivors[j]);
        let key = (first.min(second), first.max(second));
        let value = match memo.get(&key) {
            Some(&v) => v,
            None => {
                let v = score(first, second)?;
                memo.insert(key, v);
                v
            }
        };
        if value >= threshold {
            survivors.remove(j);
        }
    }

    let mut keep = vec![false; k];
    for s in survivors {
        keep[s] = true;
    }
    Ok(FilterOutcome { keep, iterations_used })
}

/// Pairwise MI pruning: drops the second neuron of any sampled pair whose
/// mutual information is at least `threshold_bits`.
pub fn prune_pairwise(
    x: &ActivationMatrix,
    sigmas: &SigmaSchedule,
    alpha: Alpha,
    threshold_bits: f64,
    max_itr: Option<usize>,
    seed: u64,
) -> Result<PruneMask> {
    if !(threshold_bits > 0.0) {
        return Err(invalid_param(format!("threshold must be positive, got {threshold_bits}")));
    }
    sigmas.validate(x.n_neurons())?;
    let k = x.n_neurons();
    let max_itr = max_itr.unwrap_or_else(|| default_max_itr(k));
    let mut cache = GramCache::new(x.values().clone(), &sigmas.neuron_sigmas, alpha);
    let outcome = redundancy_filter(k, threshold_bits, max_itr, seed, |a, b| cache.mutual_information(a, b))?;
    finish(outcome, PruneMethod::PairwiseMi, seed, threshold_bits)
}

/// Same control flow as [`prune_pairwise`] with |Pearson correlation| as the
/// redundancy score.
pub fn prune_pcc(x: &ActivationMatrix, threshold: f64, max_itr: Option<usize>, seed: u64) -> Result<PruneMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid_param(format!("correlation threshold must lie in (0, 1), got {threshold}")));
    }
    let k = x.n_neurons();
    let max_itr = max_itr.unwrap_or_else(|| default_max_itr(k));
    let values = x.values();
    let outcome = redundancy_filter(k, threshold, max_itr, seed, |a, b| {
        Ok(pearson(values.column(a).as_slice(), values.column(b).as_slice()).abs())
    })?;
    finish(outcome, PruneMethod::PairwisePcc, seed, threshold)
}

fn finish(outcome: FilterOutcome, method: PruneMethod, seed: u64, threshold: f64) -> Result<PruneMask> {
    let mut mask = PruneMask::new(outcome.keep, method, seed)?;
    mask.threshold = Some(threshold);
    mask.iterations_used = outcome.iterations_used;
    Ok(mask)
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let mean = |v: &[f64]| v[..n].iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Full |Pearson| matrix over the neurons of `x` (diagonal 1).
pub fn pcc_matrix(x: &ActivationMatrix) -> DMatrix<f64> {
    let k = x.n_neurons();
    let v = x.values();
    let mut out = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let r = pearson(v.column(i).as_slice(), v.column(j).as_slice()).abs();
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    out
}

fn check_budget(k: usize, keep: usize) -> Result<()> {
    if keep < 1 || keep > k {
        return Err(invalid_param(format!("neuron budget {keep} outside [1, {k}]")));
    }
    Ok(())
}

/// Keeps a uniformly random subset of `keep` neurons.
pub fn prune_random(k: usize, keep: usize, seed: u64) -> Result<PruneMask> {
    check_budget(k, keep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; k];
    for i in rand::seq::index::sample(&mut rng, k, keep) {
        mask[i] = true;
    }
    let mut out = PruneMask::new(mask, PruneMethod::Random, seed)?;
    out.target_keep = Some(keep);
    Ok(out)
}

/// Keeps the `keep` neurons with the largest L1 norm of outgoing weights
/// (`weights` has one row per neuron). Ties go to the lower index.
pub fn prune_weight_magnitude(weights: &DMatrix<f64>, keep: usize) -> Result<PruneMask> {
    let k = weights.nrows();
    check_budget(k, keep)?;
    let norms: Vec<f64> = weights.row_iter().map(|r| r.iter().map(|w| w.abs()).sum()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut mask = vec![false; k];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    let mut out = PruneMask::new(mask, PruneMethod::WeightMagnitude, 0)?;
    out.target_keep = Some(keep);
    Ok(out)
}
