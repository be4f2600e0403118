//! Matrix-based Rényi α-order entropy and the mutual information built on it.
//!
//! For a normalized Gram matrix `A` with eigenvalues `λ_i`,
//! `S_α(A) = log2(Σ λ_i^α) / (1 - α)`. The joint entropy of two variables uses
//! the trace-normalized Hadamard product of their Gram matrices, and
//! `I(Z_k; Z_l) = S_α(A) + S_α(B) - S_α(A, B)`. All values are in bits.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Dim, Dyn, Matrix, Storage};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMatrix;
use crate::error::{invalid_param, Error, Result};
use crate::gram::{hadamard_joint, rbf_gram, sym_eigenvalues, NormalizedGram};
use crate::sigma::SigmaSchedule;

/// Order of the Rényi entropy. Must be positive and different from 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const DEFAULT: Alpha = Alpha(1.01);

    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(invalid_param(format!("alpha must be positive and finite, got {value}")));
        }
        if value == 1.0 {
            return Err(invalid_param("alpha = 1 is the Shannon limit and is not supported; use e.g. 1.01"));
        }
        Ok(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Alpha {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Alpha::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

/// Rényi entropy of a probability spectrum, in bits.
pub fn spectrum_entropy(spectrum: &[f64], alpha: Alpha) -> f64 {
    let a = alpha.get();
    let power_sum: f64 = spectrum.iter().filter(|&&l| l > 0.0).map(|&l| l.powf(a)).sum();
    // Rounding in the spectrum can push the sum just outside the range that is
    // exact for a probability vector, which would give entropies like -1e-13.
    let n = spectrum.len().max(1) as f64;
    let edge = n.powf(1.0 - a);
    let power_sum = if a > 1.0 { power_sum.clamp(edge, 1.0) } else { power_sum.clamp(1.0, edge) };
    power_sum.log2() / (1.0 - a)
}

pub fn renyi_entropy(g: &NormalizedGram, alpha: Alpha) -> Result<f64> {
    Ok(spectrum_entropy(&sym_eigenvalues(g)?, alpha))
}

pub fn joint_entropy(a: &NormalizedGram, b: &NormalizedGram, alpha: Alpha) -> Result<f64> {
    renyi_entropy(&hadamard_joint(a, b)?, alpha)
}

/// Mutual information between two neurons, each with its own kernel width.
///
/// Small negative values can come out of the estimator and are returned as-is.
pub fn mutual_information<C1, S1, C2, S2>(
    zk: &Matrix<f64, Dyn, C1, S1>,
    zl: &Matrix<f64, Dyn, C2, S2>,
    sigma_k: f64,
    sigma_l: f64,
    alpha: Alpha,
) -> Result<f64>
where
    C1: Dim,
    S1: Storage<f64, Dyn, C1>,
    C2: Dim,
    S2: Storage<f64, Dyn, C2>,
{
    if zk.nrows() != zl.nrows() {
        return Err(invalid_param(format!("sample count mismatch: {} vs {}", zk.nrows(), zl.nrows())));
    }
    let a = rbf_gram(zk, sigma_k)?;
    let b = rbf_gram(zl, sigma_l)?;
    Ok(renyi_entropy(&a, alpha)? + renyi_entropy(&b, alpha)? - joint_entropy(&a, &b, alpha)?)
}

/// Pairwise mutual-information estimates for the neurons of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MiMatrix {
    values: DMatrix<f64>,
    alpha: Alpha,
    computed: BTreeSet<(usize, usize)>,
}

fn ordered(k: usize, l: usize) -> (usize, usize) {
    if k <= l {
        (k, l)
    } else {
        (l, k)
    }
}

impl MiMatrix {
    /// An empty matrix over `k` neurons with no computed pairs.
    pub fn empty(k: usize, alpha: Alpha) -> Self {
        Self { values: DMatrix::zeros(k, k), alpha, computed: BTreeSet::new() }
    }

    /// Builds a fully populated matrix from a symmetric array of values.
    pub fn from_full(values: DMatrix<f64>, alpha: Alpha) -> Result<Self> {
        let k = values.nrows();
        if values.ncols() != k {
            return Err(invalid_param("MI matrix must be square"));
        }
        let mut m = Self::empty(k, alpha);
        for i in 0..k {
            for j in (i + 1)..k {
                if values[(i, j)] != values[(j, i)] || !values[(i, j)].is_finite() {
                    return Err(Error::InvalidData(format!("MI entries ({i},{j}) not symmetric and finite")));
                }
                m.set(i, j, values[(i, j)]);
            }
        }
        Ok(m)
    }

    pub fn n_neurons(&self) -> usize {
        self.values.nrows()
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn get(&self, k: usize, l: usize) -> Option<f64> {
        self.computed.contains(&ordered(k, l)).then(|| self.values[(k, l)])
    }

    pub fn set(&mut self, k: usize, l: usize, value: f64) {
        self.values[(k, l)] = value;
        self.values[(l, k)] = value;
        self.computed.insert(ordered(k, l));
    }

    /// Computed pairs as `(k, l)` with `k <= l`.
    pub fn computed_pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.computed
    }

    /// True when every unordered off-diagonal pair has an estimate.
    pub fn is_complete(&self) -> bool {
        let k = self.n_neurons();
        (0..k).all(|i| ((i + 1)..k).all(|j| self.computed.contains(&(i, j))))
    }

    /// Raw value storage; entries of uncomputed pairs are zero.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// The off-diagonal pair with the largest estimate, ties toward the
    /// lexicographically smallest pair.
    pub fn argmax_pair(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for &(k, l) in &self.computed {
            if k == l {
                continue;
            }
            let v = self.values[(k, l)];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((k, l), v));
            }
        }
        best.map(|(p, _)| p)
    }
}

/// Every unordered pair `(k, l)` with `k < l`.
pub fn all_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect()
}

/// Lazily built per-neuron Gram matrices and marginal entropies for one block
/// of rows; shared by the pairwise pruner and the MI matrix builder.
pub(crate) struct GramCache<'a> {
    block: DMatrix<f64>,
    sigmas: &'a [f64],
    alpha: Alpha,
    grams: Vec<Option<(NormalizedGram, f64)>>,
}

impl<'a> GramCache<'a> {
    pub(crate) fn new(block: DMatrix<f64>, sigmas: &'a [f64], alpha: Alpha) -> Self {
        let k = block.ncols();
        Self { block, sigmas, alpha, grams: (0..k).map(|_| None).collect() }
    }

    fn ensure(&mut self, k: usize) -> Result<()> {
        if self.grams[k].is_none() {
            let sigma = *self
                .sigmas
                .get(k)
                .ok_or_else(|| invalid_param(format!("no kernel width for neuron {k}")))?;
            let g = rbf_gram(&self.block.column(k), sigma)?;
            let h = renyi_entropy(&g, self.alpha)?;
            self.grams[k] = Some((g, h));
        }
        Ok(())
    }

    pub(crate) fn mutual_information(&mut self, k: usize, l: usize) -> Result<f64> {
        self.ensure(k)?;
        self.ensure(l)?;
        let (ga, ha) = self.grams[k].as_ref().expect("ensured");
        let (gb, hb) = self.grams[l].as_ref().expect("ensured");
        Ok(ha + hb - joint_entropy(ga, gb, self.alpha)?)
    }
}

fn validate_pairs(k: usize, pairs: &[(usize, usize)]) -> Result<()> {
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= k || b >= k) {
        return Err(invalid_param(format!("pair ({a}, {b}) out of range for {k} neurons")));
    }
    Ok(())
}

/// Mutual information for the requested pairs (default: all unordered pairs)
/// using every row of `x`.
pub fn mi_matrix(
    x: &ActivationMatrix,
    sigmas: &SigmaSchedule,
    alpha: Alpha,
    pairs: Option<&[(usize, usize)]>,
) -> Result<MiMatrix> {
    mi_matrix_batched(x, sigmas, alpha, pairs, x.n_samples())
}

/// Like [`mi_matrix`], but estimates each pair on consecutive row blocks of
/// `batch_size` and averages the per-block estimates. A trailing partial
/// block is dropped unless it is the only block.
pub fn mi_matrix_batched(
    x: &ActivationMatrix,
    sigmas: &SigmaSchedule,
    alpha: Alpha,
    pairs: Option<&[(usize, usize)]>,
    batch_size: usize,
) -> Result<MiMatrix> {
    let k = x.n_neurons();
    let owned;
    let pairs = match pairs {
        Some(p) => p,
        None => {
            owned = all_pairs(k);
            &owned
        }
    };
    validate_pairs(k, pairs)?;
    let mut out = MiMatrix::empty(k, alpha);
    if pairs.is_empty() {
        return Ok(out);
    }
    for &(a, b) in pairs {
        for n in [a, b] {
            if n >= sigmas.neuron_sigmas.len() {
                return Err(invalid_param(format!("no kernel width for neuron {n}")));
            }
        }
    }
    if batch_size < 2 {
        return Err(invalid_param("MI batch size must be at least 2"));
    }

    let n = x.n_samples();
    let blocks = row_blocks(n, batch_size);
    let mut sums = vec![0.0; pairs.len()];
    for range in &blocks {
        let block = x.values().rows(range.start, range.len()).into_owned();
        let mut cache = GramCache::new(block, &sigmas.neuron_sigmas, alpha);
        for (acc, &(a, b)) in sums.iter_mut().zip(pairs) {
            *acc += cache.mutual_information(a, b)?;
        }
    }
    for (sum, &(a, b)) in sums.into_iter().zip(pairs) {
        out.set(a, b, sum / blocks.len() as f64);
    }
    Ok(out)
}

pub(crate) fn row_blocks(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    if n <= batch_size {
        return vec![0..n];
    }
    (0..n / batch_size).map(|b| b * batch_size..(b + 1) * batch_size).collect()
}

/// Convenience for tests and callers holding plain vectors.
pub fn mutual_information_vec(zk: &[f64], zl: &[f64], sigma_k: f64, sigma_l: f64, alpha: Alpha) -> Result<f64> {
    mutual_information(
        &DVector::from_column_slice(zk),
        &DVector::from_column_slice(zl),
        sigma_k,
        sigma_l,
        alpha,
    )
}
