//! Budgeted pruning by clustering neurons in an MI-derived metric space.
//!
//! Pipeline: pairwise MI, distance `A * exp(-MI)`, classical MDS embedding,
//! seeded k-means with `K_r` clusters, one representative per cluster, and
//! an optional choice among several k-means seeds by a caller-supplied loss.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_data, invalid_param, Error, Result};
use crate::entropy::MiMatrix;
use crate::mask::{PruneMask, PruneMethod};

pub const DEFAULT_MDS_DIMS: usize = 16;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

/// `scale * exp(-MI)` off the diagonal, 0 on it. Requires a complete matrix.
pub fn mi_to_distance(mi: &MiMatrix, scale: f64) -> Result<DMatrix<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid_param(format!("distance scale must be positive, got {scale}")));
    }
    if !mi.is_complete() {
        return Err(invalid_data("distance needs every pairwise MI value"));
    }
    let k = mi.n_neurons();
    let v = mi.values();
    Ok(DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { scale * (-v[(i, j)]).exp() }))
}

#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    /// One row per neuron.
    pub coords: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl MdsEmbedding {
    pub fn dims(&self) -> usize {
        self.coords.ncols()
    }
}

/// Classical (Torgerson) MDS keeping at most `dims` positive eigenpairs.
///
/// Each axis is oriented so its largest-magnitude coordinate is positive.
pub fn classical_mds(distance: &DMatrix<f64>, dims: usize) -> Result<MdsEmbedding> {
    let k = distance.nrows();
    if k != distance.ncols() {
        return Err(invalid_data(format!("distance matrix is {}x{}", k, distance.ncols())));
    }
    if k < 2 {
        return Err(invalid_data("MDS needs at least two points"));
    }
    if dims == 0 {
        return Err(invalid_param("MDS dimension must be at least 1"));
    }
    if distance.iter().any(|v| !v.is_finite()) {
        return Err(invalid_data("distance matrix has non-finite entries"));
    }
    let sq = distance.map(|d| d * d);
    let row_means = DVector::from_fn(k, |i, _| sq.row(i).mean());
    let grand = sq.mean();
    let b = DMatrix::from_fn(k, k, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let b = (&b + b.transpose()) * 0.5;

    let eig = SymmetricEigen::try_new(b, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("MDS eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = top * 1e-10;
    let kept: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > floor).take(dims).collect();

    let mut coords = DMatrix::zeros(k, kept.len());
    let mut eigenvalues = Vec::with_capacity(kept.len());
    for (axis, &idx) in kept.iter().enumerate() {
        let lambda = eig.eigenvalues[idx];
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        coords.set_column(axis, &(v * lambda.sqrt()));
        eigenvalues.push(lambda);
    }
    Ok(MdsEmbedding { coords, eigenvalues })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|d| (points[(i, d)] - centroids[(c, d)]).powi(2)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.nrows() {
        let d = sq_dist(points, i, centroids, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &DMatrix<f64>, k_r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &points.rows(chosen[0], 1).into_owned(), 0)).collect();
    while chosen.len() < k_r {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k_r <= n")
        };
        chosen.push(next);
        let c = points.rows(next, 1).into_owned();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points, i, &c, 0));
        }
    }
    DMatrix::from_fn(k_r, points.ncols(), |r, d| points[(chosen[r], d)])
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Empty clusters are re-seeded with the point farthest from its centroid
/// among clusters that have more than one member, so every cluster ends up
/// non-empty. `k_r == n` returns the identity assignment.
pub fn kmeans(points: &DMatrix<f64>, k_r: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k_r == 0 || k_r > n {
        return Err(invalid_param(format!("cluster count {k_r} outside [1, {n}]")));
    }
    if max_iter == 0 {
        return Err(invalid_param("k-means needs at least one iteration"));
    }
    if k_r == n {
        return Ok(KMeansResult {
            assignment: (0..n).collect(),
            centroids: points.clone(),
            inertia: 0.0,
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k_r, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia = 0.0;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points, i, &centroids);
            assignment[i] = c;
            dists[i] = d;
        }
        fill_empty_clusters(&mut assignment, &mut dists, k_r);

        let mut sums = DMatrix::zeros(k_r, points.ncols());
        let mut counts = vec![0usize; k_r];
        for i in 0..n {
            counts[assignment[i]] += 1;
            let mut row = sums.row_mut(assignment[i]);
            row += points.row(i);
        }
        for c in 0..k_r {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
        centroids = sums;
        inertia = (0..n).map(|i| sq_dist(points, i, &centroids, assignment[i])).sum();
        let converged = prev_inertia.is_finite() && (prev_inertia - inertia).abs() <= tol * prev_inertia.max(f64::MIN_POSITIVE);
        prev_inertia = inertia;
        if converged || inertia == 0.0 {
            break;
        }
    }
    Ok(KMeansResult { assignment, centroids, inertia, iterations })
}

fn fill_empty_clusters(assignment: &mut [usize], dists: &mut [f64], k_r: usize) {
    let mut counts = vec![0usize; k_r];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k_r {
        if counts[c] > 0 {
            continue;
        }
        let donor = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("fewer clusters than points");
        counts[assignment[donor]] -= 1;
        assignment[donor] = c;
        dists[donor] = 0.0;
        counts[c] = 1;
    }
}

/// Member of each cluster closest to its centroid, ties to the lower index.
/// Returned in ascending order.
pub fn select_representatives(points: &DMatrix<f64>, km: &KMeansResult) -> Vec<usize> {
    let k_r = km.centroids.nrows();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k_r];
    for (i, &c) in km.assignment.iter().enumerate() {
        let d = sq_dist(points, i, &km.centroids, c);
        if best[c].is_none_or(|(_, bd)| d < bd) {
            best[c] = Some((i, d));
        }
    }
    let mut reps: Vec<usize> = best.into_iter().flatten().map(|(i, _)| i).collect();
    reps.sort_unstable();
    reps
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub target_keep: usize,
    pub mds_dims: Option<usize>,
    pub seeds: Vec<u64>,
    pub max_iter: usize,
    pub tol: f64,
    pub distance_scale: f64,
}

impl ClusterConfig {
    pub fn new(target_keep: usize, n_seeds: u64) -> Self {
        Self {
            target_keep,
            mds_dims: None,
            seeds: (0..n_seeds).collect(),
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            distance_scale: 1.0,
        }
    }

    fn dims_for(&self, k: usize) -> usize {
        self.mds_dims.unwrap_or(DEFAULT_MDS_DIMS.min(k - 1)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedScore {
    pub seed: u64,
    pub loss: f64,
}

/// Index of the candidate with the smallest loss; ties go to the lower seed.
pub fn select_best_seed(scores: &[SeedScore]) -> Result<usize> {
    if scores.is_empty() {
        return Err(invalid_param("no seeds to choose from"));
    }
    if let Some(bad) = scores.iter().find(|s| s.loss.is_nan()) {
        return Err(Error::Numerical(format!("loss for seed {} is NaN", bad.seed)));
    }
    Ok((0..scores.len())
        .min_by(|&a, &b| scores[a].loss.total_cmp(&scores[b].loss).then(scores[a].seed.cmp(&scores[b].seed)))
        .expect("non-empty"))
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub mask: PruneMask,
    pub embedding: MdsEmbedding,
    /// Per-seed masks, in the order of `ClusterConfig::seeds`.
    pub candidates: Vec<PruneMask>,
    /// Empty when no evaluator was supplied.
    pub scores: Vec<SeedScore>,
}

/// Runs the clustering pipeline for every configured seed and keeps the mask
/// with the smallest `evaluate` loss. Without an evaluator the first seed wins.
pub fn prune_cluster<F>(mi: &MiMatrix, config: &ClusterConfig, evaluate: Option<F>) -> Result<ClusterOutcome>
where
    F: FnMut(&PruneMask) -> Result<f64>,
{
    let k = mi.n_neurons();
    if config.target_keep == 0 || config.target_keep > k {
        return Err(invalid_param(format!("neuron budget {} outside [1, {k}]", config.target_keep)));
    }
    if config.seeds.is_empty() {
        return Err(invalid_param("at least one k-means seed is required"));
    }
    let distance = mi_to_distance(mi, config.distance_scale)?;
    let embedding = classical_mds(&distance, config.dims_for(k))?;

    let mut candidates = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let km = kmeans(&embedding.coords, config.target_keep, seed, config.max_iter, config.tol)?;
        let mut keep = vec![false; k];
        for r in select_representatives(&embedding.coords, &km) {
            keep[r] = true;
        }
        let mut mask = PruneMask::new(keep, PruneMethod::ClusterMi, seed)?;
        mask.target_keep = Some(config.target_keep);
        mask.iterations_used = km.iterations;
        candidates.push(mask);
    }

    let (best, scores) = match evaluate {
        Some(mut eval) => {
            let scores = candidates
                .iter()
                .map(|m| Ok(SeedScore { seed: m.seed, loss: eval(m)? }))
                .collect::<Result<Vec<_>>>()?;
            (select_best_seed(&scores)?, scores)
        }
        None => (0, Vec::new()),
    };
    Ok(ClusterOutcome { mask: candidates[best].clone(), embedding, candidates, scores })
}
