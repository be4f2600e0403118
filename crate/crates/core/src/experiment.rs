//! End-to-end runs on the toy model: train, capture activations, estimate
//! MI, prune, and score the pruned model. The ablation sweeps emit
//! [`MetricsRow`]s ready for CSV output.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activation::ActivationMatrix;
use crate::cluster::{prune_cluster, ClusterConfig, ClusterOutcome};
use crate::entropy::{mi_matrix_batched, Alpha, MiMatrix};
use crate::error::{invalid_param, Result};
use crate::mask::{PruneMask, PruneMethod};
use crate::metrics::{accuracy, keep_for_flops, kl_proxy, relative_flops, FlopsScope, MetricsRow};
use crate::pairwise::{pcc_matrix, prune_pairwise, prune_pcc, prune_random};
use crate::sigma::{tune_all, SigmaSchedule, TuningConfig};
use crate::toy::{synth_task, train_toy_ffn, Dataset, RedundancyPlan, ToyFfn, TrainConfig};

pub const LAYER_ID: &str = "toy.fc1";

#[derive(Debug, Clone)]
pub struct ToySetup {
    pub d_in: usize,
    pub n_classes: usize,
    pub plan: RedundancyPlan,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainConfig,
}

impl Default for ToySetup {
    /// The planted-redundancy task: 16 inputs that are noisy copies of 4
    /// latent factors, 4 classes, 64 hidden units.
    fn default() -> Self {
        Self {
            d_in: 16,
            n_classes: 4,
            plan: RedundancyPlan::Grouped { groups: 4, noise: 0.3 },
            n_train: 1000,
            n_test: 1000,
            train: TrainConfig::default(),
        }
    }
}

/// How activations are turned into an MI matrix.
#[derive(Debug, Clone)]
pub struct EstimationConfig {
    /// Fraction of the training inputs used to activate the layer.
    pub sample_fraction: f64,
    /// Upper bound on captured rows after applying the fraction.
    pub max_rows: Option<usize>,
    pub tuning: TuningConfig,
    pub alpha: Alpha,
    /// MI is averaged over row blocks of this size.
    pub mi_batch: usize,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 1.0,
            max_rows: Some(200),
            tuning: TuningConfig::default(),
            alpha: Alpha::DEFAULT,
            mi_batch: 100,
            seed: 0,
        }
    }
}

/// A trained toy model with its data splits.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ToyFfn,
    pub train: Dataset,
    pub test: Dataset,
    pub train_accuracy: f64,
    base_test_probs: DMatrix<f64>,
}

pub fn prepare(setup: &ToySetup, seed: u64) -> Result<Trained> {
    let data = synth_task(seed, setup.n_train + setup.n_test, setup.d_in, setup.n_classes, setup.plan)?;
    let (train, test) = data.split(setup.n_train)?;
    let report = train_toy_ffn(&train, &TrainConfig { seed, ..setup.train })?;
    Trained::new(report.model, train, test)
}

impl Trained {
    pub fn new(model: ToyFfn, train: Dataset, test: Dataset) -> Result<Self> {
        let base_test_probs = model.forward(&test.inputs)?;
        let train_accuracy = accuracy(&model.forward(&train.inputs)?, &train.labels)?;
        Ok(Self { model, train, test, train_accuracy, base_test_probs })
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        accuracy(&self.base_test_probs, &self.test.labels)
    }

    /// Rows of the training inputs used to activate the layer.
    pub fn sample_rows(&self, fraction: f64, max_rows: Option<usize>, seed: u64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid_param(format!("sample fraction must lie in (0, 1], got {fraction}")));
        }
        let n = self.train.len();
        let mut take = ((fraction * n as f64).ceil() as usize).clamp(2.min(n), n);
        if let Some(cap) = max_rows {
            take = take.min(cap.max(2));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = rand::seq::index::sample(&mut rng, n, take).into_vec();
        rows.sort_unstable();
        Ok(rows)
    }

    pub fn capture(&self, cfg: &EstimationConfig) -> Result<ActivationMatrix> {
        let rows = self.sample_rows(cfg.sample_fraction, cfg.max_rows, cfg.seed)?;
        let inputs = self.train.inputs.select_rows(rows.iter());
        let fraction = rows.len() as f64 / self.train.len() as f64;
        ActivationMatrix::new(self.model.hidden_activations(&inputs)?, LAYER_ID, fraction)
    }

    /// Inputs for label-free seed selection: the same rows used for capture.
    pub fn calibration_inputs(&self, cfg: &EstimationConfig) -> Result<DMatrix<f64>> {
        let rows = self.sample_rows(cfg.sample_fraction, cfg.max_rows, cfg.seed)?;
        Ok(self.train.inputs.select_rows(rows.iter()))
    }

    pub fn estimate(&self, cfg: &EstimationConfig) -> Result<(ActivationMatrix, SigmaSchedule, MiMatrix)> {
        let x = self.capture(cfg)?;
        let tuning = TuningConfig { alpha: cfg.alpha, seed: cfg.seed, ..cfg.tuning };
        let sigmas = tune_all(&x, &tuning)?;
        let mi = mi_matrix_batched(&x, &sigmas, cfg.alpha, None, cfg.mi_batch.min(x.n_samples()))?;
        Ok((x, sigmas, mi))
    }

    /// Cluster pruning with best-of-`seeds` selection by KL on `calibration`.
    pub fn cluster_prune(&self, mi: &MiMatrix, target_keep: usize, seeds: &[u64], calibration: &DMatrix<f64>) -> Result<ClusterOutcome> {
        let base = self.model.forward(calibration)?;
        let cfg = ClusterConfig { seeds: seeds.to_vec(), ..ClusterConfig::new(target_keep, 0) };
        prune_cluster(
            mi,
            &cfg,
            Some(|m: &PruneMask| kl_proxy(&base, &self.model.forward_with_mask(m, calibration)?)),
        )
    }

    /// Test-set accuracy, KL against the unpruned model, and relative FFN FLOPs.
    pub fn evaluate(&self, mask: &PruneMask, variant: &str) -> Result<MetricsRow> {
        let probs = self.model.forward_with_mask(mask, &self.test.inputs)?;
        let flops = relative_flops(std::slice::from_ref(mask), &self.model.architecture(), FlopsScope::Ffn)?;
        Ok(MetricsRow {
            relative_flops: flops.relative,
            accuracy: accuracy(&probs, &self.test.labels)?,
            kl_proxy: kl_proxy(&self.base_test_probs, &probs)?,
            method: mask.method.to_string(),
            seed: mask.seed,
            variant: variant.to_string(),
        })
    }
}

/// Cluster-MI pruning at each relative-FLOPs target.
pub fn sweep_cluster(
    trained: &Trained,
    mi: &MiMatrix,
    flops_targets: &[f64],
    seeds: &[u64],
    calibration: &DMatrix<f64>,
    variant: &str,
) -> Result<Vec<MetricsRow>> {
    let k = trained.model.hidden();
    flops_targets
        .iter()
        .map(|&f| {
            let out = trained.cluster_prune(mi, keep_for_flops(k, f)?, seeds, calibration)?;
            trained.evaluate(&out.mask, variant)
        })
        .collect()
}

/// Random pruning at each relative-FLOPs target, one row per seed.
pub fn sweep_random(trained: &Trained, flops_targets: &[f64], seeds: &[u64], variant: &str) -> Result<Vec<MetricsRow>> {
    let k = trained.model.hidden();
    let mut rows = Vec::new();
    for &f in flops_targets {
        for &s in seeds {
            rows.push(trained.evaluate(&prune_random(k, keep_for_flops(k, f)?, s)?, variant)?);
        }
    }
    Ok(rows)
}

/// `0.1, 0.2, ..., 1.0` style grid with `steps` points.
pub fn flops_grid(steps: usize) -> Vec<f64> {
    (1..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub flops_targets: Vec<f64>,
    pub cluster_seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { flops_targets: flops_grid(10), cluster_seeds: (0..20).collect() }
    }
}

pub fn ablate_alpha(trained: &Trained, alphas: &[f64], est: &EstimationConfig, sweep: &SweepConfig) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &a in alphas {
        let cfg = EstimationConfig { alpha: Alpha::new(a)?, ..est.clone() };
        let (_, _, mi) = trained.estimate(&cfg)?;
        let calib = trained.calibration_inputs(&cfg)?;
        rows.extend(sweep_cluster(trained, &mi, &sweep.flops_targets, &sweep.cluster_seeds, &calib, &format!("alpha={a}"))?);
    }
    Ok(rows)
}

pub fn ablate_sample_fraction(
    trained: &Trained,
    fractions: &[f64],
    est: &EstimationConfig,
    sweep: &SweepConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &f in fractions {
        let cfg = EstimationConfig { sample_fraction: f, max_rows: None, ..est.clone() };
        let (_, _, mi) = trained.estimate(&cfg)?;
        let calib = trained.calibration_inputs(&cfg)?;
        rows.extend(sweep_cluster(trained, &mi, &sweep.flops_targets, &sweep.cluster_seeds, &calib, &format!("fraction={f}"))?);
    }
    Ok(rows)
}

/// Value at quantile `q` (nearest rank) of the sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut v: Vec<f64> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Pairwise filtering driven by MI and by |Pearson| with identical control
/// flow. Thresholds sit at the given quantiles of each score's off-diagonal
/// distribution, so both methods sweep comparable compression levels.
pub fn ablate_mi_vs_pcc(
    trained: &Trained,
    quantiles: &[f64],
    est: &EstimationConfig,
    filter_seeds: &[u64],
) -> Result<Vec<MetricsRow>> {
    if let Some(q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(invalid_param(format!("quantile {q} outside [0, 1]")));
    }
    let (x, sigmas, mi) = trained.estimate(est)?;
    let mi_scores = upper_triangle(mi.values());
    let pcc_scores = upper_triangle(&pcc_matrix(&x));
    let mut rows = Vec::new();
    for &q in quantiles {
        let t_mi = quantile(&mi_scores, q).max(f64::MIN_POSITIVE);
        let t_pcc = quantile(&pcc_scores, q).clamp(1e-9, 1.0 - 1e-9);
        for &s in filter_seeds {
            let variant = format!("quantile={q}");
            let m = prune_pairwise(&x, &sigmas, est.alpha, t_mi, None, s)?;
            rows.push(trained.evaluate(&m, &variant)?);
            let p = prune_pcc(&x, t_pcc, None, s)?;
            rows.push(trained.evaluate(&p, &variant)?);
        }
    }
    Ok(rows)
}

/// Effect of the number of candidate k-means seeds on the selected mask.
pub fn ablate_seed_count(
    trained: &Trained,
    counts: &[u64],
    est: &EstimationConfig,
    flops_targets: &[f64],
) -> Result<Vec<MetricsRow>> {
    let (_, _, mi) = trained.estimate(est)?;
    let calib = trained.calibration_inputs(est)?;
    let mut rows = Vec::new();
    for &m in counts {
        if m == 0 {
            return Err(invalid_param("seed count must be positive"));
        }
        let seeds: Vec<u64> = (0..m).collect();
        rows.extend(sweep_cluster(trained, &mi, flops_targets, &seeds, &calib, &format!("seeds={m}"))?);
    }
    Ok(rows)
}

/// One pipeline run for the proposed-vs-random comparison.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub seed: u64,
    pub unpruned: f64,
    pub cluster: MetricsRow,
    pub random: MetricsRow,
}

/// Trains a model per seed and prunes it to `target_flops` with cluster-MI
/// and with random selection.
pub fn compare_with_random(
    setup: &ToySetup,
    run_seeds: &[u64],
    target_flops: f64,
    est: &EstimationConfig,
    cluster_seeds: &[u64],
) -> Result<Vec<ComparisonRun>> {
    run_seeds
        .iter()
        .map(|&seed| {
            let trained = prepare(setup, seed)?;
            let cfg = EstimationConfig { seed, ..est.clone() };
            let (_, _, mi) = trained.estimate(&cfg)?;
            let calib = trained.calibration_inputs(&cfg)?;
            let keep = keep_for_flops(trained.model.hidden(), target_flops)?;
            let cluster = trained.cluster_prune(&mi, keep, cluster_seeds, &calib)?;
            let random = prune_random(trained.model.hidden(), keep, seed)?;
            Ok(ComparisonRun {
                seed,
                unpruned: trained.test_accuracy()?,
                cluster: trained.evaluate(&cluster.mask, "")?,
                random: trained.evaluate(&random, "")?,
            })
        })
        .collect()
}

/// Unpruned baseline expressed as a metrics row.
pub fn unpruned_row(trained: &Trained) -> Result<MetricsRow> {
    let all = PruneMask::all_keep(trained.model.hidden(), PruneMethod::ClusterMi)?;
    let mut row = trained.evaluate(&all, "")?;
    row.method = "unpruned".into();
    Ok(row)
}
