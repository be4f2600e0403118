//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use neuroprune::cluster::{prune_cluster, ClusterConfig};
use neuroprune::entropy::{mi_matrix, mutual_information_vec, renyi_entropy, spectrum_entropy, Alpha};
use neuroprune::experiment::{
    ablate_alpha, ablate_mi_vs_pcc, ablate_sample_fraction, compare_with_random, flops_grid, prepare, EstimationConfig,
    SweepConfig, ToySetup,
};
use neuroprune::gram::rbf_gram;
use neuroprune::mask::PruneMask;
use neuroprune::metrics::{keep_for_flops, kl_proxy, write_metrics_csv, MetricsRow};
use neuroprune::pairwise::prune_pairwise;
use neuroprune::sigma::{scott_sigma, tune_all, TuningConfig};
use neuroprune::ActivationMatrix;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn activations(columns: &[Vec<f64>]) -> ActivationMatrix {
    let n = columns[0].len();
    ActivationMatrix::new(DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]), "acceptance", 1.0).unwrap()
}

fn entropy_bounds() -> Outcome {
    let start = Instant::now();
    let upper = 100f64.log2() + 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut violations = 0;
    for trial in 0..1000 {
        // Mix of continuous, heavy-tailed, discrete and near-constant columns.
        let col: Vec<f64> = match trial % 4 {
            0 => gauss(&mut rng, 100),
            1 => gauss(&mut rng, 100).into_iter().map(|v| v.powi(3)).collect(),
            2 => (0..100).map(|_| rng.random_range(0..3) as f64).collect(),
            _ => (0..100).map(|_| 1.0 + 1e-9 * rng.random::<f64>()).collect(),
        };
        let sigma = 10f64.powf(Uniform::new(-2.0, 1.0).unwrap().sample(&mut rng));
        let g = rbf_gram(&DMatrix::from_column_slice(100, 1, &col), sigma).unwrap();
        let h = renyi_entropy(&g, Alpha::DEFAULT).unwrap();
        lo = lo.min(h);
        hi = hi.max(h);
        if !(0.0..=upper).contains(&h) {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && elapsed < Duration::from_secs(30),
        format!("range [{lo:.4}, {hi:.4}] vs [0, {upper:.4}], {violations} violations, {elapsed:.1?}"),
    )
}

fn mi_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(10..80);
        let a = gauss(&mut rng, n);
        let b: Vec<f64> = a.iter().map(|v| v.sin() + 0.5 * normal(&mut rng)).collect();
        let (sa, sb) = (rng.random_range(0.05..2.0), rng.random_range(0.05..2.0));
        let ab = mutual_information_vec(&a, &b, sa, sb, Alpha::DEFAULT).unwrap();
        let ba = mutual_information_vec(&b, &a, sb, sa, Alpha::DEFAULT).unwrap();
        if ab.to_bits() != ba.to_bits() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/200 pairs differ"))
}

fn closed_forms() -> Outcome {
    let h = spectrum_entropy(&[0.75, 0.25], Alpha::new(2.0).unwrap());
    // Independent route: -log2(0.75^2 + 0.25^2).
    let expected = -(0.625f64).log2();
    let s = scott_sigma(100, 1, 1.0).unwrap();
    let ok = (h - 0.678).abs() <= 1e-3 && (h - expected).abs() < 1e-12 && (s - 0.39811).abs() <= 1e-4;
    outcome(ok, format!("H2(0.75,0.25) = {h:.6} bits, scott(100,1,1) = {s:.6}"))
}

fn duplicate_detection() -> Outcome {
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let dup = gauss(&mut rng, 500);
        let mut cols: Vec<Vec<f64>> = (0..4).map(|_| gauss(&mut rng, 500)).collect();
        cols.insert(1, dup.clone());
        cols.insert(4, dup);
        let x = activations(&cols);
        let sigmas = tune_all(&x, &TuningConfig { seed, ..TuningConfig::default() }).unwrap();
        let mi = mi_matrix(&x, &sigmas, Alpha::DEFAULT, None).unwrap();
        if mi.argmax_pair() == Some((1, 4)) {
            hits += 1;
        }
    }
    outcome(hits >= 99, format!("duplicated pair is the argmax in {hits}/100 seeds"))
}

fn correlation_monotonicity() -> Outcome {
    let mut monotone = 0;
    let mut example = String::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let z1 = gauss(&mut rng, 500);
        let z2 = gauss(&mut rng, 500);
        let mis: Vec<f64> = [0.0, 0.5, 0.9]
            .iter()
            .map(|&rho: &f64| {
                let y: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
                let x = activations(&[z1.clone(), y]);
                let sigmas = tune_all(&x, &TuningConfig { seed, ..TuningConfig::default() }).unwrap();
                mi_matrix(&x, &sigmas, Alpha::DEFAULT, None).unwrap().get(0, 1).unwrap()
            })
            .collect();
        if mis[0] < mis[1] && mis[1] < mis[2] {
            monotone += 1;
        }
        if seed == 0 {
            example = format!("seed 0: {:.3} < {:.3} < {:.3}", mis[0], mis[1], mis[2]);
        }
    }
    outcome(monotone >= 9, format!("strictly increasing in {monotone}/10 seeds ({example})"))
}

/// Brute-force replay of the randomized filter. Survivors are rebuilt from a
/// boolean table on every draw and scores come from a precomputed table.
fn replay_filter(scores: &DMatrix<f64>, threshold: f64, max_itr: usize, seed: u64) -> Vec<bool> {
    let k = scores.nrows();
    let mut alive = vec![true; k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_itr {
        let survivors: Vec<usize> = (0..k).filter(|&i| alive[i]).collect();
        if survivors.len() < 2 {
            break;
        }
        let first = rng.random_range(0..survivors.len());
        let raw = rng.random_range(0..survivors.len() - 1);
        let second = if raw >= first { raw + 1 } else { raw };
        if scores[(survivors[first], survivors[second])] >= threshold {
            alive[survivors[second]] = false;
        }
    }
    alive
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut matches = 0;
    let mut total_dropped = 0;
    for instance in 0..50u64 {
        let k = rng.random_range(2..=8);
        let n = 40;
        let latent = gauss(&mut rng, n);
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let w = rng.random_range(0.0..1.0);
                latent.iter().map(|l| w * l + (1.0 - w) * normal(&mut rng)).collect()
            })
            .collect();
        let sigmas: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.5)).collect();
        let mut table = DMatrix::zeros(k, k);
        let mut offdiag = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                let v = mutual_information_vec(&cols[a], &cols[b], sigmas[a], sigmas[b], Alpha::DEFAULT).unwrap();
                table[(a, b)] = v;
                table[(b, a)] = v;
                offdiag.push(v);
            }
        }
        offdiag.sort_by(f64::total_cmp);
        let threshold = offdiag[rng.random_range(0..offdiag.len())].max(1e-9);
        let max_itr = rng.random_range(1..60);
        let x = activations(&cols);
        let schedule = neuroprune::SigmaSchedule::from_neuron_sigmas(sigmas);
        let mask = prune_pairwise(&x, &schedule, Alpha::DEFAULT, threshold, Some(max_itr), instance).unwrap();
        let expected = replay_filter(&table, threshold, max_itr, instance);
        total_dropped += expected.iter().filter(|&&a| !a).count();
        if mask.keep() == expected.as_slice() {
            matches += 1;
        }
    }
    outcome(matches == 50, format!("{matches}/50 instances match the replay ({total_dropped} neurons dropped in total)"))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let cluster_seeds: Vec<u64> = (0..500).collect();
    let runs = compare_with_random(&ToySetup::default(), &seeds, 0.5, &EstimationConfig::default(), &cluster_seeds).unwrap();
    let mean = |f: &dyn Fn(&neuroprune::experiment::ComparisonRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let unpruned = 100.0 * mean(&|r| r.unpruned);
    let cluster = 100.0 * mean(&|r| r.cluster.accuracy);
    let random = 100.0 * mean(&|r| r.random.accuracy);
    let flops = runs[0].cluster.relative_flops;
    let elapsed = start.elapsed();
    outcome(
        cluster >= random && unpruned - cluster <= 2.0 && elapsed < Duration::from_secs(300) && flops == 0.5,
        format!(
            "relative FLOPs {flops}, mean accuracy: unpruned {unpruned:.2}, cluster-MI {cluster:.2}, random {random:.2} \
             (gap to unpruned {:.2} points), {elapsed:.1?}",
            unpruned - cluster
        ),
    )
}

fn write_csv(dir: &PathBuf, name: &str, rows: &[MetricsRow]) -> PathBuf {
    let path = dir.join(name);
    write_metrics_csv(rows, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn mean_accuracy(rows: &[MetricsRow], variant: &str) -> f64 {
    let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.variant == variant).collect();
    sel.iter().map(|r| r.accuracy).sum::<f64>() / sel.len() as f64
}

fn ablations() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let trained = prepare(&ToySetup::default(), 0).unwrap();
    let sweep = SweepConfig { flops_targets: flops_grid(10), cluster_seeds: (0..20).collect() };
    let est = EstimationConfig::default();

    let alphas = [0.5, 1.01, 2.0, 5.0];
    let alpha_rows = ablate_alpha(&trained, &alphas, &est, &sweep).unwrap();
    let fractions = [0.01, 0.1, 0.5, 1.0];
    let fraction_rows = ablate_sample_fraction(&trained, &fractions, &est, &sweep).unwrap();
    let pcc_est = EstimationConfig { max_rows: Some(100), ..est.clone() };
    let pcc_rows = ablate_mi_vs_pcc(&trained, &[0.5, 0.75, 0.9, 0.97, 0.99], &pcc_est, &[0, 1]).unwrap();

    let files = [
        write_csv(&dir, "ablation_alpha.csv", &alpha_rows),
        write_csv(&dir, "ablation_sample_fraction.csv", &fraction_rows),
        write_csv(&dir, "ablation_mi_vs_pcc.csv", &pcc_rows),
    ];
    let all_written = files.iter().all(|f| std::fs::read_to_string(f).map(|s| s.lines().count() > 1).unwrap_or(false));
    let complete = alpha_rows.len() == 40
        && fraction_rows.len() == 40
        && alphas.iter().all(|a| alpha_rows.iter().any(|r| r.variant == format!("alpha={a}")))
        && pcc_rows.iter().any(|r| r.method == "pairwise_mi")
        && pcc_rows.iter().any(|r| r.method == "pairwise_pcc");
    let spread: Vec<String> =
        fractions.iter().map(|f| format!("{f}: {:.3}", mean_accuracy(&fraction_rows, &format!("fraction={f}")))).collect();
    outcome(
        all_written && complete,
        format!(
            "{} rows written to {}; mean accuracy over the FLOPs grid by sample fraction [{}]",
            alpha_rows.len() + fraction_rows.len() + pcc_rows.len(),
            dir.display(),
            spread.join(", ")
        ),
    )
}

fn seed_selection_argmin() -> Outcome {
    let trained = prepare(&ToySetup::default(), 4).unwrap();
    let est = EstimationConfig::default();
    let (_, _, mi) = trained.estimate(&est).unwrap();
    let calib = trained.calibration_inputs(&est).unwrap();
    let keep = keep_for_flops(trained.model.hidden(), 0.4).unwrap();
    let out = trained.cluster_prune(&mi, keep, &(0..500).collect::<Vec<_>>(), &calib).unwrap();

    // Exhaustive re-scoring of every candidate, independent of the selection path.
    let base = trained.model.forward(&calib).unwrap();
    let losses: Vec<f64> = out
        .candidates
        .iter()
        .map(|m: &PruneMask| kl_proxy(&base, &trained.model.forward_with_mask(m, &calib).unwrap()).unwrap())
        .collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let first_min = losses.iter().position(|&l| l == min).unwrap();
    let chosen = kl_proxy(&base, &trained.model.forward_with_mask(&out.mask, &calib).unwrap()).unwrap();
    let distinct: std::collections::BTreeSet<Vec<usize>> = out.candidates.iter().map(|m| m.kept_indices()).collect();
    let none: Option<fn(&PruneMask) -> neuroprune::Result<f64>> = None;
    let first_only = prune_cluster(&mi, &ClusterConfig { seeds: vec![0], ..ClusterConfig::new(keep, 0) }, none).unwrap();
    outcome(
        out.candidates.len() == 500 && chosen == min && out.mask.seed == first_min as u64 && out.mask.kept_count() == keep,
        format!(
            "selected seed {} with KL {chosen:.5} = min over 500 candidates ({} distinct masks; seed-0 KL {:.5})",
            out.mask.seed,
            distinct.len(),
            kl_proxy(&base, &trained.model.forward_with_mask(&first_only.mask, &calib).unwrap()).unwrap()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("entropy bounds", entropy_bounds),
        ("MI symmetry", mi_symmetry),
        ("closed-form spot checks", closed_forms),
        ("duplicate detection", duplicate_detection),
        ("correlation monotonicity", correlation_monotonicity),
        ("pairwise filter oracle equivalence", filter_oracle),
        ("end-to-end cluster-MI vs random", end_to_end),
        ("ablation harnesses", ablations),
        ("seed-selection argmin", seed_selection_argmin),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let result = run();
        let tag = if result.passed { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1?}]", result.detail, start.elapsed());
        if !result.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
