use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neuroprune::cluster::{prune_cluster, ClusterConfig};
use neuroprune::metrics::{keep_for_flops, relative_flops, Architecture, FfnShape, FlopsScope};
use neuroprune::toy::gelu;
use neuroprune::{mi_matrix, prune_pairwise, tune_all, ActivationMatrix, Alpha, PruneMask, TuningConfig};

/// Eight GeLU neurons plus exact copies of neurons 1 and 5 in columns 8 and 9.
fn layer_with_copies(seed: u64) -> ActivationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let n = 200;
    let inputs = DMatrix::from_fn(n, 5, |_, _| normal());
    let w = DMatrix::from_fn(5, 8, |_, _| normal() / 5f64.sqrt());
    let pre = &inputs * &w;
    let source = [0, 1, 2, 3, 4, 5, 6, 7, 1, 5];
    let values = DMatrix::from_fn(n, source.len(), |i, j| gelu(pre[(i, source[j])]));
    ActivationMatrix::new(values, "fc", 1.0).unwrap()
}

#[test]
fn copies_are_the_most_redundant_pairs() {
    let x = layer_with_copies(3);
    let sigmas = tune_all(&x, &TuningConfig::default()).unwrap();
    let mi = mi_matrix(&x, &sigmas, Alpha::DEFAULT, None).unwrap();
    let (a, b) = mi.argmax_pair().unwrap();
    assert!([(1, 8), (5, 9)].contains(&(a.min(b), a.max(b))), "argmax at ({a}, {b})");
}

#[test]
fn both_pruners_thin_the_copies() {
    let x = layer_with_copies(4);
    let sigmas = tune_all(&x, &TuningConfig::default()).unwrap();
    let mi = mi_matrix(&x, &sigmas, Alpha::DEFAULT, None).unwrap();

    let k = x.n_neurons();
    let keep = keep_for_flops(k, 0.8).unwrap();
    let outcome = prune_cluster(&mi, &ClusterConfig::new(keep, 3), None::<fn(&PruneMask) -> neuroprune::Result<f64>>).unwrap();
    let m = outcome.mask.keep();
    assert_eq!(outcome.mask.kept_count(), 8);
    assert!(!(m[1] && m[8]) && !(m[5] && m[9]));

    // A threshold just below the copy score removes one of each copy pair.
    let copy_score = mi.get(1, 8).unwrap().min(mi.get(5, 9).unwrap());
    for seed in 0..5 {
        let mask = prune_pairwise(&x, &sigmas, Alpha::DEFAULT, copy_score - 1e-9, Some(5000), seed).unwrap();
        let m = mask.keep();
        assert!(!(m[1] && m[8]) && !(m[5] && m[9]), "seed {seed}: {:?}", mask.dropped_indices());
    }

    let arch = Architecture::single(FfnShape { d_in: 5, hidden: k, d_out: 3 });
    let report = relative_flops(&[outcome.mask], &arch, FlopsScope::Ffn).unwrap();
    assert!((report.relative - 0.8).abs() < 1e-12);
}
