//! Compression and quality metrics for masked models.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};
use crate::mask::PruneMask;

const KL_FLOOR: f64 = 1e-12;

/// One feed-forward block: `d_in -> hidden -> d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnShape {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl FfnShape {
    /// Per-sample cost of both FC layers with `hidden` units kept.
    pub fn flops(&self, hidden: usize) -> u64 {
        2 * (self.d_in as u64 * hidden as u64 + hidden as u64 * self.d_out as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Architecture {
    pub ffn_layers: Vec<FfnShape>,
    /// Per-sample cost outside the prunable FC layers.
    pub fixed_flops: u64,
}

impl Architecture {
    pub fn single(shape: FfnShape) -> Self {
        Self { ffn_layers: vec![shape], fixed_flops: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsScope {
    #[default]
    Ffn,
    WholeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub original_flops: u64,
    pub pruned_flops: u64,
    pub relative: f64,
    /// `(original, pruned)` per FFN layer.
    pub per_layer: Vec<(u64, u64)>,
}

pub fn relative_flops(masks: &[PruneMask], arch: &Architecture, scope: FlopsScope) -> Result<FlopsReport> {
    if masks.len() != arch.ffn_layers.len() {
        return Err(invalid_param(format!(
            "{} masks for {} FFN layers",
            masks.len(),
            arch.ffn_layers.len()
        )));
    }
    if masks.is_empty() {
        return Err(invalid_param("no layers to measure"));
    }
    let mut per_layer = Vec::with_capacity(masks.len());
    for (i, (mask, shape)) in masks.iter().zip(&arch.ffn_layers).enumerate() {
        if mask.len() != shape.hidden {
            return Err(invalid_param(format!(
                "layer {i}: mask covers {} neurons, hidden width is {}",
                mask.len(),
                shape.hidden
            )));
        }
        per_layer.push((shape.flops(shape.hidden), shape.flops(mask.kept_count())));
    }
    let fixed = match scope {
        FlopsScope::Ffn => 0,
        FlopsScope::WholeModel => arch.fixed_flops,
    };
    let original_flops = fixed + per_layer.iter().map(|p| p.0).sum::<u64>();
    let pruned_flops = fixed + per_layer.iter().map(|p| p.1).sum::<u64>();
    if original_flops == 0 {
        return Err(invalid_param("architecture has zero cost"));
    }
    Ok(FlopsReport { original_flops, pruned_flops, relative: pruned_flops as f64 / original_flops as f64, per_layer })
}

/// Neuron budget for a relative FFN-FLOPs target under uniform allocation.
pub fn keep_for_flops(k: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid_param(format!("relative FLOPs target must lie in (0, 1], got {fraction}")));
    }
    if k == 0 {
        return Err(invalid_param("layer has no neurons"));
    }
    Ok(((fraction * k as f64).round() as usize).clamp(1, k))
}

fn check_rows(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(invalid_param(format!("probability shapes differ: {:?} vs {:?}", p.shape(), q.shape())));
    }
    if p.nrows() == 0 {
        return Err(invalid_param("no probability rows"));
    }
    Ok(())
}

/// Mean over rows of `sum p log2(p / max(q, 1e-12))`.
pub fn kl_proxy(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    check_rows(p, q)?;
    let total: f64 = p
        .row_iter()
        .zip(q.row_iter())
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr.iter())
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).log2())
                .sum::<f64>()
        })
        .sum();
    Ok(total / p.nrows() as f64)
}

/// Argmax with ties to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn accuracy(outputs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if outputs.nrows() == 0 {
        return Err(invalid_param("no outputs to score"));
    }
    if outputs.nrows() != labels.len() {
        return Err(invalid_param(format!("{} output rows, {} labels", outputs.nrows(), labels.len())));
    }
    let correct = outputs
        .row_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub relative_flops: f64,
    pub accuracy: f64,
    pub kl_proxy: f64,
    pub method: String,
    pub seed: u64,
    /// Ablation setting (alpha, sample fraction, ...); empty when not applicable.
    pub variant: String,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = format!("{:<18} {:>10} {:>8} {:>10} {:>6}  {}\n", "method", "rel_flops", "acc", "kl", "seed", "variant");
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>10.4} {:>8.4} {:>10.5} {:>6}  {}\n",
            r.method, r.relative_flops, r.accuracy, r.kl_proxy, r.seed, r.variant
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::PruneMethod;
    use proptest::prelude::*;

    fn mask(keep: &[bool]) -> PruneMask {
        PruneMask::new(keep.to_vec(), PruneMethod::Random, 0).unwrap()
    }

    #[test]
    fn all_keep_is_unit() {
        let arch = Architecture::single(FfnShape { d_in: 16, hidden: 8, d_out: 3 });
        let r = relative_flops(&[mask(&[true; 8])], &arch, FlopsScope::Ffn).unwrap();
        assert_eq!(r.relative, 1.0);
        assert_eq!(r.original_flops, 2 * (16 * 8 + 8 * 3));
    }

    #[test]
    fn half_width_is_half_cost() {
        let arch = Architecture::single(FfnShape { d_in: 128, hidden: 512, d_out: 128 });
        let keep: Vec<bool> = (0..512).map(|i| i < 256).collect();
        let r = relative_flops(&[mask(&keep)], &arch, FlopsScope::Ffn).unwrap();
        assert_eq!(r.relative, 0.5);
        assert_eq!(r.pruned_flops * 2, r.original_flops);
    }

    #[test]
    fn whole_model_scope_dilutes_savings() {
        let arch = Architecture { ffn_layers: vec![FfnShape { d_in: 4, hidden: 4, d_out: 4 }], fixed_flops: 64 };
        let m = mask(&[true, true, false, false]);
        assert_eq!(relative_flops(&[m.clone()], &arch, FlopsScope::Ffn).unwrap().relative, 0.5);
        assert_eq!(relative_flops(&[m], &arch, FlopsScope::WholeModel).unwrap().relative, 0.75);
    }

    #[test]
    fn mismatch_is_rejected() {
        let arch = Architecture::single(FfnShape { d_in: 4, hidden: 4, d_out: 4 });
        assert!(relative_flops(&[mask(&[true; 3])], &arch, FlopsScope::Ffn).is_err());
        assert!(relative_flops(&[], &arch, FlopsScope::Ffn).is_err());
    }

    #[test]
    fn budget_inversion() {
        assert_eq!(keep_for_flops(512, 0.4).unwrap(), 205);
        assert_eq!(keep_for_flops(64, 0.5).unwrap(), 32);
        assert_eq!(keep_for_flops(64, 1.0).unwrap(), 64);
        assert_eq!(keep_for_flops(10, 0.01).unwrap(), 1);
        assert!(keep_for_flops(10, 0.0).is_err());
        assert!(keep_for_flops(10, 1.5).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let p = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let q = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        assert!((kl_proxy(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(kl_proxy(&q, &q).unwrap(), 0.0);
        let zero = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!((kl_proxy(&p, &zero).unwrap() - (1e12f64).log2()).abs() < 1e-9);
        assert!(kl_proxy(&p, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let out = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        assert_eq!(accuracy(&out, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&out, &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&out, &[0, 0]).unwrap(), 0.5);
        let tie = DMatrix::from_row_slice(1, 3, &[0.4, 0.4, 0.2]);
        assert_eq!(accuracy(&tie, &[0]).unwrap(), 1.0);
        assert!(accuracy(&DMatrix::zeros(0, 2), &[]).is_err());
        assert!(accuracy(&out, &[0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricsRow {
            relative_flops: 0.5,
            accuracy: 0.9,
            kl_proxy: 0.01,
            method: "cluster_mi".into(),
            seed: 3,
            variant: "alpha=2".into(),
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "relative_flops,accuracy,kl_proxy,method,seed,variant\n0.5,0.9,0.01,cluster_mi,3,alpha=2\n");
        assert!(format_metrics_table(&rows).contains("cluster_mi"));
    }

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in prop::collection::vec(0.001f64..1.0, 4), b in prop::collection::vec(0.001f64..1.0, 4)) {
            let p = DMatrix::from_row_slice(1, 4, &normalize(a));
            let q = DMatrix::from_row_slice(1, 4, &normalize(b));
            prop_assert!(kl_proxy(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_proxy(&p, &p).unwrap().abs() < 1e-15);
        }

        #[test]
        fn fewer_neurons_never_cost_more(k in 2usize..64, drop in 0usize..63, d_in in 1usize..32, d_out in 1usize..8) {
            let drop = drop % k;
            let arch = Architecture::single(FfnShape { d_in, hidden: k, d_out });
            let a: Vec<bool> = (0..k).map(|i| i >= drop).collect();
            let b: Vec<bool> = (0..k).map(|i| i > drop).collect();
            prop_assume!(b.iter().any(|&x| x));
            let ra = relative_flops(&[mask(&a)], &arch, FlopsScope::Ffn).unwrap().relative;
            let rb = relative_flops(&[mask(&b)], &arch, FlopsScope::Ffn).unwrap().relative;
            prop_assert!(rb < ra);
        }

        #[test]
        fn uniform_fraction_is_exact(k in 1usize..200, keep in 1usize..200) {
            let keep = keep.min(k);
            let arch = Architecture::single(FfnShape { d_in: 7, hidden: k, d_out: 3 });
            let m: Vec<bool> = (0..k).map(|i| i < keep).collect();
            let r = relative_flops(&[mask(&m)], &arch, FlopsScope::Ffn).unwrap().relative;
            prop_assert!((r - keep as f64 / k as f64).abs() < 1e-12);
        }
    }
}
