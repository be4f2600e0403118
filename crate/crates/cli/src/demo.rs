//! The shipped demo activation file: twelve GeLU neurons over 300 samples,
//! where neurons 9, 10 and 11 are exact copies of neurons 0, 4 and 7.

use nalgebra::DMatrix;
use neuroprune::toy::gelu;

use crate::amx::{AmxFile, AmxMetadata};
use crate::error::CliResult;

pub const DEMO_SAMPLES: usize = 300;
pub const DEMO_NEURONS: usize = 12;
/// `(original, copy)` pairs.
pub const PLANTED_DUPLICATES: [(usize, usize); 3] = [(0, 9), (4, 10), (7, 11)];
pub const DEMO_LAYER: &str = "demo.fc1";

/// SplitMix64, so the fixture does not depend on any RNG crate's stream.
struct SplitMix(u64);

impl SplitMix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Sum of twelve uniforms, centred: approximately standard normal.
    fn normal(&mut self) -> f64 {
        (0..12).map(|_| self.uniform()).sum::<f64>() - 6.0
    }
}

pub fn demo_matrix() -> DMatrix<f64> {
    let mut rng = SplitMix(20240611);
    let d = 6;
    let inputs = DMatrix::from_fn(DEMO_SAMPLES, d, |_, _| rng.normal());
    let weights = DMatrix::from_fn(d, PLANTED_DUPLICATES[0].1, |_, _| rng.normal() / (d as f64).sqrt());
    let bias: Vec<f64> = (0..PLANTED_DUPLICATES[0].1).map(|_| 0.5 * rng.normal()).collect();
    let pre = &inputs * &weights;
    let mut out = DMatrix::zeros(DEMO_SAMPLES, DEMO_NEURONS);
    for j in 0..PLANTED_DUPLICATES[0].1 {
        for i in 0..DEMO_SAMPLES {
            out[(i, j)] = gelu(pre[(i, j)] + bias[j]);
        }
    }
    for (src, dst) in PLANTED_DUPLICATES {
        let col = out.column(src).clone_owned();
        out.set_column(dst, &col);
    }
    out
}

pub fn demo_amx() -> CliResult<AmxFile> {
    let meta = AmxMetadata {
        layer_id: Some(DEMO_LAYER.into()),
        sample_fraction: Some(1.0),
        source: Some("synthetic demo with planted duplicates".into()),
        extra: Default::default(),
    };
    AmxFile::from_matrix(&demo_matrix(), Some(meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_exact() {
        let m = demo_matrix();
        for (a, b) in PLANTED_DUPLICATES {
            assert_eq!(m.column(a), m.column(b));
        }
        assert_ne!(m.column(0), m.column(1));
    }

    #[test]
    fn shipped_fixture_matches_generator() {
        let shipped = include_bytes!("../data/demo.amx");
        assert_eq!(shipped.as_slice(), demo_amx().unwrap().to_bytes().unwrap().as_slice());
    }
}
