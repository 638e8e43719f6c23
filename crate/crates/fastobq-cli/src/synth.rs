//! Synthetic layers for experiments and benchmarks.
//!
//! Generation is fully determined by (spec, seed): one ChaCha8 stream per
//! layer, consumed in a fixed order (weights, then long-tail indices, then
//! calibration). Two calls with the same inputs are bitwise identical,
//! which the experiment harness and the tests both lean on.

use fastobq_core::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bundle::LayerBundle;
use crate::HarnessError;

/// Fraction of weight entries boosted in the long-tail distribution, and
/// the factor they are scaled by.
pub const TAIL_FRACTION: f64 = 0.01;
pub const TAIL_SCALE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDist {
    Gaussian,
    LongTail,
}

impl WeightDist {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightDist::Gaussian => "gaussian",
            WeightDist::LongTail => "long_tail",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "gaussian" => Ok(WeightDist::Gaussian),
            "long_tail" => Ok(WeightDist::LongTail),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown weight distribution '{other}' (expected gaussian or long_tail)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub d_row: usize,
    pub d_col: usize,
    /// Calibration sample count. Defaults to `8 * d_col` when built from a
    /// config that leaves it out.
    pub n_samples: usize,
    pub weight_dist: WeightDist,
}

impl SynthSpec {
    pub fn new(d_row: usize, d_col: usize, n_samples: Option<usize>, dist: WeightDist) -> Self {
        SynthSpec {
            d_row,
            d_col,
            n_samples: n_samples.unwrap_or(8 * d_col),
            weight_dist: dist,
        }
    }
}

/// Number of boosted entries for a weight matrix with `n_entries` values.
pub fn tail_count(n_entries: usize) -> usize {
    ((TAIL_FRACTION * n_entries as f64).round() as usize).max(1)
}

/// Generates one synthetic layer. The name encodes the shape, distribution
/// and seed so report rows stay self-describing.
pub fn generate_layer(spec: &SynthSpec, seed: u64) -> LayerBundle {
    assert!(
        spec.d_row > 0 && spec.d_col > 0 && spec.n_samples > 0,
        "empty synthetic shape"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_entries = spec.d_row * spec.d_col;
    let mut w: Vec<f64> = (0..n_entries)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    if spec.weight_dist == WeightDist::LongTail {
        let boosted = rand::seq::index::sample(&mut rng, n_entries, tail_count(n_entries));
        for idx in boosted {
            w[idx] *= TAIL_SCALE;
        }
    }

    let x: Vec<f64> = (0..spec.d_col * spec.n_samples)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    LayerBundle {
        name: format!(
            "synth_{}_{}x{}_s{seed}",
            spec.weight_dist.as_str(),
            spec.d_row,
            spec.d_col
        ),
        weight: Mat::from_vec(spec.d_row, spec.d_col, w),
        calib: Mat::from_vec(spec.d_col, spec.n_samples, x),
        metadata: Default::default(),
    }
}
