//! Quantization, the factorized entropy model and the range coder.

mod model;
pub mod range_coder;

pub use model::{ChannelPmf, ChannelTable, EntropyModel, ESCAPE_RAW_BITS, PROB_BITS, PROB_TOTAL};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Round half away from zero, saturating at the `i32` range.
pub fn quantize<T: num_traits::Float>(feats: &[T]) -> Vec<i32> {
    feats
        .iter()
        .map(|v| v.round().to_f64().map_or(0, |r| r as i32))
        .collect()
}

/// Adds i.i.d. `U(-0.5, 0.5)` noise, the training-time stand-in for
/// rounding. Deterministic for a given seed.
pub fn add_noise(feats: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    feats.iter().map(|&v| v + rng.gen_range(-0.5..0.5)).collect()
}

/// Theoretical and actual size of a coded frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateReport {
    pub total_bits: f64,
    pub coded_bytes: usize,
    pub substreams: Vec<(String, f64, usize)>,
}

impl RateReport {
    pub fn push(&mut self, name: impl Into<String>, estimated_bits: f64, bytes: usize) {
        self.total_bits += estimated_bits;
        self.coded_bytes += bytes;
        self.substreams.push((name.into(), estimated_bits, bytes));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(quantize(&[2.4f32, -2.5, 2.5, -0.4, 0.5, 1e12]), vec![2, -3, 3, 0, 1, i32::MAX]);
    }

    #[test]
    fn noise_is_reproducible_and_bounded() {
        let z = vec![0.0; 1000];
        let a = add_noise(&z, 11);
        assert_eq!(a, add_noise(&z, 11));
        assert_ne!(a, add_noise(&z, 12));
        assert!(a.iter().all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let n = 1_000_000;
        let a = add_noise(&vec![0.0; n], 5);
        let mean = a.iter().sum::<f64>() / n as f64;
        // sigma of the mean is sqrt(1/12 / n)
        let sigma = (1.0 / 12.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
    }
}
