//! Rate-distortion objective: rate in bits per input point plus lambda times
//! the occupancy cross-entropy averaged over the reconstruction scales.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub rate_bpp: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub loss: f64,
}

impl LossReport {
    pub fn new(rate_bits: f64, points: usize, scale_bce: &[f64], lambda: f64) -> Result<Self> {
        if points == 0 {
            return Err(Error::Metric("loss of an empty frame".into()));
        }
        if scale_bce.is_empty() {
            return Err(Error::Metric("no reconstruction scale to average".into()));
        }
        let rate_bpp = rate_bits / points as f64;
        let distortion = scale_bce.iter().sum::<f64>() / scale_bce.len() as f64;
        Ok(Self {
            rate_bpp,
            distortion,
            lambda,
            loss: rate_bpp + lambda * distortion,
        })
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy (natural log) of probabilities `sigmoid(z)`
/// against occupancy labels.
pub fn bce_with_logits(logits: &[f64], occupied: &[bool]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .iter()
        .zip(occupied)
        .map(|(&z, &o)| if o { softplus(-z) } else { softplus(z) })
        .sum();
    sum / logits.len() as f64
}

/// Gradient of [`bce_with_logits`]: `(p - O) / N`.
pub fn bce_grad(logits: &[f64], occupied: &[bool]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(occupied)
        .map(|(&z, &o)| (crate::nn::sigmoid(z) - if o { 1.0 } else { 0.0 }) / n)
        .collect()
}

/// Mean binary cross-entropy of explicit probabilities.
pub fn bce_with_probs(probs: &[f64], occupied: &[bool]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let sum: f64 = probs
        .iter()
        .zip(occupied)
        .map(|(&p, &o)| {
            let q = if o { p } else { 1.0 - p };
            if q >= 1.0 {
                0.0
            } else {
                -q.ln()
            }
        })
        .sum();
    sum / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_cases() {
        let o = [true, false, true, false];
        assert_eq!(bce_with_probs(&[1.0, 0.0, 1.0, 0.0], &o), 0.0);
        assert!((bce_with_probs(&[0.5; 4], &o) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logits(&[0.0; 4], &o) - std::f64::consts::LN_2).abs() < 1e-15);
        let z = [2.0, -1.0, 0.3, 5.0];
        let p: Vec<f64> = z.iter().map(|&v| crate::nn::sigmoid(v)).collect();
        assert!((bce_with_logits(&z, &o) - bce_with_probs(&p, &o)).abs() < 1e-12);
        // saturated logits stay finite
        assert!(bce_with_logits(&[-800.0], &[true]).is_finite());
    }

    #[test]
    fn grad_is_p_minus_o() {
        let g = bce_grad(&[0.0, 0.0], &[true, false]);
        assert_eq!(g, vec![-0.25, 0.25]);
    }

    #[test]
    fn report_arithmetic() {
        let r = LossReport::new(1000.0, 500, &[0.2, 0.4], 4.0).unwrap();
        assert_eq!(r.rate_bpp, 2.0);
        assert!((r.distortion - 0.3).abs() < 1e-15);
        assert!((r.loss - 3.2).abs() < 1e-12);
        assert!(LossReport::new(1.0, 0, &[0.1], 3.0).is_err());
    }
}
