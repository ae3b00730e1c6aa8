//! Stochastic unbiased quantisation (QSGD).
//!
//! Each coordinate is scaled to `s·|u_i|/‖u‖₂ ∈ [0, s]` and rounded to one
//! of its two neighbouring integers with probabilities that make the
//! reconstruction unbiased. The sign travels separately.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{corrupt, invalid, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct QsgdLayerUpdate {
    /// ℓ2 norm of the layer, sent as one 32-bit float.
    pub norm: f32,
    /// `true` for negative coordinates.
    pub signs: Vec<bool>,
    /// Levels in `[0, s]`.
    pub magnitudes: Vec<u32>,
}

impl QsgdLayerUpdate {
    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }
}

pub fn qsgd_encode(values: &[f32], levels: u32, seed: u64) -> Result<QsgdLayerUpdate> {
    if levels == 0 {
        return Err(invalid("QSGD needs at least one level"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("QSGD input must be finite"));
    }
    let norm64 = libm::sqrt(values.iter().map(|&v| f64::from(v) * f64::from(v)).sum());
    let norm = norm64 as f32;
    let signs = values.iter().map(|&v| v < 0.0).collect();
    if norm == 0.0 {
        return Ok(QsgdLayerUpdate {
            norm: 0.0,
            signs,
            magnitudes: alloc::vec![0; values.len()],
        });
    }
    let mut rng = rng_from_seed(seed);
    let s = f64::from(levels);
    let magnitudes = values
        .iter()
        .map(|&v| {
            let scaled = (libm::fabs(f64::from(v)) / f64::from(norm) * s).min(s);
            let floor = libm::floor(scaled);
            let p = scaled - floor;
            let up = p > 0.0 && rng.random::<f64>() < p;
            floor as u32 + u32::from(up)
        })
        .collect();
    Ok(QsgdLayerUpdate {
        norm,
        signs,
        magnitudes,
    })
}

pub fn qsgd_decode(q: &QsgdLayerUpdate, levels: u32) -> Result<Vec<f32>> {
    if levels == 0 {
        return Err(invalid("QSGD needs at least one level"));
    }
    if q.signs.len() != q.magnitudes.len() {
        return Err(corrupt("sign and magnitude counts differ"));
    }
    if !(q.norm >= 0.0 && q.norm.is_finite()) {
        return Err(corrupt("QSGD norm must be finite and non-negative"));
    }
    let scale = f64::from(q.norm) / f64::from(levels);
    q.magnitudes
        .iter()
        .zip(&q.signs)
        .map(|(&m, &negative)| {
            if m > levels {
                return Err(corrupt(format!("magnitude {m} exceeds {levels} levels")));
            }
            let v = (scale * f64::from(m)) as f32;
            Ok(if negative { -v } else { v })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_vector() {
        let q = qsgd_encode(&[0.0; 5], 4, 1).unwrap();
        assert_eq!(q.norm, 0.0);
        assert!(q.magnitudes.iter().all(|&m| m == 0));
        assert_eq!(qsgd_decode(&q, 4).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn single_coordinate_is_on_grid() {
        for s in [1, 3, 64, 1000] {
            let q = qsgd_encode(&[5.0], s, 9).unwrap();
            assert_eq!(qsgd_decode(&q, s).unwrap(), vec![5.0]);
            let q = qsgd_encode(&[-5.0], s, 9).unwrap();
            assert_eq!(qsgd_decode(&q, s).unwrap(), vec![-5.0]);
        }
    }

    #[test]
    fn decode_example() {
        let q = QsgdLayerUpdate {
            norm: 5.0,
            signs: vec![false; 3],
            magnitudes: vec![1, 0, 1],
        };
        assert_eq!(qsgd_decode(&q, 1).unwrap(), vec![5.0, 0.0, 5.0]);
    }

    #[test]
    fn on_grid_round_trip_is_exact() {
        // norm 5, s = 5: every coordinate is an integer multiple of 1.
        let v = [3.0, 0.0, -4.0];
        let q = qsgd_encode(&v, 5, 2).unwrap();
        assert_eq!(q.magnitudes, vec![3, 0, 4]);
        assert_eq!(qsgd_decode(&q, 5).unwrap(), v.to_vec());
    }

    #[test]
    fn rejects_bad_payloads() {
        let q = QsgdLayerUpdate {
            norm: 1.0,
            signs: vec![false],
            magnitudes: vec![3],
        };
        assert!(qsgd_decode(&q, 2).is_err());
        assert!(qsgd_encode(&[1.0], 0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let v: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(qsgd_encode(&v, 4, 11).unwrap(), qsgd_encode(&v, 4, 11).unwrap());
    }

    #[test]
    fn monte_carlo_unbiased_on_small_vector() {
        // [3, 0, 4] at s = 1: coordinate 0 decodes to 5 with probability 3/5.
        let trials = 10_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for seed in 0..trials {
            let q = qsgd_encode(&[3.0, 0.0, 4.0], 1, seed).unwrap();
            let x = f64::from(qsgd_decode(&q, 1).unwrap()[0]);
            sum += x;
            sum_sq += x * x;
        }
        let n = trials as f64;
        let mean = sum / n;
        let se = libm::sqrt((sum_sq / n - mean * mean) / n);
        assert!((mean - 3.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }
}
