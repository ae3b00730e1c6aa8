//! Layer-wise update codecs.
//!
//! Bucketed scalar quantisation replaces each coordinate with the index of
//! the bucket it falls in; the decoder returns the bucket mid-point. Two
//! boundary constructions are provided: equal-width ([`bu_codebook`]) and
//! equal-mass ([`bq_codebook`]). [`qsgd`] is the stochastic comparator.

mod codebook;
pub mod qsgd;
mod stats;

use alloc::vec::Vec;

pub use codebook::{empirical_quantile, index_width, Codebook};
pub use qsgd::{qsgd_decode, qsgd_encode, QsgdLayerUpdate};
pub use stats::{update_stats, UpdateStats};

use crate::error::{corrupt, Result};

/// Bucket indices for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantisedLayerUpdate {
    pub indices: Vec<u32>,
    pub levels: usize,
}

impl QuantisedLayerUpdate {
    /// Bits per index on the wire.
    pub fn width(&self) -> u8 {
        index_width(self.levels)
    }
}

/// Equal-width codebook over `[lo, hi]`.
pub fn bu_codebook(lo: f32, hi: f32, levels: usize) -> Result<Codebook> {
    Codebook::uniform(lo, hi, levels)
}

/// Equal-mass codebook from the empirical distribution of `samples`.
pub fn bq_codebook(samples: &[f32], levels: usize) -> Result<Codebook> {
    Codebook::quantile(samples, levels)
}

pub fn encode(values: &[f32], cb: &Codebook) -> Result<QuantisedLayerUpdate> {
    let indices = values
        .iter()
        .map(|&v| cb.index_of(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantisedLayerUpdate {
        indices,
        levels: cb.levels(),
    })
}

/// Mid-point reconstruction.
pub fn decode(q: &QuantisedLayerUpdate, cb: &Codebook) -> Result<Vec<f32>> {
    if q.levels != cb.levels() {
        return Err(corrupt("payload level count disagrees with codebook"));
    }
    q.indices.iter().map(|&j| cb.midpoint_of(j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn decode_examples() {
        let cb = bu_codebook(-1.0, 1.0, 4).unwrap();
        let q = QuantisedLayerUpdate { indices: vec![1], levels: 4 };
        assert_eq!(decode(&q, &cb).unwrap(), vec![-0.25]);

        let cb = bu_codebook(0.0, 10.0, 5).unwrap();
        let out = decode(&encode(&[3.7], &cb).unwrap(), &cb).unwrap();
        assert_eq!(out, vec![3.0]);
        assert!((out[0] - 3.7).abs() <= 1.0);
    }

    #[test]
    fn midpoints_are_fixed_points() {
        let cb = bq_codebook(&[0.1, 0.4, 0.45, 0.9, 1.3, 2.0, 2.2], 4).unwrap();
        let mids = cb.midpoints().to_vec();
        assert_eq!(decode(&encode(&mids, &cb).unwrap(), &cb).unwrap(), mids);
    }

    #[test]
    fn decode_rejects_out_of_alphabet() {
        let cb = bu_codebook(-1.0, 1.0, 4).unwrap();
        let q = QuantisedLayerUpdate { indices: vec![0, 4], levels: 4 };
        assert!(matches!(decode(&q, &cb), Err(Error::CorruptPayload(_))));
        let q = QuantisedLayerUpdate { indices: vec![0], levels: 8 };
        assert!(decode(&q, &cb).is_err());
    }

    #[test]
    fn encode_rejects_nan() {
        let cb = bu_codebook(-1.0, 1.0, 4).unwrap();
        assert!(encode(&[0.0, f32::NAN], &cb).is_err());
    }

    proptest! {
        #[test]
        /// Rounding boundaries and mid-points to `f32` can widen a bucket's
        /// worst case by one unit in the last place of the range endpoints.
        fn bu_distortion_bound(
            lo in -10.0f32..10.0,
            width in 1e-3f32..20.0,
            levels in 1usize..512,
            t in 0.0f64..=1.0,
        ) {
            let hi = lo + width;
            prop_assume!(hi > lo);
            let cb = bu_codebook(lo, hi, levels).unwrap();
            prop_assume!(cb.levels() == levels);
            let v = (f64::from(lo) + t * f64::from(hi - lo)) as f32;
            let v = v.clamp(lo, hi);
            let out = decode(&encode(&[v], &cb).unwrap(), &cb).unwrap()[0];
            let ulp = f64::from(f32::EPSILON) * f64::from(lo.abs().max(hi.abs()));
            let bound = (f64::from(hi) - f64::from(lo)) / (2.0 * levels as f64) + ulp;
            prop_assert!((f64::from(out) - f64::from(v)).abs() <= bound);
        }

        #[test]
        fn encoding_is_monotone(
            samples in proptest::collection::vec(-5.0f32..5.0, 2..64),
            levels in 1usize..32,
            a in -6.0f32..6.0,
            b in -6.0f32..6.0,
        ) {
            let Ok(cb) = bq_codebook(&samples, levels) else { return Ok(()); };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cb.index_of(lo).unwrap() <= cb.index_of(hi).unwrap());
        }

        #[test]
        fn bq_buckets_hold_equal_mass(
            samples in proptest::collection::vec(-100.0f32..100.0, 2..400),
            levels in 1usize..16,
        ) {
            let Ok(cb) = bq_codebook(&samples, levels) else { return Ok(()); };
            let q = encode(&samples, &cb).unwrap();
            let mut counts = vec![0usize; cb.levels()];
            for &j in &q.indices {
                counts[j as usize] += 1;
            }
            let mut sorted = samples.clone();
            sorted.sort_by(f32::total_cmp);
            let duplicates = sorted.windows(2).filter(|w| w[0] == w[1]).count();
            let slack = (duplicates + 1) as f64;
            let target = samples.len() as f64 / levels as f64;
            for (j, &c) in counts.iter().enumerate() {
                prop_assert!(
                    (c as f64 - target).abs() <= slack,
                    "bucket {} holds {} vs {}", j, c, target
                );
            }
        }
    }
}
