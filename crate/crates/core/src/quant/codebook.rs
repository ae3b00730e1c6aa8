use alloc::format;
use alloc::vec::Vec;

use crate::error::{corrupt, invalid, Error, Result};

/// Ordered bucket boundaries `b_0 < b_1 < … < b_L` shared by encoder and
/// decoder.
///
/// Bucket `j` is the interval `(b_j, b_{j+1}]`, with bucket 0 also closed at
/// `b_0`. Values outside `[b_0, b_L]` clamp to the end buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    boundaries: Vec<f32>,
    midpoints: Vec<f32>,
    /// Boundaries dropped at construction because they collided with a
    /// neighbour.
    merged: usize,
}

fn midpoint(lo: f32, hi: f32) -> f32 {
    ((f64::from(lo) + f64::from(hi)) * 0.5) as f32
}

impl Codebook {
    /// Builds a codebook from sorted boundaries, merging any boundary whose
    /// bucket would have no interior mid-point.
    pub fn from_boundaries(raw: &[f32]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(invalid("a codebook needs at least two boundaries"));
        }
        if raw.iter().any(|b| !b.is_finite()) {
            return Err(invalid("codebook boundaries must be finite"));
        }
        if raw.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("codebook boundaries must be sorted"));
        }
        let (lo, hi) = (raw[0], raw[raw.len() - 1]);
        if lo >= hi {
            return Err(Error::DegenerateRange { lo, hi });
        }

        let mut boundaries = Vec::with_capacity(raw.len());
        boundaries.push(lo);
        for &b in &raw[1..raw.len() - 1] {
            let prev = *boundaries.last().unwrap();
            let m = midpoint(prev, b);
            if b > prev && m > prev && m < b {
                boundaries.push(b);
            }
        }
        // The top endpoint always survives; drop interior boundaries that
        // sit too close beneath it.
        while boundaries.len() > 1 {
            let prev = *boundaries.last().unwrap();
            let m = midpoint(prev, hi);
            if m > prev && m < hi {
                break;
            }
            boundaries.pop();
        }
        boundaries.push(hi);
        if boundaries.len() == 2 {
            let m = midpoint(lo, hi);
            if !(m > lo && m < hi) {
                return Err(Error::DegenerateRange { lo, hi });
            }
        }

        let merged = raw.len() - boundaries.len();
        let midpoints = boundaries.windows(2).map(|w| midpoint(w[0], w[1])).collect();
        Ok(Self {
            boundaries,
            midpoints,
            merged,
        })
    }

    /// Equal-width buckets: `b_j = lo + j·(hi − lo)/L`.
    pub fn uniform(lo: f32, hi: f32, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("levels must be at least 1"));
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid("range endpoints must be finite"));
        }
        if lo >= hi {
            return Err(Error::DegenerateRange { lo, hi });
        }
        let (lo64, hi64) = (f64::from(lo), f64::from(hi));
        let step = (hi64 - lo64) / levels as f64;
        let mut raw: Vec<f32> = (0..=levels).map(|j| (lo64 + j as f64 * step) as f32).collect();
        raw[0] = lo;
        raw[levels] = hi;
        Self::from_boundaries(&raw)
    }

    /// Equal-mass buckets at the empirical quantiles `j/L` of `samples`,
    /// using linear interpolation between order statistics
    /// (`h = (n − 1)·p`). Coinciding quantiles are merged.
    pub fn quantile(samples: &[f32], levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("levels must be at least 1"));
        }
        if samples.is_empty() {
            return Err(invalid("quantile codebook needs samples"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("quantile samples must be finite"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f32::total_cmp);
        let raw: Vec<f32> = (0..=levels)
            .map(|j| empirical_quantile(&sorted, j as f64 / levels as f64))
            .collect();
        Self::from_boundaries(&raw)
    }

    /// Rebuilds the codebook with every boundary rounded through `f`,
    /// e.g. to a narrower wire precision.
    pub fn map_boundaries(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let raw: Vec<f32> = self.boundaries.iter().map(|&b| f(b)).collect();
        let mut cb = Self::from_boundaries(&raw)?;
        cb.merged += self.merged;
        Ok(cb)
    }

    pub fn boundaries(&self) -> &[f32] {
        &self.boundaries
    }

    pub fn midpoints(&self) -> &[f32] {
        &self.midpoints
    }

    /// Number of buckets `L`.
    pub fn levels(&self) -> usize {
        self.midpoints.len()
    }

    pub fn lo(&self) -> f32 {
        self.boundaries[0]
    }

    pub fn hi(&self) -> f32 {
        self.boundaries[self.boundaries.len() - 1]
    }

    /// Boundaries lost to duplicate merging since the codebook was requested.
    pub fn merged(&self) -> usize {
        self.merged
    }

    /// Bits per index, `⌈log2 L⌉`.
    pub fn index_width(&self) -> u8 {
        index_width(self.levels())
    }

    /// Bucket index of one value.
    pub fn index_of(&self, value: f32) -> Result<u32> {
        if value.is_nan() {
            return Err(invalid("cannot encode NaN"));
        }
        let inner = &self.boundaries[1..self.boundaries.len() - 1];
        Ok(inner.partition_point(|&b| b < value) as u32)
    }

    pub fn midpoint_of(&self, index: u32) -> Result<f32> {
        self.midpoints.get(index as usize).copied().ok_or_else(|| {
            corrupt(format!("index {index} outside codebook of {} levels", self.levels()))
        })
    }
}

/// `⌈log2 levels⌉`, zero for a single level.
pub fn index_width(levels: usize) -> u8 {
    if levels <= 1 {
        0
    } else {
        (usize::BITS - (levels - 1).leading_zeros()) as u8
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn empirical_quantile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let k = libm::floor(h) as usize;
    if k + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - k as f64;
    let (a, b) = (f64::from(sorted[k]), f64::from(sorted[k + 1]));
    (a + frac * (b - a)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_examples() {
        let cb = Codebook::uniform(-1.0, 1.0, 4).unwrap();
        assert_eq!(cb.boundaries(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let cb = Codebook::uniform(0.0, 1.0, 1).unwrap();
        assert_eq!(cb.boundaries(), &[0.0, 1.0]);
        assert_eq!(cb.midpoints(), &[0.5]);
        let cb = Codebook::uniform(0.0, 10.0, 5).unwrap();
        assert_eq!(cb.boundaries(), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn uniform_errors() {
        assert!(matches!(Codebook::uniform(1.0, 1.0, 4), Err(Error::DegenerateRange { .. })));
        assert!(matches!(Codebook::uniform(2.0, 1.0, 4), Err(Error::DegenerateRange { .. })));
        assert!(matches!(Codebook::uniform(0.0, 1.0, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn quantile_examples() {
        let cb = Codebook::quantile(&[0., 0., 0., 0., 1., 2., 3., 4.], 2).unwrap();
        assert_eq!(cb.boundaries(), &[0.0, 0.5, 4.0]);
        let spaced: Vec<f32> = (0..=10).map(|i| i as f32).collect();
        assert_eq!(Codebook::quantile(&spaced, 2).unwrap().boundaries(), &[0.0, 5.0, 10.0]);
        let cb = Codebook::quantile(&[3.0, -2.0, 7.5, 1.0], 1).unwrap();
        assert_eq!(cb.boundaries(), &[-2.0, 7.5]);
    }

    #[test]
    fn quantile_merges_heavy_atoms() {
        let mut samples = vec![0.0f32; 90];
        samples.extend((1..=10).map(|i| i as f32));
        let cb = Codebook::quantile(&samples, 8).unwrap();
        assert!(cb.levels() < 8);
        assert_eq!(cb.merged(), 8 - cb.levels());
        assert!(cb.boundaries().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn quantile_rejects_constant_samples() {
        assert!(matches!(
            Codebook::quantile(&[2.0, 2.0, 2.0], 4),
            Err(Error::DegenerateRange { .. })
        ));
        assert!(Codebook::quantile(&[], 4).is_err());
    }

    #[test]
    fn index_convention() {
        let cb = Codebook::uniform(-1.0, 1.0, 4).unwrap();
        assert_eq!(cb.index_of(0.3).unwrap(), 2);
        assert_eq!(cb.index_of(-1.0).unwrap(), 0);
        assert_eq!(cb.index_of(-0.5).unwrap(), 0);
        assert_eq!(cb.index_of(-0.49).unwrap(), 1);
        assert_eq!(cb.index_of(1.7).unwrap(), 3);
        assert_eq!(cb.index_of(-8.0).unwrap(), 0);
        assert!(cb.index_of(f32::NAN).is_err());
    }

    #[test]
    fn widths() {
        assert_eq!(index_width(1), 0);
        assert_eq!(index_width(2), 1);
        assert_eq!(index_width(3), 2);
        assert_eq!(index_width(64), 6);
        assert_eq!(index_width(65), 7);
        assert_eq!(index_width(128), 7);
        assert_eq!(index_width(1 << 20), 20);
    }

    #[test]
    fn adjacent_floats_are_merged() {
        let a = 1.0f32;
        let b = f32::from_bits(a.to_bits() + 1);
        let cb = Codebook::from_boundaries(&[0.0, a, b, 2.0]).unwrap();
        assert_eq!(cb.levels(), 2);
        for (j, &m) in cb.midpoints().iter().enumerate() {
            assert!(cb.boundaries()[j] < m && m < cb.boundaries()[j + 1]);
        }
    }
}
