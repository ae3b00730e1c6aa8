use crate::error::{invalid, Result};

/// Dispersion summary of one update vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// `max − min`.
    pub range: f64,
    /// Population variance.
    pub variance: f64,
    /// `m4/m2² − 3`; 0 for a constant vector.
    pub excess_kurtosis: f64,
}

pub fn update_stats(values: &[f32]) -> Result<UpdateStats> {
    if values.is_empty() {
        return Err(invalid("statistics of an empty vector"));
    }
    let n = values.len() as f64;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in values {
        let v = f64::from(v);
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    let mean = sum / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in values {
        let d = f64::from(v) - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    let excess_kurtosis = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };
    Ok(UpdateStats {
        range: hi - lo,
        variance: m2,
        excess_kurtosis,
    })
}
