//! Analytic per-client, per-round communication cost.
//!
//! All quantities are in bits. Amortised codebook terms are fractional, so
//! totals are kept as exact rationals and rounded up only for reporting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_rational::Ratio;
use num_traits::Zero;

use crate::error::{invalid, Result};
use crate::quant::index_width;

/// Exact bit count.
pub type Bits = Ratio<i128>;

pub const FLOAT_BITS: u32 = 32;

fn bits(n: u128) -> Bits {
    Bits::from_integer(n as i128)
}

/// How many codebooks a refresh transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookScope {
    /// One codebook per layer: `Σ_ℓ b·L_ℓ/T_ℓ`.
    PerLayer,
    /// A single model-wide codebook: `b·L/T`. Requires uniform `L` and `T`.
    Shared,
}

/// A per-layer setting given either once for all layers or layer by layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerLayer(pub Vec<usize>);

impl PerLayer {
    pub fn uniform(v: usize) -> Self {
        Self(alloc::vec![v])
    }

    fn resolve(&self, layers: usize, what: &str) -> Result<Vec<usize>> {
        match self.0.len() {
            1 => Ok(alloc::vec![self.0[0]; layers]),
            n if n == layers => Ok(self.0.clone()),
            n => Err(invalid(format!("{what} lists {n} values for {layers} layers"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownlinkMode {
    FullPrecision,
    Quantised { levels: PerLayer, refresh_period: PerLayer },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostConfig {
    /// Bits per transmitted boundary, `b`.
    pub boundary_bits: u32,
    pub levels: PerLayer,
    pub refresh_period: PerLayer,
    pub downlink: DownlinkMode,
    pub scope: CodebookScope,
    /// Whether the two range endpoints travel with the codebook, making a
    /// refresh cost `b·(L + 1)` instead of `b·L`.
    pub endpoints_sent: bool,
}

impl CostConfig {
    /// Uniform `L` and `T`, per-layer codebooks, full-precision downlink.
    pub fn uniform(boundary_bits: u32, levels: usize, refresh_period: usize) -> Self {
        Self {
            boundary_bits,
            levels: PerLayer::uniform(levels),
            refresh_period: PerLayer::uniform(refresh_period),
            downlink: DownlinkMode::FullPrecision,
            scope: CodebookScope::PerLayer,
            endpoints_sent: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundary_bits == 0 {
            return Err(invalid("boundary_bits must be positive"));
        }
        let check = |p: &PerLayer, what: &str| -> Result<()> {
            if p.0.is_empty() || p.0.contains(&0) {
                return Err(invalid(format!("{what} must be a non-empty list of positive values")));
            }
            Ok(())
        };
        check(&self.levels, "levels")?;
        check(&self.refresh_period, "refresh_period")?;
        if let DownlinkMode::Quantised { levels, refresh_period } = &self.downlink {
            check(levels, "downlink levels")?;
            check(refresh_period, "downlink refresh_period")?;
        }
        Ok(())
    }
}

/// Index bits and amortised codebook bits of one direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostBreakdown {
    pub index_bits: u128,
    pub codebook_bits: Bits,
}

impl CostBreakdown {
    pub fn total(&self) -> Bits {
        bits(self.index_bits) + self.codebook_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineCost {
    /// `32·d`.
    pub uplink: u128,
    /// `64·d`, uplink plus full-precision downlink.
    pub total: u128,
}

pub fn baseline_cost(layer_dims: &[usize]) -> BaselineCost {
    let d: u128 = layer_dims.iter().map(|&x| x as u128).sum();
    BaselineCost {
        uplink: u128::from(FLOAT_BITS) * d,
        total: 2 * u128::from(FLOAT_BITS) * d,
    }
}

fn bucketed(
    layer_dims: &[usize],
    levels: &PerLayer,
    refresh: &PerLayer,
    cfg: &CostConfig,
) -> Result<CostBreakdown> {
    let n = layer_dims.len();
    let levels = levels.resolve(n, "levels")?;
    let refresh = refresh.resolve(n, "refresh_period")?;
    let b = u128::from(cfg.boundary_bits);
    let sent = |l: usize| l as u128 + u128::from(cfg.endpoints_sent);

    let index_bits = layer_dims
        .iter()
        .zip(&levels)
        .map(|(&d, &l)| d as u128 * u128::from(index_width(l)))
        .sum();
    let codebook_bits = match cfg.scope {
        CodebookScope::PerLayer => levels
            .iter()
            .zip(&refresh)
            .map(|(&l, &t)| Bits::new((b * sent(l)) as i128, t as i128))
            .fold(Bits::zero(), |a, x| a + x),
        CodebookScope::Shared => {
            if n == 0 {
                Bits::zero()
            } else if levels.iter().any(|&l| l != levels[0]) || refresh.iter().any(|&t| t != refresh[0]) {
                return Err(invalid("a shared codebook needs uniform levels and refresh period"));
            } else {
                Bits::new((b * sent(levels[0])) as i128, refresh[0] as i128)
            }
        }
    };
    Ok(CostBreakdown {
        index_bits,
        codebook_bits,
    })
}

/// `Σ_ℓ (d_ℓ·⌈log2 L_ℓ⌉ + b·L_ℓ/T_ℓ)`.
pub fn uplink_cost(layer_dims: &[usize], cfg: &CostConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    bucketed(layer_dims, &cfg.levels, &cfg.refresh_period, cfg)
}

/// `32·d` at full precision, otherwise the uplink decomposition with the
/// downlink levels and refresh period.
pub fn downlink_cost(layer_dims: &[usize], cfg: &CostConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    match &cfg.downlink {
        DownlinkMode::FullPrecision => Ok(CostBreakdown {
            index_bits: baseline_cost(layer_dims).uplink,
            codebook_bits: Bits::zero(),
        }),
        DownlinkMode::Quantised { levels, refresh_period } => {
            bucketed(layer_dims, levels, refresh_period, cfg)
        }
    }
}

/// Per-client, per-round total and its saving against the 64·d baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTotal {
    pub exact: Bits,
    /// `⌈exact⌉`, the figure reported in cost tables.
    pub ceiling: u128,
    /// `1 − exact / baseline_total`.
    pub reduction: Bits,
}

impl RoundTotal {
    fn against_baseline(exact: Bits, layer_dims: &[usize]) -> Self {
        let baseline = baseline_cost(layer_dims).total;
        let reduction = if baseline == 0 {
            Bits::zero()
        } else {
            Bits::from_integer(1) - exact / bits(baseline)
        };
        Self {
            ceiling: exact.ceil().to_integer() as u128,
            exact,
            reduction,
        }
    }

    pub fn reduction_percent(&self) -> String {
        format_percent(&self.reduction)
    }
}

pub fn round_total(layer_dims: &[usize], cfg: &CostConfig) -> Result<RoundTotal> {
    let exact = uplink_cost(layer_dims, cfg)?.total() + downlink_cost(layer_dims, cfg)?.total();
    Ok(RoundTotal::against_baseline(exact, layer_dims))
}

/// The uncompressed exchange, for comparison rows.
pub fn lossless_total(layer_dims: &[usize]) -> RoundTotal {
    RoundTotal::against_baseline(bits(baseline_cost(layer_dims).total), layer_dims)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QsgdCost {
    /// `d·(⌈log2 s⌉ + 1) + 32·layers`: magnitude and sign bits per
    /// coordinate plus one norm per layer.
    pub uplink: u128,
    pub downlink: u128,
    pub total: RoundTotal,
}

/// QSGD comparator cost with a full-precision downlink.
pub fn qsgd_cost(layer_dims: &[usize], levels: usize) -> Result<QsgdCost> {
    if levels == 0 {
        return Err(invalid("QSGD needs at least one level"));
    }
    let d: u128 = layer_dims.iter().map(|&x| x as u128).sum();
    let uplink = d * (u128::from(index_width(levels)) + 1)
        + u128::from(FLOAT_BITS) * layer_dims.len() as u128;
    let downlink = baseline_cost(layer_dims).uplink;
    Ok(QsgdCost {
        uplink,
        downlink,
        total: RoundTotal::against_baseline(bits(uplink + downlink), layer_dims),
    })
}

/// Percentage with two decimals, rounded half away from zero.
pub fn format_percent(fraction: &Bits) -> String {
    let hundredths = (fraction * Bits::from_integer(10_000)).round().to_integer();
    let sign = if hundredths < 0 { "-" } else { "" };
    let abs = hundredths.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

/// Lossy conversion for plotting and CSV output.
pub fn to_f64(b: &Bits) -> f64 {
    *b.numer() as f64 / *b.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const MNIST: [usize; 5] = [50_240, 2_535, 1_200, 465, 160];

    fn shared(levels: usize) -> CostConfig {
        CostConfig {
            scope: CodebookScope::Shared,
            ..CostConfig::uniform(16, levels, 10)
        }
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_cost(&MNIST).total, 3_494_400);
        assert_eq!(baseline_cost(&[1]), BaselineCost { uplink: 32, total: 64 });
        assert_eq!(baseline_cost(&[100]).uplink, 3_200);
    }

    #[test]
    fn uplink_examples() {
        let c = uplink_cost(&[1000], &CostConfig::uniform(16, 64, 10)).unwrap();
        assert_eq!(c.index_bits, 6000);
        assert_eq!(c.total(), Bits::new(61_024, 10));

        let c = uplink_cost(&[1000], &CostConfig::uniform(16, 1, 10)).unwrap();
        assert_eq!(c.index_bits, 0);
        assert_eq!(c.codebook_bits, Bits::new(16, 10));

        let c = uplink_cost(&MNIST, &shared(64)).unwrap();
        assert_eq!(c.total(), Bits::new(3_277_024, 10));
    }

    #[test]
    fn per_layer_scope_sums_codebooks() {
        let c = uplink_cost(&MNIST, &CostConfig::uniform(16, 64, 10)).unwrap();
        assert_eq!(c.codebook_bits, Bits::from_integer(512));
    }

    #[test]
    fn endpoints_add_one_boundary() {
        let cfg = CostConfig { endpoints_sent: true, ..CostConfig::uniform(16, 4, 2) };
        assert_eq!(uplink_cost(&[10], &cfg).unwrap().codebook_bits, Bits::from_integer(40));
    }

    #[test]
    fn downlink_examples() {
        let full = downlink_cost(&MNIST, &shared(64)).unwrap();
        assert_eq!(full.total(), Bits::from_integer(1_747_200));
        let cfg = CostConfig {
            downlink: DownlinkMode::Quantised {
                levels: PerLayer::uniform(64),
                refresh_period: PerLayer::uniform(10),
            },
            ..shared(64)
        };
        assert_eq!(downlink_cost(&MNIST, &cfg).unwrap().total(), Bits::new(3_277_024, 10));
        assert_eq!(downlink_cost(&[], &shared(64)).unwrap().total(), Bits::zero());
    }

    #[test]
    fn table_totals() {
        let t = round_total(&MNIST, &shared(64)).unwrap();
        assert_eq!(t.ceiling, 2_074_903);
        assert_eq!(t.reduction_percent(), "40.62");
        let t = round_total(&MNIST, &shared(128)).unwrap();
        assert_eq!(t.ceiling, 2_129_605);
        assert_eq!(t.reduction_percent(), "39.06");
        let t = lossless_total(&MNIST);
        assert_eq!(t.ceiling, 3_494_400);
        assert_eq!(t.reduction_percent(), "0.00");
    }

    #[test]
    fn qsgd_examples() {
        let q = qsgd_cost(&MNIST, 64).unwrap();
        assert_eq!(q.total.ceiling, 2_129_560);
        assert_eq!(q.total.reduction_percent(), "39.06");
        let q = qsgd_cost(&MNIST, 128).unwrap();
        assert_eq!(q.total.ceiling, 2_184_160);
        assert_eq!(q.total.reduction_percent(), "37.50");
        let q = qsgd_cost(&[1], 1).unwrap();
        assert_eq!((q.uplink, q.downlink), (33, 32));
        assert_eq!(q.total.ceiling, 65);
    }

    #[test]
    fn config_validation() {
        assert!(uplink_cost(&[10], &CostConfig::uniform(0, 4, 2)).is_err());
        assert!(uplink_cost(&[10], &CostConfig::uniform(16, 0, 2)).is_err());
        assert!(uplink_cost(&[10], &CostConfig::uniform(16, 4, 0)).is_err());
        let cfg = CostConfig { levels: PerLayer(vec![4, 8]), ..CostConfig::uniform(16, 4, 2) };
        assert!(uplink_cost(&[10, 10, 10], &cfg).is_err());
        assert!(uplink_cost(&[10, 10], &cfg).is_ok());
        let cfg = CostConfig { scope: CodebookScope::Shared, ..cfg };
        assert!(uplink_cost(&[10, 10], &cfg).is_err());
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(&Bits::new(1, 8)), "12.50");
        assert_eq!(format_percent(&Bits::new(-1, 3)), "-33.33");
        assert_eq!(format_percent(&Bits::new(2, 3)), "66.67");
    }
}
