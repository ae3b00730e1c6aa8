//! Per-round record of the bits a simulation actually put on the wire.

use alloc::vec::Vec;

use num_traits::Zero;

use super::model::Bits;

/// Bits exchanged in one round, summed over the round's clients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundCost {
    /// Indices, QSGD symbols, or raw floats of client updates.
    pub uplink_payload_bits: u64,
    /// Frame headers, QSGD norms, and byte padding on the uplink.
    pub uplink_overhead_bits: u64,
    /// Codebook boundaries charged this round (non-zero on refresh rounds).
    pub codebook_bits: u64,
    /// Codebook charge spread evenly over its refresh window.
    pub codebook_bits_amortised: Bits,
    /// Model broadcast.
    pub downlink_model_bits: u64,
    /// Headers and padding of codebook announcements.
    pub downlink_overhead_bits: u64,
    /// Bits measured from the serialised messages, for cross-checking.
    pub wire_bits: u64,
}

impl RoundCost {
    /// Everything the ledger accounts for this round.
    pub fn ledger_bits(&self) -> u64 {
        self.uplink_payload_bits
            + self.uplink_overhead_bits
            + self.codebook_bits
            + self.downlink_model_bits
            + self.downlink_overhead_bits
    }

    /// The round total with the codebook charge replaced by its amortised share.
    pub fn amortised_bits(&self) -> Bits {
        Bits::from_integer(i128::from(self.ledger_bits() - self.codebook_bits))
            + self.codebook_bits_amortised
    }

    pub fn is_consistent(&self) -> bool {
        self.ledger_bits() == self.wire_bits
    }
}

/// Append-only ledger for one run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostLedger {
    /// Full-precision calibration exchange before round 0, if any.
    pub calibration: Option<RoundCost>,
    pub rounds: Vec<RoundCost>,
}

impl CostLedger {
    pub fn push(&mut self, cost: RoundCost) {
        self.rounds.push(cost);
    }

    pub fn total_bits(&self) -> u64 {
        self.calibration.iter().chain(&self.rounds).map(RoundCost::ledger_bits).sum()
    }

    pub fn total_wire_bits(&self) -> u64 {
        self.calibration.iter().chain(&self.rounds).map(|r| r.wire_bits).sum()
    }

    pub fn actual_codebook_bits(&self, window: core::ops::Range<usize>) -> u64 {
        self.rounds[window].iter().map(|r| r.codebook_bits).sum()
    }

    pub fn amortised_codebook_bits(&self, window: core::ops::Range<usize>) -> Bits {
        self.rounds[window]
            .iter()
            .fold(Bits::zero(), |acc, r| acc + r.codebook_bits_amortised)
    }

    /// `1 − total / baseline` where `baseline` is the uncompressed total for
    /// the same run.
    pub fn reduction_vs(&self, baseline_bits: u64) -> Bits {
        if baseline_bits == 0 {
            return Bits::zero();
        }
        Bits::from_integer(1)
            - Bits::new(i128::from(self.total_bits()), i128::from(baseline_bits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(codebook: u64, amortised: Bits) -> RoundCost {
        let mut r = RoundCost {
            uplink_payload_bits: 600,
            uplink_overhead_bits: 80,
            codebook_bits: codebook,
            codebook_bits_amortised: amortised,
            downlink_model_bits: 3200,
            downlink_overhead_bits: if codebook > 0 { 80 } else { 0 },
            wire_bits: 0,
        };
        r.wire_bits = r.ledger_bits();
        r
    }

    #[test]
    fn windows_balance() {
        let per_round = Bits::new(1040, 10);
        let mut ledger = CostLedger::default();
        for k in 0..30 {
            ledger.push(round(if k % 10 == 0 { 1040 } else { 0 }, per_round));
        }
        for w in 0..3 {
            let window = w * 10..(w + 1) * 10;
            assert_eq!(
                Bits::from_integer(i128::from(ledger.actual_codebook_bits(window.clone()))),
                ledger.amortised_codebook_bits(window)
            );
        }
        assert!(ledger.rounds.iter().all(RoundCost::is_consistent));
        assert_eq!(ledger.total_bits(), ledger.total_wire_bits());
    }

    #[test]
    fn amortised_round_bits() {
        let r = round(1040, Bits::new(104, 1));
        assert_eq!(r.amortised_bits(), Bits::from_integer(600 + 80 + 104 + 3200 + 80));
    }

    #[test]
    fn reduction() {
        let mut ledger = CostLedger::default();
        ledger.push(round(0, Bits::zero()));
        let total = ledger.total_bits();
        assert_eq!(ledger.reduction_vs(total * 2), Bits::new(1, 2));
        assert_eq!(ledger.reduction_vs(0), Bits::zero());
    }
}
