//! Wire serialisation and the communication cost model.

pub mod ledger;
pub mod model;
pub mod packing;
pub mod wire;

pub use ledger::{CostLedger, RoundCost};
pub use model::{
    baseline_cost, downlink_cost, format_percent, lossless_total, qsgd_cost, round_total,
    uplink_cost, BaselineCost, Bits, CodebookScope, CostBreakdown, CostConfig, DownlinkMode,
    PerLayer, QsgdCost, RoundTotal,
};
pub use packing::{pack_indices, unpack_indices, PackedPayload};
pub use wire::{BoundaryPrecision, Frame, FrameBits};
