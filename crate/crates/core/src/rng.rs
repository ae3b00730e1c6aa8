//! Seed discipline.
//!
//! One root seed feeds every random decision in a run. Child seeds are
//! derived by hashing `(root, purpose, a, b)`, so the stream a client sees
//! depends only on its identity and the round, never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod purpose {
    pub const INIT: &str = "init";
    pub const PRETRAIN_SPLIT: &str = "pretrain-split";
    pub const PRETRAIN: &str = "pretrain";
    pub const PARTITION: &str = "partition";
    pub const SAMPLE: &str = "sample";
    pub const CALIBRATION: &str = "calibration";
    pub const LOCAL: &str = "local";
    pub const QSGD: &str = "qsgd";
    pub const DATA: &str = "data";
}

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a child seed from the root seed, a purpose tag and two
/// coordinates (typically round and client id).
pub fn derive_seed(root: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(root);
    h = splitmix64(h ^ fnv1a(tag));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Shorthand for `rng_from_seed(derive_seed(..))`.
pub fn derive_rng(root: u64, tag: &str, a: u64, b: u64) -> SimRng {
    rng_from_seed(derive_seed(root, tag, a, b))
}
