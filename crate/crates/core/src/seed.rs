//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by `(root seed, stream tag,
//! counter)` and mixed with SplitMix64, so sample `i` gets the same RNG no
//! matter which thread generates it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct constants keep unrelated streams decorrelated.
pub mod stream {
    pub const IDENTITY: u64 = 0x1D;
    pub const SAMPLE: u64 = 0x5A;
    pub const TEMPLATE: u64 = 0x7E;
    pub const PARAMS: u64 = 0xA1;
    pub const BATCHES: u64 = 0xB4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, tag: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ tag) ^ counter)
}

pub fn rng(root: u64, tag: u64, counter: u64) -> Rng {
    Rng::seed_from_u64(derive(root, tag, counter))
}
