//! Hierarchical RNG keys.
//!
//! Every source of randomness in the crate derives from a single `u64`
//! seed through a tree of [`RngKey`]s. Child keys are produced by mixing
//! the parent key with an integer tag, so a stream keyed by
//! (epoch, batch, layer) is reproducible without any shared mutable
//! state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey(u64);

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(mix(seed))
    }

    /// Derive an independent child stream for `tag`.
    pub fn child(self, tag: u64) -> Self {
        RngKey(mix(self.0 ^ tag.wrapping_mul(0xff51_afd7_ed55_8ccd)))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
