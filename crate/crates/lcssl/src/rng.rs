//! Seed derivation for deterministic, platform-portable random streams.
//!
//! Every stochastic decision in the crate is drawn from a `ChaCha8Rng`
//! seeded by mixing a base seed with structural indices (step, sample,
//! stream). Streams are therefore identical across runs and platforms and
//! independent of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche for combining seed components.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with up to three structural indices into one 64-bit seed.
pub fn mix_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut s = splitmix64(base ^ 0x243f_6a88_85a3_08d3);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    splitmix64(s ^ c.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
}

/// The crate-wide RNG: portable, seedable, cheap to construct per sample.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_is_deterministic_and_sensitive() {
        assert_eq!(mix_seed(1, 2, 3, 4), mix_seed(1, 2, 3, 4));
        assert_ne!(mix_seed(1, 2, 3, 4), mix_seed(1, 2, 3, 5));
        assert_ne!(mix_seed(1, 2, 3, 4), mix_seed(2, 2, 3, 4));
    }

    #[test]
    fn streams_reproduce() {
        let mut a = rng_from_seed(mix_seed(7, 0, 0, 0));
        let mut b = rng_from_seed(mix_seed(7, 0, 0, 0));
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }
}
