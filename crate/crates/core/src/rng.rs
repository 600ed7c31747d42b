//! Seed derivation and deterministic RNG construction.
//!
//! Every stochastic component in the crate draws from a ChaCha8 stream seeded
//! through this module, so that a run is a pure function of its configured
//! seeds. Sub-streams (per epoch, per batch, per sample) are derived with a
//! SplitMix64 mix of the parent seed and the stream coordinates, which keeps
//! streams decorrelated without any shared mutable state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Good avalanche behavior, cheap, stable.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and up to three stream
/// coordinates (epoch, batch, lane, ...). Order matters.
pub fn derive_seed(parent: u64, coords: &[u64]) -> u64 {
    let mut acc = splitmix64(parent);
    for &c in coords {
        acc = splitmix64(acc ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    acc
}

/// A deterministic RNG for the given seed. ChaCha8 is stable across
/// platforms and fast enough for the sampling volumes used here.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A deterministic RNG for a derived sub-stream.
pub fn rng_for(parent: u64, coords: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(parent, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let mut a = rng_from_seed(42);
        let mut b = rng_from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn derived_streams_differ_by_coordinate() {
        let s1 = derive_seed(7, &[0, 0]);
        let s2 = derive_seed(7, &[0, 1]);
        let s3 = derive_seed(7, &[1, 0]);
        assert_ne!(s1, s2);
        assert_ne!(s1, s3);
        assert_ne!(s2, s3);
        // Coordinate order matters.
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
    }

    #[test]
    fn derivation_is_stable() {
        // Frozen value: changing the mixing scheme silently would break
        // reproducibility of every recorded run.
        assert_eq!(derive_seed(0, &[]), splitmix64(0));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    }
}
