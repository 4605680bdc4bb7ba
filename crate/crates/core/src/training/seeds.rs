//! Deterministic seed derivation. All randomness in the toolkit flows from a
//! base seed through pure mixing, so any unit of work (a crop, an epoch, a
//! parameter tensor) owns an independent stream that does not depend on
//! scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an ordered list of parts into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}

/// Well-known stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CROP: u64 = 2;
    pub const SPATIAL: u64 = 3;
    pub const INTENSITY: u64 = 4;
    pub const EPOCH_ORDER: u64 = 5;
    pub const FINETUNE_AUG: u64 = 6;
    pub const SUBSET: u64 = 7;
}

/// RNG for a (base seed, stream, coordinates) tuple.
pub fn rng_for(base: u64, stream: u64, coords: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(2 + coords.len());
    parts.push(base);
    parts.push(stream);
    parts.extend_from_slice(coords);
    ChaCha8Rng::seed_from_u64(mix(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mixing_is_order_sensitive_and_stable() {
        assert_eq!(mix(&[1, 2, 3]), mix(&[1, 2, 3]));
        assert_ne!(mix(&[1, 2, 3]), mix(&[3, 2, 1]));
        assert_ne!(mix(&[0]), mix(&[1]));
    }

    #[test]
    fn streams_are_independent() {
        let mut a = rng_for(7, stream::CROP, &[0, 0]);
        let mut b = rng_for(7, stream::CROP, &[0, 1]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
