//! Seed derivation for independent, reproducible rng streams.

/// Mix a base seed with a purpose tag and two indices. Streams derived for
/// different (tag, a, b) tuples are independent for practical purposes, and
/// the mapping is fixed: it is part of the reproducibility contract.
pub(crate) fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    for v in [a, b] {
        x ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
    }
    x
}
