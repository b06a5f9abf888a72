//! Seed derivation. Every random stream in the pipeline comes from one user seed:
//!
//! - synthetic data: `derive(seed, "synth")`
//! - RANSAC for the pair (query, candidate): `pair_seed(derive(seed, "ransac"), query, candidate)`

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;

pub fn derive(seed: u64, purpose: &str) -> u64 {
    mix64(seed ^ fnv1a(purpose.as_bytes(), FNV_OFFSET))
}

/// Seed for verifying `query` against `candidate`; independent of evaluation order.
pub fn pair_seed(seed: u64, query: &str, candidate: &str) -> u64 {
    let mut h = fnv1a(query.as_bytes(), FNV_OFFSET);
    // Separator byte outside UTF-8 so ("ab","c") and ("a","bc") differ.
    h = fnv1a(&[0xFF], h);
    h = fnv1a(candidate.as_bytes(), h);
    mix64(seed ^ mix64(h))
}
