//! Stateless seed derivation.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for episode `index` under `global`. Depends only on the pair, so
/// episodes can run in any order.
pub fn episode_seed(global: u64, index: u64) -> u64 {
    mix64(global ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Seed for a named sub-stream (e.g. "lora-init", "k-schedule").
pub fn stream_seed(base: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(mix64(base), |acc, b| mix64(acc ^ u64::from(b)))
}

/// Hash of an arbitrary string, used to key episodes by id.
pub fn hash_str(s: &str) -> u64 {
    stream_seed(0xC0FF_EE00_D15E_A5E5, s)
}
