//! Deriving per-stage and per-CDN RNG seeds from the run seed.
//!
//! The derivation is a fixed FNV-1a so identical configurations replay
//! identically across program versions and platforms; the standard
//! library hasher makes no such promise.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Folds a label and the base seed into a new seed. Different labels
/// give independent streams; the same (base, label) pair always gives
/// the same value.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in base.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}
