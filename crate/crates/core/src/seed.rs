//! Seed plumbing: one root seed fans out into independent, named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in the pipeline.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label (stage name, purpose).
pub fn derive(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Derives a child seed from a parent and an integer coordinate (step, user).
pub fn derive_n(seed: u64, n: u64) -> u64 {
    splitmix64(seed ^ splitmix64(n.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
