//! Seed plumbing: every random choice in the crate flows from one `u64` seed
//! through named sub-streams, so any component of an experiment can be
//! regenerated independently of the others.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Deterministic generator for the given seed and stream label.
///
/// The label selects an independent stream of the same generator, so
/// `substream(s, "init")` and `substream(s, "shifts")` never overlap.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
