//! Deterministic per-subsystem random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a of the label; used as the ChaCha stream id.
fn label_stream(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// A stream keyed by `(seed, label)`. Streams with different labels are
/// independent, so adding draws in one subsystem never shifts another.
pub fn forked_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_stream(label));
    rng
}
