//! Seed derivation for independent deterministic substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag and indices; cheap, stable, and good enough to
/// decorrelate substreams of a ChaCha generator.
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in base.to_le_bytes() {
        eat(b);
    }
    for b in tag.bytes() {
        eat(b);
    }
    for ix in indices {
        for b in ix.to_le_bytes() {
            eat(b);
        }
    }
    h
}

/// A ChaCha stream for (base seed, purpose tag, indices).
pub fn substream(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, indices))
}
