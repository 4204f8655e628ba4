//! Named random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream `name` of the generator seeded with `seed`. Different names give
/// independent streams; the same `(seed, name)` always gives the same one.
pub fn substream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}
