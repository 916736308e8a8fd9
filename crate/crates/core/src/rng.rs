//! Seeding. Every random source in the crate is a ChaCha8 stream cipher
//! generator (`rand_chacha::ChaCha8Rng`), which is counter based and yields
//! identical sequences on every platform. Child generators are derived from a
//! master seed and a path of indices, so results never depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a master seed and an index path into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &i| {
        splitmix64(acc ^ splitmix64(i))
    })
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the child identified by `path` under `master`.
pub fn derive(master: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(master, path))
}

/// Domain tags used as the first path element so that unrelated consumers
/// of the same master seed never share a stream.
pub mod domain {
    pub const EXPLORATION: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const EVALUATION: u64 = 3;
    pub const CALIBRATION: u64 = 4;
    pub const FIXTURE: u64 = 5;
}
