//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed plus a fixed list of coordinates (domain tag, epoch,
//! step, item index), so any stream can be recreated without replaying the
//! ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with stream coordinates into a child seed.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(master), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn stream(master: u64, coords: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, coords))
}

/// Domain tags keep streams for different purposes apart.
pub mod domain {
    pub const DATA: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_SAMPLE: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const INIT: u64 = 5;
    pub const VALIDATION: u64 = 6;
}
