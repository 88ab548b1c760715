//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose seed
//! is derived from a master seed plus a path of indices (run, session, round,
//! draw). Streams for different paths are statistically independent, so
//! candidate draws can be evaluated concurrently without affecting results:
//! the bytes a draw sees depend only on its path, never on scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_ORDER: u64 = 0x9a3f_51c2_0ed1_7b45;
pub const TAG_SESSION: u64 = 0x5b1d_e92c_a774_3f01;
pub const TAG_ROUND: u64 = 0xc0de_4a11_93d5_2b67;
pub const TAG_DRAW: u64 = 0x17e3_6bd9_f024_8aa3;
pub const TAG_VAL_SPLIT: u64 = 0x3d82_904f_6c1b_e5d7;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a path of indices into the master seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = mix(master);
    for &p in path {
        state = mix(state ^ mix(p));
    }
    state
}

/// Independent random stream for the given path.
pub fn substream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
