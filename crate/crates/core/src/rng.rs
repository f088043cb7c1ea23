//! Reproducible random streams.
//!
//! Every random decision derives from one root seed. A sub-stream is a
//! ChaCha8 generator keyed by the root seed whose 64-bit stream id is the
//! FNV-1a hash of a path of integers (purpose, epoch, batch, ...). ChaCha is
//! counter based, so sub-streams are independent and can be created in any
//! order, which keeps results identical regardless of scheduling.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Prng;

pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const CORRUPT: u64 = 3;
pub const DROPOUT: u64 = 4;
pub const TEACHER: u64 = 5;
pub const SGNS: u64 = 6;
pub const GENERATE: u64 = 7;

pub fn stream(root_seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    for p in path {
        h.write_u64(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(h.finish());
    rng
}

/// 64-bit FNV-1a digest of a byte string.
pub fn digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}
