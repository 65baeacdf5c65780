//! Seed fan-out.
//!
//! Every random stream in a run is derived from one user seed and a
//! component name: the subseed is the first eight bytes (little-endian) of
//! `SHA-256(seed as u64 LE ‖ component UTF-8)`. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(seed: u64, component: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, component))
}
