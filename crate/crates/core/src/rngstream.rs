//! Named deterministic RNG streams.
//!
//! Every stochastic consumer (demo generation, weight init, training loop,
//! evaluation episodes) draws from its own stream derived as
//! sha256(root_seed_le || label). Streams are independent of each other and
//! of consumption order, which is what makes whole runs bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub fn stream_seed(root: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream_rng(root: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(stream_seed(root, label))
}

/// First eight bytes of the stream seed as a u64, for APIs that take a
/// plain integer seed.
pub fn stream_u64(root: u64, label: &str) -> u64 {
    let s = stream_seed(root, label);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}
