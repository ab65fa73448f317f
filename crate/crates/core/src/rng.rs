//! Counter-based random streams.
//!
//! Every draw in a simulation is keyed by `(seed, round, device, purpose)`. The
//! key is hashed into a ChaCha8 seed, so any stream can be regenerated in
//! isolation and two schemes run under the same seed observe the same fading,
//! noise and mini-batch randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// What a stream is used for. Distinct purposes never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Fading,
    Noise,
    Minibatch,
    Schedule,
    Deployment,
    Dataset,
    Partition,
    Init,
    Search,
}

impl Purpose {
    fn tag(self) -> u8 {
        match self {
            Purpose::Fading => 1,
            Purpose::Noise => 2,
            Purpose::Minibatch => 3,
            Purpose::Schedule => 4,
            Purpose::Deployment => 5,
            Purpose::Dataset => 6,
            Purpose::Partition => 7,
            Purpose::Init => 8,
            Purpose::Search => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub round: u64,
    pub device: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, round: u64, device: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            round,
            device,
            purpose,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"otafl-stream");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.round.to_le_bytes());
        hasher.update(self.device.to_le_bytes());
        hasher.update([self.purpose.tag()]);
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(key)
    }
}

/// Shorthand for `StreamKey::new(..).rng()`.
pub fn stream(seed: u64, round: u64, device: u64, purpose: Purpose) -> ChaCha8Rng {
    StreamKey::new(seed, round, device, purpose).rng()
}
