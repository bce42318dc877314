//! Deterministic RNG streams.
//!
//! Every randomized operation in the simulator draws from a ChaCha stream
//! derived from the run seed plus a label and the integer ids of the thing
//! being simulated. Streams are therefore independent of evaluation order,
//! which is what makes per-candidate registration results identical across
//! runs with different budgets or thresholds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream from `seed`, a label, and ids.
pub fn derive_rng(seed: u64, label: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = derive_rng(7, "scan", &[1, 2]);
        let mut b = derive_rng(7, "scan", &[1, 2]);
        let mut c = derive_rng(7, "scan", &[2, 1]);
        let mut d = derive_rng(7, "odom", &[1, 2]);
        let xa: u64 = a.gen();
        assert_eq!(xa, b.gen::<u64>());
        assert_ne!(xa, c.gen::<u64>());
        assert_ne!(xa, d.gen::<u64>());
    }
}
