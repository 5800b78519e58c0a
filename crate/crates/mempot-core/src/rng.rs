//! Deterministic seed derivation. Every randomized stage of a run
//! draws from its own hash-derived substream, so adding, removing, or
//! reordering stages never perturbs the seeds the others see.

use sha2::{Digest, Sha256};

/// Derives a stage-local seed from the run's global seed, a stage
/// label, and an index within the stage.
pub fn substream_seed(global_seed: u64, stage: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_stable_and_distinct() {
        let a = substream_seed(7, "docs", 0);
        assert_eq!(a, substream_seed(7, "docs", 0));
        assert_ne!(a, substream_seed(7, "docs", 1));
        assert_ne!(a, substream_seed(7, "caps", 0));
        assert_ne!(a, substream_seed(8, "docs", 0));
        // Stage and index must not be confusable: ("ab", suffix of
        // index bytes) vs ("abc", ...) style collisions are prevented
        // by hashing fixed-width fields around the label.
        assert_ne!(substream_seed(7, "a", 0), substream_seed(7, "b", 0));
    }
}
