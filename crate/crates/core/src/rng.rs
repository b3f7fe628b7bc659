//! Named, seeded random substreams.
//!
//! Every stochastic stage derives its generator from `(seed, name)`, so
//! adding a stage never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

pub fn substream(seed: u64, name: &str) -> StageRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, "train").random();
        let b: u64 = substream(7, "train").random();
        let c: u64 = substream(7, "sample").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
