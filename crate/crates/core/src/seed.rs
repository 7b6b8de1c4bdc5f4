//! Per-sample seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the little-endian bytes of `master_seed` followed by
/// the UTF-8 bytes of `sample_id`.
pub fn derive_sample_seed(master_seed: u64, sample_id: &str) -> u64 {
    master_seed
        .to_le_bytes()
        .iter()
        .chain(sample_id.as_bytes())
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// The generator every seeded component in this crate draws from.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
