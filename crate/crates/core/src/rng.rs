use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
pub fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one subject: mixed cohort seed xor subject index.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    mix(seed) ^ index as u64
}

/// Independent named stream derived from a seed.
pub fn stream(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(mix(seed), |h, b| mix(h ^ b as u64))
}
