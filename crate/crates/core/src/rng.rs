//! Named, index-addressable random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a root
//! seed, a stage label and an index, so results do not depend on how work is
//! split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from a parent seed and a stage label.
pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(label)))
}

/// Derive a child seed from a parent seed and an integer index.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

/// Generator for the `index`-th substream of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_index(seed, index))
}
