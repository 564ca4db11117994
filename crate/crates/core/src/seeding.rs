//! Deterministic seed derivation.
//!
//! Every randomized component receives a seed derived from the master seed,
//! a component name and a numeric id. Adding a new component never perturbs
//! the randomness of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, component, id)`.
pub fn derive_seed(master: u64, component: &str, id: u64) -> u64 {
    // FNV-1a over the component name, then splitmix folds in master and id.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(id))
}

/// Deterministic RNG for a derived seed.
pub fn rng_for(master: u64, component: &str, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component, id))
}
