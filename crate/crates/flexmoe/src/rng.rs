//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate is a ChaCha20 stream derived from
//! a base seed plus a string tag (and optionally an index), so adding or
//! reordering one consumer never shifts the draws seen by another. The
//! derivation is a small splitmix64 expansion of `base ⊕ fnv1a(tag) ⊕ index`;
//! it only needs to be deterministic and well-spread, not cryptographic.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// 64-bit FNV-1a over the tag bytes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 step; the standard finalizer used to expand a seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 32-byte ChaCha seed derived from `(base, tag, index)`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut state = base ^ fnv1a(tag.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// Fresh deterministic stream for `(base, tag, index)`.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(base, tag, index))
}
