//! Named random sub-streams derived from one run seed.
//!
//! `seed` and the stream name are folded through splitmix64 into the 32-byte
//! seed of a ChaCha8 generator, so each component (initialization, data order,
//! synthetic corpus) can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_STREAM: &str = "init";
pub const DATA_ORDER_STREAM: &str = "data-order";
pub const CORPUS_STREAM: &str = "synthetic-corpus";

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(name);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for state 0 from the reference implementation.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = substream(1, INIT_STREAM).random();
        let b: u64 = substream(1, INIT_STREAM).random();
        let c: u64 = substream(1, DATA_ORDER_STREAM).random();
        let d: u64 = substream(2, INIT_STREAM).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
