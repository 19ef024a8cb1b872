//! Seeded, splittable random streams.
//!
//! A stream is identified by a root seed and a path of integer keys, e.g.
//! `(seed, stage, attempt)`. Each path maps to an independent ChaCha12
//! generator, so results depend only on the path and never on which thread
//! evaluated it.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: [u64; 4],
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u64; 4];
        let mut s = seed;
        for k in key.iter_mut() {
            s = splitmix(s);
            *k = s;
        }
        RngStream { key }
    }

    /// Child stream for one more path component.
    pub fn child(&self, index: u64) -> Self {
        let mut key = [0u64; 4];
        for (i, k) in key.iter_mut().enumerate() {
            *k = splitmix(self.key[i] ^ splitmix(index.wrapping_add((i as u64).wrapping_mul(0x632B_E59B_D9B4_E019))));
        }
        RngStream { key }
    }

    pub fn substream(&self, path: &[u64]) -> Self {
        path.iter().fold(*self, |s, &i| s.child(i))
    }

    pub fn rng(&self) -> StreamRng {
        let mut seed = [0u8; 32];
        for (chunk, k) in seed.chunks_exact_mut(8).zip(self.key) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}
