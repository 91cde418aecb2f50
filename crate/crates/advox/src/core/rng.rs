//! Deterministic, labeled random streams.
//!
//! Every randomized stage draws from a ChaCha stream derived from the
//! run seed plus a stable label, so stages never share or race a
//! generator and reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A plain deterministic generator for the given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives independent named streams from one run seed.
#[derive(Debug, Clone, Copy)]
pub struct RngFactory {
    seed: u64,
}

/// FNV-1a; stable across platforms, good enough to separate stream ids.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RngFactory {
    pub fn new(seed: u64) -> Self {
        RngFactory { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream for a named stage.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.stream_n(label, 0)
    }

    /// Stream for a named stage plus an index (per utterance, per
    /// restart, per epoch).
    pub fn stream_n(&self, label: &str, n: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut tag = label.as_bytes().to_vec();
        tag.extend_from_slice(&n.to_le_bytes());
        rng.set_stream(fnv1a64(&tag));
        rng
    }

    /// A new factory whose streams are independent of this one's.
    pub fn subfactory(&self, label: &str) -> RngFactory {
        RngFactory {
            seed: self
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(fnv1a64(label.as_bytes())),
        }
    }
}
