//! Counter-based Gaussian streams.
//!
//! Every draw is addressed by `(seed, domain, path, step)`: the ChaCha key is
//! built from the seed and a domain tag, the ChaCha stream id is the path
//! index, and each step consumes exactly four 32-bit words. Paths can
//! therefore be generated in any order, on any thread, with identical output.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Words consumed per normal draw (two `u64`s for one Box-Muller pair half).
const WORDS_PER_DRAW: u128 = 4;

/// Domain tags keep independent simulations on disjoint key spaces.
pub mod domain {
    pub const DIVIDEND: u64 = 0x4449_5649;
    pub const FEYNMAN_KAC: u64 = 0x464b_4143;
    pub const IDENTITY_SAMPLES: u64 = 0x4944_454e;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u8; 32],
}

impl CounterRng {
    pub fn new(seed: u64, domain: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        Self { key }
    }

    /// Sequential stream for one path, starting at step 0.
    pub fn path(&self, path: u64) -> PathStream {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(path);
        PathStream { rng }
    }

    /// Random access to the normal draw at `(path, step)`.
    pub fn normal_at(&self, path: u64, step: u64) -> f64 {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(path);
        rng.set_word_pos(step as u128 * WORDS_PER_DRAW);
        PathStream { rng }.next_normal()
    }
}

pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    /// Standard normal via Box-Muller, cosine branch only.
    pub fn next_normal(&mut self) -> f64 {
        let (u1, u2) = (self.rng.next_u64(), self.rng.next_u64());
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((u1 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (u2 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform on [0, 1); consumes the same four words as a normal draw.
    pub fn next_uniform(&mut self) -> f64 {
        let u = self.rng.next_u64();
        let _ = self.rng.next_u64();
        (u >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
