//! Named, independently seeded PRNG streams.
//!
//! Every random quantity in the crate is drawn from a stream identified by
//! `(master_seed, name)`. The master seed selects the ChaCha key and the
//! name selects the stream counter, so streams never overlap, adding a new
//! stream never perturbs existing ones, and any stream can be reproduced in
//! isolation. Streams are resumable: their exact position can be saved and
//! restored (used by training checkpoints).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stable 64-bit FNV-1a hash of a stream name (never changes across
/// versions, unlike `std`'s `DefaultHasher`).
fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named PRNG stream derived from a master seed.
#[derive(Debug, Clone)]
pub struct StreamRng {
    name: String,
    rng: ChaCha8Rng,
}

impl StreamRng {
    /// Open the stream `name` under `master_seed`, positioned at the start.
    pub fn new(master_seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(fnv1a64(name));
        StreamRng {
            name: name.to_string(),
            rng,
        }
    }

    /// Open a numbered substream, e.g. one per bootstrap resample or
    /// k-means restart, so independent tasks can run in any order (or in
    /// parallel) without sharing state.
    pub fn substream(master_seed: u64, name: &str, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        // Mix the index into the name hash; the odd multiplier keeps
        // distinct indices on distinct streams.
        let h = fnv1a64(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index);
        rng.set_stream(h);
        StreamRng {
            name: format!("{name}#{index}"),
            rng,
        }
    }

    /// Stream name (diagnostic only).
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits, the standard open-right construction.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng)
    }

    /// Fill `out` with standard normal draws.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift bounded draw; bias is < 2^-64 and irrelevant here,
        // but determinism matters, so avoid rand's rejection sampling whose
        // draw count depends on the platform's word size.
        let x = self.rng.next_u64();
        ((u128::from(x) * n as u128) >> 64) as usize
    }

    /// Standard Gumbel draw `-ln(-ln u)` with `u` clipped away from {0, 1}.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    /// One draw from Gamma(shape, 1). Panics on non-positive shape.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        use rand_distr::{Distribution, Gamma};
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(&mut self.rng)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Snapshot the stream position for checkpointing.
    pub fn state(&self) -> StreamState {
        StreamState {
            name: self.name.clone(),
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: format!("{}", self.rng.get_word_pos()),
        }
    }

    /// Restore a stream from a checkpointed state.
    pub fn from_state(state: &StreamState) -> crate::Result<Self> {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        let pos: u128 = state.word_pos.parse().map_err(|_| {
            crate::Error::Format {
                path: "<checkpoint>".into(),
                detail: format!("bad stream position {:?}", state.word_pos),
            }
        })?;
        rng.set_word_pos(pos);
        Ok(StreamRng {
            name: state.name.clone(),
            rng,
        })
    }
}

/// Serializable position of a [`StreamRng`]. `word_pos` is a decimal string
/// because it is a u128, which JSON cannot hold natively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub name: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}
