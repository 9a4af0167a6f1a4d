//! Counter-based pseudo-random generator used by the simulators.
//!
//! The algorithm is fixed so that a port in another language reproduces the
//! same draws bit for bit:
//!
//! * `mix64` is the SplitMix64 finalizer:
//!   `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`
//!   (wrapping 64-bit arithmetic).
//! * A stream is keyed by `key = mix64(seed ^ mix64(stream + GAMMA))` with
//!   `GAMMA = 0x9E3779B97F4A7C15`.
//! * Draw `k` (counting from 1) is `mix64(key + k * GAMMA)`.
//! * Uniforms take the top 53 bits: `(u >> 11) * 2^-53`, in `[0, 1)`.
//! * Normals use the cosine branch of Box-Muller on two consecutive
//!   uniforms: `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * Binomial draws count `n` Bernoulli trials `uniform() < p`.
//! * `fork(i)` derives an independent child stream keyed by
//!   `mix64(key ^ mix64(i + GAMMA))`.

use std::f64::consts::TAU;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Child generator for sub-experiment `index`; independent of how many
    /// draws the parent has made.
    pub fn fork(&self, index: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(index.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.standard_normal()
    }

    pub fn binomial(&mut self, n: u32, p: f64) -> u32 {
        (0..n).filter(|_| self.uniform() < p).count() as u32
    }
}
