//! Deterministic pseudo-randomness.
//!
//! A SplitMix64 generator with explicit seed threading. There is no global
//! state anywhere in the crate: every consumer receives its generator (or a
//! seed) as an argument, and independent purposes derive independent streams
//! via [`SplitMix64::split`] with a stream label. Reruns with the same seed
//! reproduce every draw bit-for-bit.

use std::f64::consts::PI;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels for [`SplitMix64::split`]. Keeping them in one place avoids
/// accidental stream collisions between subsystems.
pub mod streams {
    pub const PARAM_INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const SAMPLE_NOISE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PCA: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    /// Second Box-Muller draw waiting to be handed out.
    cached_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, cached_normal: None }
    }

    /// Derives an independent child stream from a seed and a label without
    /// consuming any draws from the parent.
    pub fn split(seed: u64, label: u64) -> Self {
        SplitMix64::new(mix(seed ^ label.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn next_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Plain modulo; the bias is irrelevant at the
    /// tiny ranges used here and determinism is what matters.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn next_bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Standard normal via Box-Muller. Draws come in deterministic pairs; the
    /// second of each pair is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
