//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, counter)`, so a tensor of samples
//! is identical no matter how evaluation is scheduled, and replaying a seed
//! replays the exact stream.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer applied to a keyed counter.
fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(GAMMA).wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent stream derived from this generator's seed; does not
    /// consume state.
    pub fn stream(&self, label: u64) -> Rng {
        Rng::new(mix(self.seed, label ^ 0xA5A5_A5A5_A5A5_A5A5))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform draw in the half-open-from-zero interval (0, 1].
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform integer in `[0, bound)` via 128-bit multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller on two counter slots, so sample `i`
    /// of a batch depends only on the counters it consumed.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Tensor of i.i.d. `N(0, stddev^2)` samples; `stddev = 0` yields zeros.
    pub fn normal_tensor(&mut self, shape: &[usize], stddev: f64) -> Result<Tensor> {
        if stddev < 0.0 {
            return Err(Error::invalid("normal_tensor: negative stddev"));
        }
        if stddev == 0.0 {
            return Ok(Tensor::zeros(shape));
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| stddev * self.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Deterministic in-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Noise tensor used by gated routers; see [`Rng::normal_tensor`].
pub fn gaussian_noise(rng: &mut Rng, shape: &[usize], stddev: f64) -> Result<Tensor> {
    rng.normal_tensor(shape, stddev)
}
