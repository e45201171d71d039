//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, counter)`. Child streams
//! are derived by hashing the parent stream id with a label, so sequences of
//! distinct streams never overlap and evaluation order does not matter.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// Well-known top-level stream ids.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const SAMPLING: u64 = 4;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    core: ChaCha8Rng,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream == other.stream && self.counter == other.counter
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    /// Stream positioned at an explicit 32-bit-word counter.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        core.set_word_pos(counter as u128);
        RngStream {
            seed,
            stream,
            counter,
            core,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream identified by `label`.
    pub fn split(&self, label: u64) -> RngStream {
        let id = mix64(self.stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix64(label.wrapping_add(0x632b_e59b_d9b4_e019)));
        RngStream::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 2;
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // rejection sampling for an unbiased draw
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller, always consumes two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::c(self.normal()))
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
