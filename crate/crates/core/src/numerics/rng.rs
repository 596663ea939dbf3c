use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Seeded generator: ChaCha8 keyed by `seed` (expanded with the `rand_core`
/// `seed_from_u64` PCG expansion) on a selectable 64-bit stream.
///
/// Streams split one seed into independent sequences: [`Rng::split`] keeps the
/// key and moves to another stream, so components that need randomness each own
/// a stream and never share one.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Exact position of an [`Rng`], for checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as `[high, low]` 64-bit halves.
    pub word_pos: [u64; 2],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// A fresh generator on another stream of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
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

    /// Standard normal via Box-Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: [(pos >> 64) as u64, pos as u64],
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        let pos = ((state.word_pos[0] as u128) << 64) | state.word_pos[1] as u128;
        rng.inner.set_word_pos(pos);
        rng
    }
}

/// Draws an index from `softmax(logits)`.
pub fn categorical_sample<T: Real>(logits: &[T], rng: &mut Rng) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Config("categorical_sample over zero actions".into()));
    }
    let l: alloc::vec::Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    if let Some(i) = l.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(alloc::format!(
            "logit {i} is {} in categorical_sample",
            l[i]
        )));
    }
    let probs = super::softmax(&l);
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}
