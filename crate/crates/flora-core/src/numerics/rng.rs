//! Deterministic random number generation with a draw audit log.
//!
//! The generator is a counter-based ChaCha stream: for a fixed seed and call
//! sequence it produces identical values on every platform. Every public
//! sampling method increments one of three audit counters so callers can
//! assert which kinds of randomness a code path consumed:
//!
//! * `noise_normal` — Gaussian draws used as noise (reparameterized latents,
//!   synthetic data, feature synthesis). The stage-2 training path must leave
//!   this counter untouched.
//! * `timestep` — draws used to sample interpolation timesteps. These may
//!   consume Gaussian values internally (logit-normal sampling) but are
//!   accounted separately because they never construct latent endpoints.
//! * `uniform` — uniform draws (batch index selection, weight init).

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};

/// Running totals of draws by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DrawCounts {
    pub noise_normal: u64,
    pub timestep: u64,
    pub uniform: u64,
}

#[derive(Debug, Clone)]
pub struct Rng {
    stream: ChaCha8Rng,
    counts: DrawCounts,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Self { stream: ChaCha8Rng::seed_from_u64(seed), counts: DrawCounts::default() }
    }

    pub fn counts(&self) -> DrawCounts {
        self.counts
    }

    /// One standard normal noise draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.counts.noise_normal += 1;
        StandardNormal.sample(&mut self.stream)
    }

    /// `n` standard normal noise draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform01(&mut self) -> f64 {
        self.counts.uniform += 1;
        Open01.sample(&mut self.stream)
    }

    /// Uniform draw in (-bound, bound); used for fan-in weight init.
    pub fn uniform_symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.uniform01() - 1.0) * bound
    }

    /// Uniform index in `0..n`.
    pub fn index_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "index_below requires a non-empty range");
        self.counts.uniform += 1;
        self.stream.gen_range(0..n)
    }

    /// `count` independent uniform indices in `0..n` (with replacement).
    pub fn indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.index_below(n)).collect()
    }

    /// Timestep from the logit-normal distribution: sigmoid of a standard
    /// normal draw. Strictly inside (0, 1); the underlying normal draw is
    /// accounted as a timestep draw, not noise.
    pub fn logit_normal_timestep(&mut self) -> f64 {
        self.counts.timestep += 1;
        let n: f64 = StandardNormal.sample(&mut self.stream);
        clamp_open_unit(sigmoid(n))
    }

    /// Timestep from the uniform distribution on (0, 1).
    pub fn uniform_timestep(&mut self) -> f64 {
        self.counts.timestep += 1;
        clamp_open_unit(Open01.sample(&mut self.stream))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest representable value below 1.0.
const ONE_MINUS_EPS: f64 = 1.0 - f64::EPSILON / 2.0;

fn clamp_open_unit(t: f64) -> f64 {
    t.clamp(f64::MIN_POSITIVE, ONE_MINUS_EPS)
}
