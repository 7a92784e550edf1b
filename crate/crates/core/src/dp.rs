//! DP-SGD building blocks: Poisson subsampling, per-sample L2 clipping, the
//! Gaussian mechanism and the descent step.
//!
//! Randomness comes from [`NoiseSource`], a ChaCha20 stream seeded from a
//! `u64`. Normal variates use the Ziggurat sampler of `rand_distr` 0.5 and
//! uniforms use `rand`'s standard `[0, 1)` float conversion; both are pinned
//! by `Cargo.lock`, so a seed reproduces a run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::PerSampleGrads;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid DP configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch: the update must be skipped")]
    EmptyBatch,

    #[error("gradient length {actual} does not match parameter count {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, DpError>;

/// Hyperparameters of one DP-SGD run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    /// Per-sample L2 clipping bound `C`. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Noise multiplier `σ`; the added noise has standard deviation `σC`.
    pub noise_multiplier: f64,
    /// Poisson inclusion probability `q`.
    pub sample_rate: f64,
    pub learning_rate: f64,
    /// Total number of iterations `T`.
    pub iterations: u64,
    pub delta: f64,
    pub weight_decay: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DpError::InvalidConfig(msg.to_string()));
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad("noise_multiplier must be finite and >= 0");
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return bad("an infinite clip_norm requires noise_multiplier = 0");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad("sample_rate must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and > 0");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be finite and >= 0");
        }
        Ok(())
    }

    /// Iterations that make up one reporting epoch: `round(1/q)`, at least 1.
    pub fn iterations_per_epoch(&self) -> u64 {
        iterations_per_epoch(self.sample_rate)
    }
}

pub fn iterations_per_epoch(sample_rate: f64) -> u64 {
    ((1.0 / sample_rate).round() as u64).max(1)
}

/// Seeded generator for the Gaussian mechanism and Poisson sampling.
/// Single consumer: one stream per training run.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha20Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Each index in `0..n` enters the batch independently with probability `q`.
/// The result is ascending and may be empty.
pub fn poisson_subsample(n: usize, q: f64, noise: &mut NoiseSource) -> Vec<usize> {
    (0..n).filter(|_| noise.uniform() < q).collect()
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `g` in place by `min(1, C/‖g‖₂)`. Rows already inside the ball
/// are left untouched bit for bit. Returns the applied factor.
pub fn clip_in_place(g: &mut [f64], clip_norm: f64) -> f64 {
    let norm = l2_norm(g);
    if norm <= clip_norm {
        return 1.0;
    }
    let factor = clip_norm / norm;
    for v in g.iter_mut() {
        *v *= factor;
    }
    debug_assert!(l2_norm(g) <= clip_norm * (1.0 + 1e-12));
    factor
}

pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

/// Adds `σC · z`, `z ~ N(0, I)`, to `sum`. Draws nothing when `σ = 0`.
pub fn add_gaussian_noise(sum: &mut [f64], clip_norm: f64, sigma: f64, noise: &mut NoiseSource) {
    if sigma == 0.0 {
        return;
    }
    let scale = sigma * clip_norm;
    for v in sum.iter_mut() {
        *v += scale * noise.standard_normal();
    }
}

/// `Σ_i g_i + σC · z` over rows that have already been clipped.
pub fn noisy_aggregate(rows: &PerSampleGrads, clip_norm: f64, sigma: f64, noise: &mut NoiseSource) -> Vec<f64> {
    let mut sum = rows.sum_rows();
    add_gaussian_noise(&mut sum, clip_norm, sigma, noise);
    sum
}

/// `θ ← θ − (α/|B|)(g + λ|B|θ)`: the private descent step with decoupled
/// weight decay `λ`. With `λ = 0` this is exactly `θ − (α/|B|) g`.
pub fn dp_step(
    theta: &mut [f64],
    grad_sum: &[f64],
    learning_rate: f64,
    batch_size: usize,
    weight_decay: f64,
) -> Result<()> {
    if batch_size == 0 {
        return Err(DpError::EmptyBatch);
    }
    if theta.len() != grad_sum.len() {
        return Err(DpError::LengthMismatch {
            expected: theta.len(),
            actual: grad_sum.len(),
        });
    }
    let n = batch_size as f64;
    let scale = learning_rate / n;
    let decay = weight_decay * n;
    for (t, &g) in theta.iter_mut().zip(grad_sum) {
        *t -= scale * (g + decay * *t);
    }
    Ok(())
}

/// Non-private step on the summed batch gradient, i.e. a step of size `α`
/// along the mean gradient. Shares its arithmetic with [`dp_step`] so that a
/// noiseless, unclipped private run reproduces plain SGD exactly.
pub fn sgd_step(
    theta: &mut [f64],
    grad_sum: &[f64],
    learning_rate: f64,
    batch_size: usize,
    weight_decay: f64,
) -> Result<()> {
    dp_step(theta, grad_sum, learning_rate, batch_size, weight_decay)
}
