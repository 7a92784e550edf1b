//! L∞ adversarial examples: FGSM and PGD.
//!
//! Both attacks step along `sign(∇ₓ L)` with `sign(0) = 0` and project back
//! onto `B∞(x₀, γ) ∩ [0, 1]^d`. Examples are attacked independently in
//! parallel; each output row depends only on its own input row.

use rayon::prelude::*;
use thiserror::Error;

use crate::dp::NoiseSource;
use crate::nn::{argmax, Batch, Model, NnError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),

    #[error("attack kind mismatch: expected {expected:?}")]
    WrongKind { expected: AttackKind },

    #[error("empty dataset")]
    Empty,

    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget γ.
    pub gamma: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Start PGD from a uniform point of the ball instead of `x₀`.
    pub random_start: bool,
}

impl AttackConfig {
    pub fn fgsm(gamma: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            gamma,
            step_size: gamma,
            steps: 1,
            random_start: false,
        }
    }

    pub fn pgd(gamma: f64, step_size: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            gamma,
            step_size,
            steps,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be finite and >= 0");
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 {
                return bad("pgd needs steps >= 1");
            }
            if !(self.step_size > 0.0) || !self.step_size.is_finite() {
                return bad("step_size must be finite and > 0");
            }
            if self.steps > 1 && self.step_size > self.gamma {
                return bad("step_size must not exceed gamma when steps > 1");
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn in_ball(x0: &[f64], x: &[f64], gamma: f64) -> bool {
    x0.iter()
        .zip(x)
        .all(|(&a, &b)| !(0.0..=1.0).contains(&a) || ((a - b).abs() <= gamma + 1e-12 && (0.0..=1.0).contains(&b)))
}

fn fgsm_one(model: &Model, x: &[f64], y: usize, gamma: f64) -> Result<Vec<f64>> {
    let g = model.example_input_gradient(x, y)?;
    let adv: Vec<f64> = x
        .iter()
        .zip(&g)
        .map(|(&xv, &gv)| (xv + gamma * sign(gv)).clamp(0.0, 1.0))
        .collect();
    debug_assert!(in_ball(x, &adv, gamma));
    Ok(adv)
}

fn pgd_one(model: &Model, x0: &[f64], y: usize, cfg: &AttackConfig, start: Option<Vec<f64>>) -> Result<Vec<f64>> {
    let gamma = cfg.gamma;
    let mut x = start.unwrap_or_else(|| x0.to_vec());
    for _ in 0..cfg.steps {
        let g = model.example_input_gradient(&x, y)?;
        for ((xv, &x0v), &gv) in x.iter_mut().zip(x0).zip(&g) {
            let stepped = *xv + cfg.step_size * sign(gv);
            *xv = stepped.max(x0v - gamma).min(x0v + gamma).clamp(0.0, 1.0);
        }
    }
    debug_assert!(in_ball(x0, &x, gamma));
    Ok(x)
}

/// `clamp₀₁(x + γ · sign(∇ₓ L))`.
pub fn fgsm(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.kind != AttackKind::Fgsm {
        return Err(AttackError::WrongKind {
            expected: AttackKind::Fgsm,
        });
    }
    cfg.validate()?;
    let rows: Vec<Vec<f64>> = (0..batch.len())
        .into_par_iter()
        .map(|i| fgsm_one(model, batch.inputs.row(i), batch.labels[i], cfg.gamma))
        .collect::<Result<_>>()?;
    Ok(Tensor::new(
        batch.inputs.shape().to_vec(),
        rows.into_iter().flatten().collect(),
    )?)
}

/// Projected signed-gradient ascent for `cfg.steps` iterations. Random
/// starts, when enabled, are drawn from `rng` before the parallel section.
pub fn pgd(model: &Model, batch: &Batch, cfg: &AttackConfig, rng: &mut NoiseSource) -> Result<Tensor> {
    if cfg.kind != AttackKind::Pgd {
        return Err(AttackError::WrongKind {
            expected: AttackKind::Pgd,
        });
    }
    cfg.validate()?;
    let starts: Vec<Option<Vec<f64>>> = (0..batch.len())
        .map(|i| {
            cfg.random_start.then(|| {
                batch
                    .inputs
                    .row(i)
                    .iter()
                    .map(|&v| (v + rng.uniform_in(-cfg.gamma, cfg.gamma)).clamp(0.0, 1.0))
                    .collect()
            })
        })
        .collect();
    let rows: Vec<Vec<f64>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, start)| pgd_one(model, batch.inputs.row(i), batch.labels[i], cfg, start))
        .collect::<Result<_>>()?;
    Ok(Tensor::new(
        batch.inputs.shape().to_vec(),
        rows.into_iter().flatten().collect(),
    )?)
}

/// Dispatches on `cfg.kind`.
pub fn perturb(model: &Model, batch: &Batch, cfg: &AttackConfig, rng: &mut NoiseSource) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, batch, cfg),
        AttackKind::Pgd => pgd(model, batch, cfg, rng),
    }
}

/// Fraction of perturbed examples the model still classifies correctly.
pub fn adversarial_accuracy(model: &Model, dataset: &Batch, cfg: &AttackConfig, rng: &mut NoiseSource) -> Result<f64> {
    if dataset.is_empty() {
        return Err(AttackError::Empty);
    }
    let adv = perturb(model, dataset, cfg, rng)?;
    let correct = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            model
                .logits_one(adv.row(i))
                .map(|z| usize::from(argmax(&z) == dataset.labels[i]))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Largest coordinate deviation between two equally shaped tensors.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
