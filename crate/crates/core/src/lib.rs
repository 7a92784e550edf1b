//! A desk-scale laboratory for differentially private adversarial training.
//!
//! Trains small dense classifiers under four regimes (no defense,
//! adversarial training, DP-SGD, and DP-SGD on adversarial examples),
//! accounts their privacy cost with a Rényi-DP accountant, and audits them
//! with threshold membership-inference attacks at individual and class
//! level.
//!
//! Module map:
//! - [`nn`]: dense networks, cross-entropy, per-sample and input gradients
//! - [`attack`]: FGSM / PGD under an L∞ budget
//! - [`dp`]: Poisson subsampling, clipping, Gaussian mechanism, updates
//! - [`accountant`]: subsampled-Gaussian RDP, `(ε, δ)` conversion, σ calibration
//! - [`mia`]: membership-inference scoring, threshold search, reports
//! - [`data`]: IDX loading, synthetic blobs, batch sampling
//! - [`trainer`]: the regimes end to end with per-epoch evaluation
//! - [`experiment`]: config files, result bundles, checkpoints, smoothing

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod attack;
pub mod data;
pub mod dp;
pub mod experiment;
pub mod mia;
pub mod nn;
pub mod trainer;
