//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Integer orders use the exact binomial expansion of the Rényi moment
//! `A_α = Σ_k C(α,k) (1−q)^(α−k) q^k exp((k²−k)/(2σ²))`; the two fractional
//! orders use the two-sided series with erfc tails. All sums are carried in
//! the log domain. Conversion to `(ε, δ)` uses
//! `ε = min_α [ rdp(α) + ln(1/δ)/(α−1) ]` over a fixed order grid.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("noise multiplier is zero: the mechanism has infinite privacy loss")]
    NoNoise,

    #[error("invalid accountant argument: {0}")]
    InvalidArgument(String),

    #[error("target epsilon {target} is unreachable with sigma in [{lo}, {hi}]")]
    Unreachable { target: f64, lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// `{1.25, 1.5, 2, 3, …, 64, 128, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0]);
    orders
}

/// Cumulative RDP at each order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps_per_order: Vec<f64>,
}

impl RdpCurve {
    pub fn zero(orders: Vec<f64>) -> Self {
        let eps_per_order = vec![0.0; orders.len()];
        Self { orders, eps_per_order }
    }

    /// Curve of a single subsampled-Gaussian release.
    pub fn single_step(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        let eps_per_order = orders
            .iter()
            .map(|&a| rdp_single_step(q, sigma, a))
            .collect::<Result<_>>()?;
        Ok(Self {
            orders: orders.to_vec(),
            eps_per_order,
        })
    }

    /// Linear composition: every order scaled by `steps`.
    pub fn compose(&self, steps: u64) -> Self {
        let t = steps as f64;
        Self {
            orders: self.orders.clone(),
            eps_per_order: self.eps_per_order.iter().map(|e| e * t).collect(),
        }
    }

    /// Order-wise sum of two curves on the same grid.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.orders != other.orders {
            return Err(AccountantError::InvalidArgument(
                "curves use different order grids".into(),
            ));
        }
        Ok(Self {
            orders: self.orders.clone(),
            eps_per_order: self
                .eps_per_order
                .iter()
                .zip(&other.eps_per_order)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// `(ε, δ)` obtained from an RDP curve, with the order that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub achieving_order: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate far into the tail.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return libm::erfc(x).ln();
    }
    // asymptotic series: erfc(x) ≈ e^{−x²}/(x√π) · (1 − 1/(2x²) + 3/(4x⁴) − 15/(8x⁶))
    let r = 1.0 / (x * x);
    let series = 1.0 - 0.5 * r + 0.75 * r * r - 1.875 * r * r * r;
    -x * x - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

/// `ln(e^x − 1)` for `x > 0`.
fn log_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln A_α` for integer `α`.
///
/// The `k = 0, 1` terms and the binomial mass sum to one, so
/// `A_α − 1 = Σ_{k≥2} C(α,k) q^k (1−q)^(α−k) (e^{(k²−k)/(2σ²)} − 1)`, a sum
/// of nonnegative terms. Accumulating that excess keeps full relative
/// precision even when the RDP value is tiny.
fn log_moment_integer(q: f64, sigma: f64, order: u64) -> f64 {
    let a = order as f64;
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_var = 2.0 * sigma * sigma;
    let mut log_binom = a.ln();
    let mut log_excess = f64::NEG_INFINITY;
    for k in 2..=order {
        let kf = k as f64;
        log_binom += ((a - kf + 1.0) / kf).ln();
        let term = log_binom + kf * ln_q + (a - kf) * ln_1mq + log_expm1((kf * kf - kf) / two_var);
        log_excess = log_add(log_excess, term);
    }
    // ln(1 + e^{log_excess})
    if log_excess < 0.0 {
        log_excess.exp().ln_1p()
    } else {
        log_excess + (-log_excess).exp().ln_1p()
    }
}

/// `ln A_α` for fractional `α`, `0 < q < 1`.
fn log_moment_fractional(q: f64, sigma: f64, order: f64) -> f64 {
    let var = sigma * sigma;
    let z0 = var * (1.0 / q - 1.0).ln() + 0.5;
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let ln_half = 0.5f64.ln();
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;

    let mut pos0 = f64::NEG_INFINITY;
    let mut neg0 = f64::NEG_INFINITY;
    let mut pos1 = f64::NEG_INFINITY;
    let mut neg1 = f64::NEG_INFINITY;
    let mut coef = 1.0f64;
    let mut i = 0u32;
    loop {
        let fi = f64::from(i);
        if i > 0 {
            coef *= (order - fi + 1.0) / fi;
        }
        if coef == 0.0 {
            break;
        }
        let log_coef = coef.abs().ln();
        let j = order - fi;
        let log_t0 = log_coef + fi * ln_q + j * ln_1mq;
        let log_t1 = log_coef + j * ln_q + fi * ln_1mq;
        let log_e0 = ln_half + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = ln_half + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * var) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * var) + log_e1;
        if coef > 0.0 {
            pos0 = log_add(pos0, log_s0);
            pos1 = log_add(pos1, log_s1);
        } else {
            neg0 = log_add(neg0, log_s0);
            neg1 = log_add(neg1, log_s1);
        }
        // A − 1 can be ~1e-7, so stop well below f64 resolution of A
        if log_s0.max(log_s1) < -60.0 || i > 10_000 {
            break;
        }
        i += 1;
    }
    log_add(log_sub(pos0, neg0), log_sub(pos1, neg1))
}

/// RDP at `order` of one Poisson-subsampled Gaussian release with sampling
/// rate `q` and noise multiplier `sigma` (sensitivity 1).
pub fn rdp_single_step(q: f64, sigma: f64, order: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::InvalidArgument(format!(
            "sample rate {q} outside [0, 1]"
        )));
    }
    if !(order > 1.0) || !order.is_finite() {
        return Err(AccountantError::InvalidArgument(format!(
            "order {order} must be finite and > 1"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if !(sigma >= 0.0) {
        return Err(AccountantError::InvalidArgument(format!(
            "noise multiplier {sigma} must be >= 0"
        )));
    }
    if sigma == 0.0 {
        return Err(AccountantError::NoNoise);
    }
    if sigma.is_infinite() {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(order / (2.0 * sigma * sigma));
    }
    let log_moment = if order.fract() == 0.0 {
        log_moment_integer(q, sigma, order as u64)
    } else {
        log_moment_fractional(q, sigma, order)
    };
    Ok((log_moment / (order - 1.0)).max(0.0))
}

pub fn compose(curve_one_step: &RdpCurve, steps: u64) -> RdpCurve {
    curve_one_step.compose(steps)
}

/// Classical RDP → `(ε, δ)` conversion, minimized over the curve's orders.
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> Result<PrivacySpend> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidArgument(format!(
            "delta {delta} outside (0, 1)"
        )));
    }
    if curve.orders.is_empty() {
        return Err(AccountantError::InvalidArgument("empty order grid".into()));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = PrivacySpend {
        epsilon: f64::INFINITY,
        delta,
        achieving_order: curve.orders[0],
    };
    for (&order, &rdp) in curve.orders.iter().zip(&curve.eps_per_order) {
        let eps = rdp + log_inv_delta / (order - 1.0);
        if eps < best.epsilon {
            best.epsilon = eps;
            best.achieving_order = order;
        }
    }
    best.epsilon = best.epsilon.max(0.0);
    Ok(best)
}

/// `ε` after `steps` iterations at rate `q` and noise `sigma`, on the
/// default order grid.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<PrivacySpend> {
    let one = RdpCurve::single_step(q, sigma, &default_orders())?;
    to_epsilon(&one.compose(steps), delta)
}

const SIGMA_LO: f64 = 1e-2;
const SIGMA_HI: f64 = 1e4;

/// Smallest-noise search for `σ` with `ε(σ) ∈ [target·(1−10⁻³), target]`.
/// Bisects in `ln σ`, using that `ε` is nonincreasing in `σ`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_eps > 0.0) || !target_eps.is_finite() {
        return Err(AccountantError::InvalidArgument(format!(
            "target epsilon {target_eps} must be finite and > 0"
        )));
    }
    if !(q > 0.0 && q <= 1.0) || steps == 0 {
        return Err(AccountantError::InvalidArgument(
            "calibration needs q in (0, 1] and steps >= 1".into(),
        ));
    }
    let orders = default_orders();
    let eps_at = |sigma: f64| -> Result<f64> {
        let one = RdpCurve::single_step(q, sigma, &orders)?;
        Ok(to_epsilon(&one.compose(steps), delta)?.epsilon)
    };
    let unreachable = AccountantError::Unreachable {
        target: target_eps,
        lo: SIGMA_LO,
        hi: SIGMA_HI,
    };
    let floor = target_eps * (1.0 - 1e-3);
    if eps_at(SIGMA_HI)? > target_eps || eps_at(SIGMA_LO)? < floor {
        return Err(unreachable);
    }
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let eps = eps_at(mid)?;
        if eps > target_eps {
            lo = mid;
        } else if eps < floor {
            hi = mid;
        } else {
            return Ok(mid);
        }
    }
    // the band is wide enough that 200 halvings of ln σ always land in it
    Err(unreachable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_grid() {
        let o = default_orders();
        assert_eq!(o.len(), 2 + 63 + 2);
        assert_eq!(o[0], 1.25);
        assert_eq!(o[2], 2.0);
        assert_eq!(*o.last().unwrap(), 256.0);
    }

    #[test]
    fn full_batch_is_plain_gaussian() {
        assert_eq!(rdp_single_step(1.0, 1.0, 2.0).unwrap(), 1.0);
        for a in default_orders() {
            assert_eq!(rdp_single_step(1.0, 1.7, a).unwrap(), a / (2.0 * 1.7 * 1.7));
        }
    }

    #[test]
    fn zero_rate_is_free() {
        for a in default_orders() {
            assert_eq!(rdp_single_step(0.0, 0.8, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_sigma_is_signaled() {
        assert_eq!(rdp_single_step(0.1, 0.0, 2.0), Err(AccountantError::NoNoise));
    }

    #[test]
    fn integer_order_two_closed_form() {
        // A_2 = (1−q)² + 2q(1−q) + q² e^{1/σ²} = 1 + q²(e^{1/σ²} − 1)
        let (q, s) = (0.05f64, 1.3f64);
        let expected = (q * q * ((1.0 / (s * s)).exp() - 1.0)).ln_1p();
        let got = rdp_single_step(q, s, 2.0).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected, "{got} vs {expected}");
    }

    #[test]
    fn fractional_orders_are_bracketed_by_neighbours() {
        // RDP is nondecreasing in the order
        let (q, s) = (0.02, 1.1);
        let r125 = rdp_single_step(q, s, 1.25).unwrap();
        let r15 = rdp_single_step(q, s, 1.5).unwrap();
        let r2 = rdp_single_step(q, s, 2.0).unwrap();
        assert!(0.0 < r125 && r125 <= r15 && r15 <= r2, "{r125} {r15} {r2}");
    }

    #[test]
    fn to_epsilon_single_order() {
        let curve = RdpCurve {
            orders: vec![2.0],
            eps_per_order: vec![1.0],
        };
        let s = to_epsilon(&curve, 1e-5).unwrap();
        assert!((s.epsilon - (1.0 + 1e5f64.ln())).abs() < 1e-12);
        assert!((s.epsilon - 12.5129).abs() < 1e-4);
        assert_eq!(s.achieving_order, 2.0);
    }

    #[test]
    fn zero_curve_uses_largest_order() {
        let s = to_epsilon(&RdpCurve::zero(default_orders()), 1e-5).unwrap();
        assert_eq!(s.achieving_order, 256.0);
        assert!((s.epsilon - 1e5f64.ln() / 255.0).abs() < 1e-15);
    }

    #[test]
    fn to_epsilon_matches_exhaustive_minimum() {
        let curve = RdpCurve {
            orders: vec![1.5, 4.0, 32.0],
            eps_per_order: vec![0.2, 0.9, 7.0],
        };
        let delta: f64 = 1e-6;
        let candidates: Vec<f64> = curve
            .orders
            .iter()
            .zip(&curve.eps_per_order)
            .map(|(a, r)| r + (1.0 / delta).ln() / (a - 1.0))
            .collect();
        let min = candidates.iter().copied().fold(f64::INFINITY, f64::min);
        let s = to_epsilon(&curve, delta).unwrap();
        assert_eq!(s.epsilon, min);
        assert_eq!(s.achieving_order, 4.0);
    }

    #[test]
    fn compose_basics() {
        let one = RdpCurve::single_step(0.01, 1.0, &default_orders()).unwrap();
        assert_eq!(compose(&one, 0), RdpCurve::zero(default_orders()));
        assert_eq!(compose(&one, 1), one);
        let mut summed = RdpCurve::zero(default_orders());
        for _ in 0..1000 {
            summed = summed.add(&one).unwrap();
        }
        let composed = compose(&one, 1000);
        for (a, b) in summed.eps_per_order.iter().zip(&composed.eps_per_order) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(rdp_single_step(1.5, 1.0, 2.0).is_err());
        assert!(rdp_single_step(0.5, 1.0, 1.0).is_err());
        assert!(to_epsilon(&RdpCurve::zero(vec![2.0]), 0.0).is_err());
        assert!(calibrate_sigma(0.0, 1e-5, 0.01, 10).is_err());
    }

    #[test]
    fn calibration_round_trip_and_monotone_in_steps() {
        let s1 = calibrate_sigma(1.0, 1e-5, 0.01, 1000).unwrap();
        let eps = epsilon_for(0.01, s1, 1000, 1e-5).unwrap().epsilon;
        assert!((1.0 - 1e-3..=1.0).contains(&eps), "{eps}");
        let s2 = calibrate_sigma(1.0, 1e-5, 0.01, 2000).unwrap();
        assert!(s2 > s1);
    }

    #[test]
    fn unreachable_target_fails() {
        assert!(matches!(
            calibrate_sigma(1e-9, 1e-5, 1.0, 1_000_000),
            Err(AccountantError::Unreachable { .. })
        ));
    }

    #[test]
    fn log_erfc_is_continuous_at_switch() {
        let below = libm::erfc(24.999_999).ln();
        let above = log_erfc(25.0);
        assert!((below - above).abs() < 1e-3);
        assert!(log_erfc(40.0).is_finite());
    }
}
