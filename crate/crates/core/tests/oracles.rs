//! Independent reference computations checked against the library.

// reference values keep all the digits they were computed with
#![allow(clippy::excessive_precision)]

use dpadv::accountant::{self, default_orders};
use dpadv::data::{synth_blobs, BlobSpec};
use dpadv::dp::NoiseSource;
use dpadv::nn::{cross_entropy_row, init_params, Model};

/// `ln E_{z~N(0,σ²)}[(1 − q + q·exp((2z − 1)/(2σ²)))^α]` by the trapezoid
/// rule in the log domain, summed with Neumaier compensation.
fn log_moment_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let lo = -30.0 * sigma;
    let hi = alpha + 30.0 * sigma;
    let h = sigma * 1e-3;
    let n = ((hi - lo) / h).ceil() as usize;
    let s2 = sigma * sigma;
    let log_phi_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let log_term = |z: f64| {
        let log_ratio = {
            let a = (1.0 - q).ln();
            let b = q.ln() + (2.0 * z - 1.0) / (2.0 * s2);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        };
        log_phi_norm - z * z / (2.0 * s2) + alpha * log_ratio
    };
    let logs: Vec<f64> = (0..=n).map(|i| log_term(lo + i as f64 * h)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (i, &l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let v = w * (l - m).exp();
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    m + ((sum + comp) * h).ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn accountant_matches_frozen_high_precision_values() {
    // 50-digit binomial sums (integer orders) and quadrature (fractional).
    let cases = [
        (0.01, 1.0, 16.0, 3.087850783696244615927382),
        (0.01, 1.0, 2.0, 0.0001718134220745479381432135),
        (0.05, 1.3, 2.0, 0.002015683829538877827380923),
        (0.1, 2.0, 8.0, 0.01372543010321991958412861),
        (0.001, 0.8, 32.0, 17.86941390556682351572702),
        (0.01, 1.0, 1.5, 0.0001272537433274498388064434),
        (0.01, 1.0, 1.25, 0.0001053980050981762349684829),
        (0.1, 2.0, 1.5, 0.00209893459571017674591134),
        (0.05, 0.9, 1.25, 0.003407363358069828132804302),
    ];
    for (q, sigma, alpha, expected) in cases {
        let got = accountant::rdp_single_step(q, sigma, alpha).unwrap();
        assert!(
            rel(got, expected) <= 1e-9,
            "q={q} σ={sigma} α={alpha}: {got} vs {expected}"
        );
    }
}

#[test]
fn accountant_matches_quadrature_oracle() {
    let mut rng = NoiseSource::new(404);
    for _ in 0..24 {
        let q = 10f64.powf(rng.uniform_in(-3.0, -0.5));
        let sigma = rng.uniform_in(0.7, 3.0);
        let alpha = if rng.uniform() < 0.5 {
            (2 + rng.index(30)) as f64
        } else {
            1.0 + rng.uniform_in(0.05, 3.0)
        };
        let oracle = log_moment_quadrature(q, sigma, alpha) / (alpha - 1.0);
        let got = accountant::rdp_single_step(q, sigma, alpha).unwrap();
        // the quadrature loses absolute precision near 1e-16 in ln A
        let tol = 1e-9 * oracle.abs() + 1e-15 / (alpha - 1.0);
        assert!(
            (got - oracle).abs() <= tol,
            "q={q} σ={sigma} α={alpha}: {got} vs {oracle}"
        );
    }
}

#[test]
fn calibration_regression() {
    let sigma = accountant::calibrate_sigma(1.0, 1e-5, 0.01, 20_000).unwrap();
    assert!(rel(sigma, 6.988119959491913) < 1e-12, "{sigma}");
    let eps = accountant::epsilon_for(0.01, sigma, 20_000, 1e-5).unwrap().epsilon;
    assert!((0.999..=1.0).contains(&eps));
}

#[test]
fn cross_entropy_matches_high_precision_values() {
    let cases: [(&[f64], usize, f64); 6] = [
        (&[1000.0, -1000.0, 0.5], 2, 999.5),
        (&[0.1, 0.2, 0.3, 0.4], 0, 1.542535529455162734515043),
        (&[1e-8, -1e-8, 3e-8], 1, 1.098612308668109824728579),
        (&[30.0, 29.999, -5.0, 12.0], 1, 0.6936473131787377544498742),
        (&[-745.0, -744.0, -746.0], 2, 2.40760596444438030448292),
        (&[7.25, 1.5, -3.75, 0.0, 2.125], 4, 5.134807621901041396844976),
    ];
    for (z, y, expected) in cases {
        let got = cross_entropy_row(z, y);
        assert!(rel(got, expected) < 1e-13, "{z:?}: {got} vs {expected}");
    }
}

fn forward_pre_activations(model: &Model, x: &[f64]) -> Vec<Vec<f64>> {
    let mut a = x.to_vec();
    let mut out = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let w = &layer.dense.weights;
        let b = layer.dense.bias.values();
        let z: Vec<f64> = (0..w.rows())
            .map(|i| w.row(i).iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + b[i])
            .collect();
        a = if l + 1 < model.layers().len() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        out.push(z);
    }
    out
}

fn loss_at(model: &Model, x: &[f64], y: usize) -> f64 {
    let z = forward_pre_activations(model, x).pop().unwrap();
    cross_entropy_row(&z, y)
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()) + 1e-9
}

/// Random input whose hidden pre-activations all stay clear of the ReLU
/// kink, so a 1e-5 perturbation cannot switch a unit.
fn kink_free_input(model: &Model, rng: &mut NoiseSource) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..model.input_dim()).map(|_| rng.uniform()).collect();
        let pre = forward_pre_activations(model, &x);
        let hidden = &pre[..pre.len() - 1];
        if hidden.iter().flatten().all(|v| v.abs() > 1e-3) {
            return x;
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-5;
    let mut rng = NoiseSource::new(77);
    for net in 0..50u64 {
        let mut dims = vec![2 + rng.index(8)];
        for _ in 0..rng.index(3) {
            dims.push(2 + rng.index(14));
        }
        dims.push(2 + rng.index(5));
        let mut model = init_params(net, &dims).unwrap();
        // nonzero biases so hidden units sit at varied offsets
        let mut theta = model.flat_params();
        for v in theta.iter_mut() {
            *v += 0.1 * rng.standard_normal();
        }
        model.load_flat_params(&theta).unwrap();
        assert!(model.param_count() <= 1000);

        let x = kink_free_input(&model, &mut rng);
        let y = rng.index(model.class_count());

        let mut g = vec![0.0; model.param_count()];
        model.example_gradient(&x, y, &mut g).unwrap();
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let mut m = model.clone();
            m.load_flat_params(&plus).unwrap();
            let lp = loss_at(&m, &x, y);
            m.load_flat_params(&minus).unwrap();
            let lm = loss_at(&m, &x, y);
            let fd = (lp - lm) / (2.0 * h);
            assert!(close(g[i], fd), "net {net} param {i}: {} vs {fd}", g[i]);
        }

        let gx = model.example_input_gradient(&x, y).unwrap();
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (loss_at(&model, &xp, y) - loss_at(&model, &xm, y)) / (2.0 * h);
            assert!(close(gx[j], fd), "net {net} input {j}: {} vs {fd}", gx[j]);
        }
    }
}

fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(μ + sZ, 0, 1)]` for standard normal `Z`.
fn clamped_mean(mu: f64, s: f64) -> f64 {
    let (a, b) = (-mu / s, (1.0 - mu) / s);
    mu * (normal_cdf(b) - normal_cdf(a)) + s * (normal_pdf(a) - normal_pdf(b)) + (1.0 - normal_cdf(b))
}

#[test]
fn blob_coordinates_follow_the_clamped_normal() {
    let spec = BlobSpec::new(3, 5, 4000, 0.6, 0.25, 11);
    let (train, test) = synth_blobs(&spec).unwrap();
    for ds in [&train, &test] {
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.inputs.row(i))
                .collect();
            let n = rows.len() as f64;
            for j in 0..5 {
                let mu = if j == c { 0.6 } else { 0.0 };
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                // four standard errors of a variable with sd <= 0.25
                let tol = 4.0 * 0.25 / n.sqrt();
                let expected = clamped_mean(mu, 0.25);
                assert!(
                    (mean - expected).abs() < tol,
                    "class {c} coord {j}: {mean} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn order_grid_is_the_documented_one() {
    let o = default_orders();
    assert_eq!(o.len(), 2 + 63 + 2);
    assert_eq!(&o[..3], &[1.25, 1.5, 2.0]);
    assert_eq!(&o[o.len() - 3..], &[64.0, 128.0, 256.0]);
}
