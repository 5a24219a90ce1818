use matlap::matrix_core::sample_normalized;
use matlap::nc_poly::parse_word;
use matlap::rng::stream;
use matlap::stats::log_log_slope;
use matlap::value_function::{drift_gradexp, drift_logratio, quadratic_value, value_h};
use matlap::{HermitianTuple, PotentialSpec, ValueQuery};
use num_complex::Complex64;

fn quartic(lambda: f64) -> PotentialSpec {
    let mut spec = PotentialSpec::quadratic(0.5, 1);
    spec.components[0].word = parse_word("X1 X1 X1 X1").unwrap();
    spec.components[0].lambda = Complex64::new(lambda, 0.0);
    spec
}

fn point(n: usize, seed: u64, scale: f64) -> HermitianTuple {
    sample_normalized(n, 1, 1.0, &mut stream(seed, &[3])).unwrap().scale(scale)
}

#[test]
fn value_is_midpoint_convex_in_x() {
    let spec = quartic(0.1);
    for k in 0..6u64 {
        let x = point(3, 2 * k, 1.0);
        let y = point(3, 2 * k + 1, 0.7);
        let mid = x.add(&y).scale(0.5);
        let h = |z: &HermitianTuple| value_h(&ValueQuery::new(&spec, 0.3, vec![], z.clone()).samples(4000).seed(10 + k, 0)).unwrap();
        let (a, b, c) = (h(&x), h(&y), h(&mid));
        let err = (c.stderr.powi(2) + 0.25 * (a.stderr.powi(2) + b.stderr.powi(2))).sqrt();
        assert!(c.value <= 0.5 * (a.value + b.value) + 3.0 * err + 1e-9, "{a:?} {b:?} {c:?}");
    }
}

#[test]
fn drift_lipschitz_ratio_is_stable_in_n() {
    let spec = quartic(0.05);
    let ratios: Vec<f64> = [4usize, 8, 16]
        .iter()
        .map(|&n| {
            let mut worst = 0.0f64;
            for k in 0..4u64 {
                let x = point(n, 100 + k, 1.0);
                let y = x.add(&point(n, 200 + k, 0.3));
                let b = |z: &HermitianTuple| {
                    drift_logratio(&ValueQuery::new(&spec, 0.5, vec![], z.clone()).samples(256).seed(7, k).control_variate(true))
                        .unwrap()
                        .drift
                };
                worst = worst.max(b(&x).sub(&b(&y)).norm2().sqrt() / x.sub(&y).norm2().sqrt());
            }
            worst
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    assert!(hi.is_finite() && hi <= 1.5 * lo, "{ratios:?}");
}

#[test]
fn value_time_regularity_exponent() {
    let spec = PotentialSpec::quadratic(0.5, 1);
    let x = point(4, 1, 1.0);
    let t0 = 0.3;
    let at = |t: f64| value_h(&ValueQuery::new(&spec, t, vec![], x.clone()).samples(64).seed(1, 0)).unwrap().value;
    let base = at(t0);
    let ds = [1e-3, 1e-2, 1e-1, 0.5];
    let diffs: Vec<f64> = ds.iter().map(|&d| (at(t0 + d) - base).abs()).collect();
    for (&d, &v) in ds.iter().zip(&diffs) {
        assert!((v - (quadratic_value(0.5, 1, t0 + d, &x) - quadratic_value(0.5, 1, t0, &x)).abs()).abs() < 1e-8);
    }
    assert!(log_log_slope(&ds, &diffs) >= 0.45);
}

#[test]
fn drift_along_paths_is_time_holder() {
    let spec = PotentialSpec::quadratic(0.5, 1);
    let n = 4;
    let s = 0.4;
    let ds = [0.01, 0.03, 0.1, 0.3];
    let mut mean_sq = vec![0.0; ds.len()];
    let paths = 32;
    for p in 0..paths {
        let mut rng = stream(17, &[p]);
        let xs = sample_normalized(n, 1, s, &mut rng).unwrap();
        let b = |t: f64, x: &HermitianTuple| {
            drift_logratio(&ValueQuery::new(&spec, t, vec![], x.clone()).samples(32).seed(3, p)).unwrap().drift
        };
        let bs = b(s, &xs);
        for (k, &d) in ds.iter().enumerate() {
            let mut r = stream(18, &[p, k as u64]);
            let xt = xs.add(&sample_normalized(n, 1, d, &mut r).unwrap());
            mean_sq[k] += b(s + d, &xt).sub(&bs).norm2() / paths as f64;
        }
    }
    assert!(log_log_slope(&ds, &mean_sq) >= 0.25, "{mean_sq:?}");
}

#[test]
fn value_differences_match_drift() {
    let spec = quartic(0.1);
    for k in 0..4u64 {
        let x = point(3, 30 + k, 0.8);
        let h = point(3, 40 + k, 1.0);
        let q = |z: HermitianTuple| ValueQuery::new(&spec, 0.2, vec![], z).samples(20_000).seed(5, k).control_variate(true);
        let eps = 1e-3;
        let plus = value_h(&q(x.add(&h.scale(eps)))).unwrap();
        let minus = value_h(&q(x.sub(&h.scale(eps)))).unwrap();
        let fd = (plus.value - minus.value) / (2.0 * eps);
        let d = drift_logratio(&q(x.clone())).unwrap();
        let pairing = -d.drift.inner(&h);
        let tol = 3.0 * d.stderr * h.norm2().sqrt() + 3.0 * plus.stderr.hypot(minus.stderr) / (2.0 * eps) + 1e-3;
        assert!((fd - pairing).abs() <= tol, "fd {fd} drift pairing {pairing} tol {tol}");
    }
}

#[test]
fn drift_estimators_agree() {
    let spec = quartic(0.1);
    for k in 0..4u64 {
        let x = point(4, 50 + k, 1.0);
        let q = ValueQuery::new(&spec, 0.4, vec![], x).samples(2000).seed(6, k);
        let a = drift_logratio(&q.clone().control_variate(true)).unwrap();
        let b = drift_gradexp(&q).unwrap();
        let gap = a.drift.sub(&b.drift).norm2().sqrt();
        assert!(gap <= 3.0 * a.stderr.hypot(b.stderr) + 1e-9, "{gap} {} {}", a.stderr, b.stderr);
    }
}
