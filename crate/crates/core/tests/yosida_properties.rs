use matlap::stats::log_log_slope;
use matlap::yosida::{envelope, prox, yosida_gradient};
use matlap::ConvexFn;
use proptest::prelude::*;

fn smooth_quartic() -> ConvexFn<'static> {
    ConvexFn::new(|y: &[f64]| y.iter().enumerate().map(|(i, v)| 0.25 * v.powi(4) + 0.5 * (1.0 + i as f64) * v * v).sum())
        .with_gradient(|y: &[f64]| y.iter().enumerate().map(|(i, v)| v.powi(3) + (1.0 + i as f64) * v).collect())
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn envelope_gradient_is_gradient_at_prox(x in vec3(), lambda in 0.05f64..3.0) {
        let g = smooth_quartic();
        let j = prox(&g, lambda, &x).unwrap();
        let a = yosida_gradient(&g, lambda, &x).unwrap();
        let at_prox = g.gradient(&j).unwrap();
        for (u, v) in a.iter().zip(&at_prox) {
            prop_assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()), "{:?} vs {:?}", a, at_prox);
        }
    }

    #[test]
    fn envelope_is_midpoint_convex(x in vec3(), y in vec3(), lambda in 0.05f64..3.0) {
        let g = ConvexFn::new(|v: &[f64]| v.iter().map(|a| a.abs() + 0.1 * a.powi(4)).sum());
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
        let e = |p: &[f64]| envelope(&g, lambda, p).unwrap();
        prop_assert!(e(&mid) <= 0.5 * (e(&x) + e(&y)) + 1e-8);
    }
}

#[test]
fn envelope_gradient_is_holder_in_the_family_parameter() {
    // g^t(y) = a(t) |y|^2 / 2 with a(t) = 1 + sqrt(t).
    let lambda = 0.7;
    let x = [1.0, -0.5, 2.0];
    let grad_at = |t: f64| {
        let a = 1.0 + t.sqrt();
        let g = ConvexFn::new(move |y: &[f64]| 0.5 * a * y.iter().map(|v| v * v).sum::<f64>())
            .with_gradient(move |y: &[f64]| y.iter().map(|v| a * v).collect());
        yosida_gradient(&g, lambda, &x).unwrap()
    };
    let base = grad_at(0.0);
    let ds = [1e-4, 1e-3, 1e-2, 1e-1];
    let diffs: Vec<f64> = ds.iter().map(|&d| grad_at(d).iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).collect();
    let slope = log_log_slope(&ds, &diffs);
    assert!((0.45..=0.6).contains(&slope), "{slope} {diffs:?}");
}
