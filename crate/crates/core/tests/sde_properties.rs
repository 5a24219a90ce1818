use matlap::laplace::slot_grid;
use matlap::rng::stream;
use matlap::sde::{euler_maruyama, uniform_grid};
use matlap::value_function::{drift_logratio, quadratic_drift};
use matlap::{FnDrift, HermitianTuple, OptimalDrift, PotentialSpec, ValueQuery};

#[test]
fn fourth_moment_bound_for_coercive_drift() {
    // With <b(x), x> <= K (1 + ||x||^2): E||X_t||^4 <= (E||X_0||^4 + (3K + 1) d^2) e^{(3K + 1) t}, d = m.
    let (n, m) = (4, 2);
    let grid = uniform_grid(2.0, 200);
    let x0 = HermitianTuple::identity(n, m).scale(1.5);
    let paths = 200;
    for (a, k) in [(1.0, 0.0), (-1.0, 1.0)] {
        let field = FnDrift::linear(a);
        let mut fourth = vec![0.0; grid.len()];
        for p in 0..paths {
            let path = euler_maruyama(&field, &x0, &grid, &mut stream(1, &[p])).unwrap();
            for (f, x) in fourth.iter_mut().zip(&path.states) {
                *f += x.norm2().powi(2) / paths as f64;
            }
        }
        let start = x0.norm2().powi(2);
        let rate = 3.0 * k + 1.0;
        for (t, f) in grid.iter().zip(&fourth) {
            assert!(*f <= (start + rate * (m * m) as f64) * (rate * t).exp(), "a={a} t={t}: {f}");
        }
    }
}

#[test]
fn recorded_drift_matches_value_function_drift() {
    let spec = PotentialSpec::quadratic(0.5, 1);
    let n = 4;
    let field = OptimalDrift::new(&spec, n, 32, 9);
    let grid = slot_grid(&spec.times, 8).unwrap();
    let path = euler_maruyama(&field, &HermitianTuple::zeros(n, 1), &grid, &mut stream(2, &[])).unwrap();
    for k in 0..grid.len() - 1 {
        let (t, x) = (grid[k], &path.states[k]);
        let again = drift_logratio(&ValueQuery::new(&spec, t, vec![], x.clone()).samples(32).seed(4, k as u64)).unwrap();
        let gap = path.drifts[k].sub(&again.drift).norm2().sqrt();
        assert!(gap <= 3.0 * again.stderr + 1e-8, "node {k}: {gap}");
        assert!(path.drifts[k].sub(&quadratic_drift(0.5, t, x)).norm2().sqrt() <= 1e-8);
    }
}
