//! Moreau-Yosida envelope, proximal map and Yosida gradient on real coordinates.

use crate::error::{invalid, Error, Result};

type ValueFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;
type GradFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

/// A convex function with an optional gradient.
pub struct ConvexFn<'a> {
    value: ValueFn<'a>,
    gradient: Option<GradFn<'a>>,
    pub lower_bound: f64,
    pub lipschitz: Option<f64>,
}

impl<'a> ConvexFn<'a> {
    pub fn new(value: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        Self { value: Box::new(value), gradient: None, lower_bound: f64::NEG_INFINITY, lipschitz: None }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a) -> Self {
        self.gradient = Some(Box::new(g));
        self
    }

    pub fn with_lower_bound(mut self, c: f64) -> Self {
        self.lower_bound = c;
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    /// `1/2 |y|^2`.
    pub fn half_square() -> ConvexFn<'static> {
        ConvexFn::new(|y: &[f64]| 0.5 * dot(y, y)).with_gradient(|y: &[f64]| y.to_vec()).with_lower_bound(0.0).with_lipschitz(1.0)
    }

    /// `sum_i |y_i|`, without a gradient.
    pub fn l1() -> ConvexFn<'static> {
        ConvexFn::new(|y: &[f64]| y.iter().map(|v| v.abs()).sum()).with_lower_bound(0.0)
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        (self.value)(y)
    }

    pub fn gradient(&self, y: &[f64]) -> Option<Vec<f64>> {
        self.gradient.as_ref().map(|g| g(y))
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solver settings shared by the proximal map and the smooth minimizer.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 20_000 }
    }
}

/// Result of a smooth minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Accelerated gradient descent with backtracking and function-value restarts.
///
/// Stops when the gradient norm falls below `opts.tol`.
pub fn minimize_smooth<F>(f: F, x0: &[f64], step0: f64, opts: SolverOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = f(&x);
    let mut y = x.clone();
    let (mut fy, mut gy) = (fx, gx.clone());
    let mut lip = 1.0 / step0.max(1e-300);
    let mut theta = 1.0f64;
    let mut restarted = false;
    for it in 0..opts.max_iter {
        let gn = norm(&gx);
        if gn <= opts.tol {
            return Ok(Minimum { point: x, value: fx, grad_norm: gn, iterations: it });
        }
        // Backtracking on the quadratic upper model at y.
        let (x_new, fx_new, gx_new) = loop {
            let cand: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - g / lip).collect();
            let (fc, gc) = f(&cand);
            let model = fy - 0.5 * dot(&gy, &gy) / lip;
            let step = norm(&gy) / lip;
            let dg: f64 = gc.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let smooth = dg <= lip * step * (1.0 + 1e-9);
            if (smooth && fc <= model + 1e-12 * fy.abs().max(1.0)) || lip > 1e300 {
                break (cand, fc, gc);
            }
            lip *= 2.0;
        };
        if fx_new > fx && !restarted {
            // Restart momentum from the current iterate.
            restarted = true;
            theta = 1.0;
            y = x.clone();
            fy = fx;
            gy = gx.clone();
            continue;
        }
        let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_new;
        y = x_new.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
        let (fyn, gyn) = f(&y);
        fy = fyn;
        gy = gyn;
        x = x_new;
        fx = fx_new;
        gx = gx_new;
        theta = theta_new;
        restarted = false;
        lip *= 0.9;
    }
    let gn = norm(&gx);
    if gn <= opts.tol {
        return Ok(Minimum { point: x, value: fx, grad_norm: gn, iterations: opts.max_iter });
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual: gn })
}

/// Proximal point with solver diagnostics.
#[derive(Clone, Debug)]
pub struct ProxResult {
    pub point: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn golden_section(mut phi: impl FnMut(f64) -> f64, center: f64, scale: f64) -> f64 {
    let mut step = scale.max(1e-8);
    let mut lo = center - step;
    let mut hi = center + step;
    let f0 = phi(center);
    while phi(lo) < f0 {
        step *= 2.0;
        lo = center - step;
    }
    step = scale.max(1e-8);
    while phi(hi) < f0 {
        step *= 2.0;
        hi = center + step;
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (phi(c), phi(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = phi(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = phi(d);
        }
    }
    0.5 * (a + b)
}

/// `J_lambda(x) = argmin_y |x - y|^2 / (2 lambda) + g(y)` from an initial guess.
pub fn prox_from(g: &ConvexFn, lambda: f64, x: &[f64], init: &[f64], opts: SolverOptions) -> Result<ProxResult> {
    if !(lambda > 0.0) {
        return invalid(format!("lambda must be positive, got {lambda}"));
    }
    if init.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: init.len() });
    }
    if g.has_gradient() {
        let obj = |y: &[f64]| {
            let gy = g.gradient(y).unwrap();
            let v = 0.5 / lambda * y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + g.value(y);
            let grad: Vec<f64> = y.iter().zip(x).zip(&gy).map(|((a, b), c)| (a - b) / lambda + c).collect();
            (v, grad)
        };
        let m = minimize_smooth(obj, init, lambda, SolverOptions { tol: opts.tol / lambda, max_iter: opts.max_iter })?;
        let residual = m.grad_norm * lambda;
        Ok(ProxResult { point: m.point, residual, iterations: m.iterations })
    } else {
        // Cyclic coordinate golden-section search.
        let mut y = init.to_vec();
        let d = x.len();
        let objective = |y: &[f64]| 0.5 / lambda * y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + g.value(y);
        let mut current = objective(&y);
        for sweep in 0..opts.max_iter {
            let mut change: f64 = 0.0;
            for i in 0..d {
                let old = y[i];
                let mut trial = y.clone();
                let phi = |v: f64| {
                    trial[i] = v;
                    let q: f64 = trial.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    0.5 / lambda * q + g.value(&trial)
                };
                let scale = (old - x[i]).abs().max(lambda);
                let best = golden_section(phi, old, scale);
                y[i] = best;
                change = change.max((best - old).abs());
            }
            let next = objective(&y);
            // Golden-section resolution is about sqrt(eps), so a sweep without decrease also ends the search.
            let stalled = current - next <= 1e-14 * current.abs().max(1.0);
            current = next;
            if change <= opts.tol || stalled {
                return Ok(ProxResult { point: y, residual: change, iterations: sweep + 1 });
            }
        }
        Err(Error::NonConvergence { iterations: opts.max_iter, residual: f64::NAN })
    }
}

/// Proximal map `J_lambda(x)`.
pub fn prox(g: &ConvexFn, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
    prox_from(g, lambda, x, x, SolverOptions::default()).map(|r| r.point)
}

/// Moreau envelope `g_lambda(x)`.
pub fn envelope(g: &ConvexFn, lambda: f64, x: &[f64]) -> Result<f64> {
    let j = prox(g, lambda, x)?;
    let q: f64 = j.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 / lambda * q + g.value(&j))
}

/// Yosida gradient `A_lambda(x) = (x - J_lambda(x)) / lambda`.
pub fn yosida_gradient(g: &ConvexFn, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
    let j = prox(g, lambda, x)?;
    Ok(x.iter().zip(&j).map(|(a, b)| (a - b) / lambda).collect())
}

/// Yosida gradient warm-started from a previous proximal point; returns `(A, J)`.
pub fn yosida_gradient_from(g: &ConvexFn, lambda: f64, x: &[f64], init: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let j = prox_from(g, lambda, x, init, SolverOptions::default())?.point;
    let a = x.iter().zip(&j).map(|(a, b)| (a - b) / lambda).collect();
    Ok((a, j))
}

/// Budgets of [`check_suite`].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    /// Random pairs for the contraction and Lipschitz checks.
    pub pairs: usize,
    pub dim: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { pairs: 1000, dim: 3, lambdas: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0], seed: 0 }
    }
}

/// Outcome of the envelope and proximal-map checks.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SuiteReport {
    /// Largest deviation from the Huber envelope and soft threshold of `|y|`.
    pub closed_form_error: f64,
    /// Largest `|J x - J y|^2 - <J x - J y, x - y>` over random pairs.
    pub firm_violation: f64,
    /// Largest `lambda |A x - A y| / |x - y|`.
    pub lipschitz_ratio: f64,
    /// Envelope nonincreasing in `lambda` and below `g`.
    pub monotone: bool,
    pub closed_form_pass: bool,
    pub firm_pass: bool,
    pub lipschitz_pass: bool,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.closed_form_pass && self.firm_pass && self.lipschitz_pass && self.monotone
    }
}

/// Closed forms for `|y|`, firm nonexpansiveness of the proximal map,
/// `1/lambda`-Lipschitz Yosida gradients and monotonicity of the envelope in `lambda`.
pub fn check_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    use rand::Rng;
    if opts.pairs == 0 || opts.dim == 0 || opts.lambdas.is_empty() {
        return invalid("pairs, dim and lambdas must be nonempty");
    }
    if let Some(l) = opts.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return invalid(format!("lambda must be positive, got {l}"));
    }
    let mut lambdas = opts.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut rng = crate::rng::stream(opts.seed, &[0x7051DA]);
    let d = opts.dim;
    let l1 = ConvexFn::l1();
    let mut closed: f64 = 0.0;
    for k in 0..opts.pairs.min(200) {
        let lambda = lambdas[k % lambdas.len()];
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = prox(&l1, lambda, &x)?;
        let e = envelope(&l1, lambda, &x)?;
        let huber: f64 = x.iter().map(|&v| if v.abs() <= lambda { v * v / (2.0 * lambda) } else { v.abs() - lambda / 2.0 }).sum();
        for (a, &v) in p.iter().zip(&x) {
            closed = closed.max((a - v.signum() * (v.abs() - lambda).max(0.0)).abs());
        }
        closed = closed.max((e - huber).abs());
    }
    let g = ConvexFn::new(|y: &[f64]| y.iter().map(|v| 0.25 * v.powi(4) + v.abs()).sum::<f64>());
    let (mut firm, mut lip) = (f64::NEG_INFINITY, 0.0f64);
    for k in 0..opts.pairs {
        let lambda = lambdas[k % lambdas.len()];
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (px, py) = (prox(&g, lambda, &x)?, prox(&g, lambda, &y)?);
        let dp: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        firm = firm.max(dot(&dp, &dp) - dot(&dp, &dx));
        // A = (x - J x) / lambda, so lambda (A x - A y) = dx - dp.
        let da: Vec<f64> = dx.iter().zip(&dp).map(|(a, b)| a - b).collect();
        lip = lip.max(norm(&da) / norm(&dx));
    }
    let mut monotone = true;
    for _ in 0..50 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vals: Vec<f64> = lambdas.iter().map(|&l| envelope(&g, l, &x)).collect::<Result<_>>()?;
        monotone &= vals.windows(2).all(|w| w[1] <= w[0] + 1e-9) && vals[0] <= g.value(&x) + 1e-9;
    }
    Ok(SuiteReport {
        closed_form_error: closed,
        firm_violation: firm,
        lipschitz_ratio: lip,
        monotone,
        closed_form_pass: closed <= 1e-6,
        firm_pass: firm <= 1e-9,
        lipschitz_pass: lip <= 1.0 + 1e-6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn huber(x: f64, l: f64) -> f64 {
        if x.abs() <= l {
            x * x / (2.0 * l)
        } else {
            x.abs() - l / 2.0
        }
    }

    #[test]
    fn suite_passes_with_small_budget() {
        let r = check_suite(&SuiteOptions { pairs: 50, ..Default::default() }).unwrap();
        assert!(r.pass(), "{r:?}");
        assert!(check_suite(&SuiteOptions { lambdas: vec![0.0], ..Default::default() }).is_err());
    }

    #[test]
    fn quadratic_closed_forms() {
        let g = ConvexFn::half_square();
        let x = [1.5, -2.0, 0.25];
        for lambda in [0.1, 1.0, 3.0] {
            let j = prox(&g, lambda, &x).unwrap();
            for (a, b) in j.iter().zip(&x) {
                assert!((a - b / (1.0 + lambda)).abs() < 1e-8);
            }
            let e = envelope(&g, lambda, &x).unwrap();
            assert!((e - dot(&x, &x) / (2.0 * (1.0 + lambda))).abs() < 1e-10);
            let a = yosida_gradient(&g, lambda, &x).unwrap();
            for (ai, b) in a.iter().zip(&x) {
                assert!((ai - b / (1.0 + lambda)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn absolute_value_closed_forms() {
        let g = ConvexFn::l1();
        for &x in &[-3.0, -0.4, 0.0, 0.05, 0.7, 2.5] {
            for &l in &[0.1, 0.5, 1.0] {
                let j = prox(&g, l, &[x]).unwrap()[0];
                let soft = x.signum() * (x.abs() - l).max(0.0);
                assert!((j - soft).abs() < 1e-6, "prox {x} {l}: {j} vs {soft}");
                assert!((envelope(&g, l, &[x]).unwrap() - huber(x, l)).abs() < 1e-6);
                let a = yosida_gradient(&g, l, &[x]).unwrap()[0];
                assert!((a - (x / l).clamp(-1.0, 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prox_at_zero_bound() {
        let g = ConvexFn::new(|y: &[f64]| 0.5 * (y[0] - 1.0).powi(2) + (y[1] + 2.0).abs()).with_lower_bound(0.0);
        for l in [0.1, 1.0, 5.0] {
            let j = prox(&g, l, &[0.0, 0.0]).unwrap();
            assert!(dot(&j, &j) <= 2.0 * l * (g.value(&[0.0, 0.0]) - g.value(&j)) + 1e-8);
        }
    }

    #[test]
    fn smooth_minimizer_finds_quadratic_minimum() {
        let f = |x: &[f64]| (0.5 * (4.0 * x[0] * x[0] + x[1] * x[1]) - x[0], vec![4.0 * x[0] - 1.0, x[1]]);
        let m = minimize_smooth(f, &[3.0, -2.0], 1.0, SolverOptions::default()).unwrap();
        assert!((m.point[0] - 0.25).abs() < 1e-8 && m.point[1].abs() < 1e-8);
    }

    #[test]
    fn nonpositive_lambda_rejected() {
        assert!(prox(&ConvexFn::half_square(), 0.0, &[1.0]).is_err());
    }
}
