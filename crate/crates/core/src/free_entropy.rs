//! Free Fisher information along the semicircular flow, non-microstates free
//! entropy by quadrature, and the control-cost estimate of the entropy of
//! one-slot Gibbs laws.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::gibbs::total_gradient;
use crate::laplace::{simulate_costs, summarize_costs, PerturbedDrift, RhsOptions};
use crate::matrix_core::{sample_normalized, tau, CMat, HermitianTuple, UnitaryTuple};
use crate::nc_poly::{free_difference_quotient, Evaluator, NCPolynomial};
use crate::potentials::{Exponent, PotentialSpec};
use crate::rng::stream;
use crate::stats::{linear_fit, ValueEstimate};
use crate::value_function::OptimalDrift;

/// Piecewise-linear probability density on a grid.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Integral of the interpolant.
    pub mass: f64,
}

impl SpectralDensity {
    /// Checks nonnegativity and unit mass to `1e-8`.
    pub fn new(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != density.len() {
            return invalid("density needs matching grid and values with at least two nodes");
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("density grid must be strictly increasing");
        }
        if density.iter().any(|p| !(*p >= 0.0)) {
            return invalid("density must be nonnegative");
        }
        let mass = trapezoid(&grid, &density);
        if (mass - 1.0).abs() > 1e-8 {
            return invalid(format!("density integrates to {mass}, not 1"));
        }
        Ok(Self { grid, density, mass })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        let mass = if grid.len() == density.len() && grid.len() > 1 { trapezoid(&grid, &density) } else { 0.0 };
        if !(mass > 0.0) {
            return invalid("density has no mass");
        }
        Self::new(grid, density.iter().map(|p| p / mass).collect())
    }

    /// Histogram of eigenvalues, interpolated between bin centres and padded with zeros.
    pub fn from_eigenvalues(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins < 2 {
            return invalid("need eigenvalues and at least two bins");
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo).max(1e-12) / bins as f64;
        let mut counts = vec![0.0; bins];
        for v in values {
            counts[(((v - lo) / w) as usize).min(bins - 1)] += 1.0;
        }
        let mut grid = vec![lo - 0.5 * w];
        let mut dens = vec![0.0];
        for (k, c) in counts.iter().enumerate() {
            grid.push(lo + (k as f64 + 0.5) * w);
            dens.push(*c);
        }
        grid.push(hi + 0.5 * w);
        dens.push(0.0);
        Self::normalized(grid, dens)
    }

    fn value(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g[0] || x >= g[g.len() - 1] {
            return 0.0;
        }
        let k = g.partition_point(|&s| s <= x) - 1;
        let w = (x - g[k]) / (g[k + 1] - g[k]);
        self.density[k] * (1.0 - w) + self.density[k + 1] * w
    }

    /// Exact Cauchy transform of the interpolant for `Im z > 0`.
    fn cauchy(&self, z: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..self.grid.len() - 1 {
            let (a, b) = (self.grid[k], self.grid[k + 1]);
            let (pa, pb) = (self.density[k], self.density[k + 1]);
            let slope = (pb - pa) / (b - a);
            let lz = pa + slope * (z - a);
            acc += lz * ((z - a) / (z - b)).ln() - slope * (b - a);
        }
        acc
    }

    fn cauchy_derivative(&self, z: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..self.grid.len() - 1 {
            let (a, b) = (self.grid[k], self.grid[k + 1]);
            let (pa, pb) = (self.density[k], self.density[k + 1]);
            let slope = (pb - pa) / (b - a);
            let lz = pa + slope * (z - a);
            acc += slope * ((z - a) / (z - b)).ln() + lz * (1.0 / (z - a) - 1.0 / (z - b));
        }
        acc
    }
}

/// Principal square root, accurate in both components near the negative real axis.
fn csqrt(z: Complex64) -> Complex64 {
    let m = z.norm();
    if z.re >= 0.0 {
        let t = (0.5 * (m + z.re)).sqrt();
        Complex64::new(t, if t > 0.0 { z.im / (2.0 * t) } else { 0.0 })
    } else {
        let t = (0.5 * (m - z.re)).sqrt();
        Complex64::new(z.im.abs() / (2.0 * t), t.copysign(z.im))
    }
}

/// Clenshaw-Curtis weights on the nodes `-cos(pi j / n)`, `j = 0..=n`, of `[-1, 1]`.
fn clenshaw_curtis(n: usize) -> Vec<f64> {
    let n = n.max(8);
    let nf = n as f64;
    let mut w = vec![0.0; n + 1];
    for (j, wj) in w.iter_mut().enumerate() {
        let theta = PI * j as f64 / nf;
        let mut s = 0.0;
        for k in 1..=n / 2 {
            let b = if 2 * k == n { 1.0 } else { 2.0 };
            s += b / (4.0 * (k * k) as f64 - 1.0) * (2.0 * k as f64 * theta).cos();
        }
        let c = if j == 0 || j == n { 1.0 } else { 2.0 };
        *wj = c / nf * (1.0 - s);
    }
    w
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

/// Starting law of the flow.
#[derive(Clone, Debug, Serialize)]
pub enum InitialLaw {
    Semicircle { variance: f64 },
    Density(SpectralDensity),
}

impl InitialLaw {
    fn support(&self) -> (f64, f64) {
        match self {
            InitialLaw::Semicircle { variance } => (-2.0 * variance.sqrt(), 2.0 * variance.sqrt()),
            InitialLaw::Density(d) => (d.grid[0], d.grid[d.grid.len() - 1]),
        }
    }

    fn density(&self, x: f64) -> f64 {
        match self {
            InitialLaw::Semicircle { variance } => {
                let r = 4.0 * variance - x * x;
                if r > 0.0 {
                    r.sqrt() / (2.0 * PI * variance)
                } else {
                    0.0
                }
            }
            InitialLaw::Density(d) => d.value(x),
        }
    }

    fn cauchy(&self, z: Complex64) -> Complex64 {
        match self {
            InitialLaw::Semicircle { variance } => {
                let r = 2.0 * variance.sqrt();
                // Rationalized to avoid cancellation near the real axis.
                2.0 / (z + csqrt(z - r) * csqrt(z + r))
            }
            InitialLaw::Density(d) => d.cauchy(z),
        }
    }

    fn cauchy_derivative(&self, z: Complex64) -> Complex64 {
        match self {
            InitialLaw::Semicircle { variance } => {
                let r = 2.0 * variance.sqrt();
                let w = csqrt(z - r) * csqrt(z + r);
                -2.0 / (w * (z + w))
            }
            InitialLaw::Density(d) => d.cauchy_derivative(z),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Semicircle { variance } if !(*variance > 0.0 && variance.is_finite()) => {
                invalid(format!("semicircle variance must be positive, got {variance}"))
            }
            _ => Ok(()),
        }
    }
}

/// Law at the endpoint of `G = c sum tau(X(1)^2)`, as a starting law.
pub fn quadratic_law(spec: &PotentialSpec) -> Result<InitialLaw> {
    let one_slot = spec.times.len() == 1 && (spec.times[0] - 1.0).abs() < 1e-15 && spec.m == 1;
    let quadratic = spec.is_word_free()
        && spec.components.len() == 1
        && spec.components[0].d == 0.0
        && spec.d == 0.0
        && (spec.p == Exponent::Finite(2.0) || spec.components.len() == 1);
    if !(one_slot && (spec.components.is_empty() || quadratic)) {
        return invalid("a closed-form law needs a one-matrix, one-slot quadratic potential at time 1");
    }
    let c = spec.components.first().map(|c| c.c).unwrap_or(0.0);
    Ok(InitialLaw::Semicircle { variance: 1.0 / (1.0 + 2.0 * c) })
}

/// Free Fisher information of `X + sqrt(t) S` at one flow time.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowPoint {
    pub t: f64,
    /// `(4 pi^2 / 3) int p^3`; the standard error is the gap to the conjugate-variable route.
    pub fisher: ValueEstimate,
    /// `int xi^2 p` with `xi = 2 pi H p`.
    pub fisher_conjugate: f64,
    /// Largest violation of `int xi P p = (tau x tau)(partial P)` for `P` in `{x, x^2, x^3}`.
    pub residual: f64,
    pub mass: f64,
}

/// Resolution of the density route.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowOptions {
    /// Nodes of the edge-clustered grid on the support.
    pub nodes: usize,
    /// Largest tolerated `|mass - 1|`.
    pub mass_tolerance: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { nodes: 1000, mass_tolerance: 1e-6 }
    }
}

/// `v(u) = inf { v >= 0 : int dmu(y) / ((u - y)^2 + v^2) <= 1/t }`.
fn biane_height(law: &InitialLaw, u: f64, t: f64) -> f64 {
    let f = |v: f64| -law.cauchy(Complex64::new(u, v)).im / v;
    let floor = 1e-13;
    if f(floor) <= 1.0 / t {
        return 0.0;
    }
    let (mut lo, mut hi) = (floor, t.sqrt() * 1.000001);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 1.0 / t {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Outermost `u` on each side where the flow density is positive.
fn biane_edges(law: &InitialLaw, t: f64) -> (f64, f64) {
    let (a, b) = law.support();
    let centre = 0.5 * (a + b);
    let r = t.sqrt() * 1.000001;
    let edge = |inside: f64, outside: f64| {
        let (mut i, mut o) = (inside, outside);
        for _ in 0..200 {
            let mid = 0.5 * (i + o);
            if biane_height(law, mid, t) > 0.0 {
                i = mid;
            } else {
                o = mid;
            }
            if (o - i).abs() <= 1e-14 * (1.0 + o.abs()) {
                break;
            }
        }
        0.5 * (i + o)
    };
    (edge(centre, a - r), edge(centre, b + r))
}

/// Chebyshev-Lobatto nodes on `[lo, hi]`.
fn clustered(lo: f64, hi: f64, nodes: usize) -> Vec<f64> {
    let k = nodes.max(8);
    (0..=k).map(|j| 0.5 * (lo + hi) - 0.5 * (hi - lo) * (PI * j as f64 / k as f64).cos()).collect()
}

/// Density route at one time: free convolution with a semicircle of variance `t` by subordination.
pub fn fisher_at(law: &InitialLaw, t: f64, opts: &FlowOptions) -> Result<FlowPoint> {
    law.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return invalid(format!("flow time must be nonnegative, got {t}"));
    }
    // Nodes x_k, quadrature weights w_k for dx, density p_k and conjugate variable xi_k.
    let (x, w, p, xi) = if t == 0.0 {
        let (a, b) = law.support();
        let x = clustered(a, b, opts.nodes);
        let w: Vec<f64> = clenshaw_curtis(opts.nodes).iter().map(|c| c * 0.5 * (b - a)).collect();
        let p: Vec<f64> = x.iter().map(|&s| law.density(s)).collect();
        let xi = x.iter().map(|&s| 2.0 * law.cauchy(Complex64::new(s, 1e-13)).re).collect();
        (x, w, p, xi)
    } else {
        let (lo, hi) = biane_edges(law, t);
        let us = clustered(lo, hi, opts.nodes);
        let cc = clenshaw_curtis(opts.nodes);
        let k = us.len();
        let (mut x, mut w, mut p, mut xi) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
        for (j, &u) in us.iter().enumerate() {
            let v = biane_height(law, u, t);
            let omega = Complex64::new(u, v.max(1e-13));
            let g = law.cauchy(omega);
            // x = H(omega) with H = id + t G on the curve u + i v(u); dx/du = |H'|^2 / Re H'.
            let h = 1.0 + t * law.cauchy_derivative(omega);
            let jac = if v > 0.0 && h.re > 0.0 { h.norm_sqr() / h.re } else { 0.0 };
            x.push(u + t * g.re);
            w.push(cc[j] * 0.5 * (hi - lo) * jac);
            p.push(v / (PI * t));
            xi.push(2.0 * g.re);
        }
        (x, w, p, xi)
    };
    let integrate = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(|k| w[k] * f(k)).sum::<f64>();
    let mass = integrate(&|k| p[k]);
    if (mass - 1.0).abs() > opts.mass_tolerance {
        return invalid(format!("density route lost normalization at t = {t}: mass {mass}; increase the node count"));
    }
    let fisher = 4.0 * PI * PI / 3.0 * integrate(&|k| p[k].powi(3));
    let fisher_conjugate = integrate(&|k| xi[k] * xi[k] * p[k]);
    let m1 = integrate(&|k| x[k] * p[k]);
    let m2 = integrate(&|k| x[k] * x[k] * p[k]);
    let r1 = integrate(&|k| xi[k] * x[k] * p[k]) - 1.0;
    let r2 = integrate(&|k| xi[k] * x[k] * x[k] * p[k]) - 2.0 * m1;
    let r3 = integrate(&|k| xi[k] * x[k].powi(3) * p[k]) - (2.0 * m2 + m1 * m1);
    Ok(FlowPoint {
        t,
        fisher: ValueEstimate { value: fisher, stderr: (fisher - fisher_conjugate).abs(), samples: x.len() },
        fisher_conjugate,
        residual: r1.abs().max(r2.abs()).max(r3.abs()),
        mass,
    })
}

/// Free Fisher information of `X + sqrt(t) S` along a time grid.
pub fn fisher_semicircular_flow(law: &InitialLaw, times: &[f64], opts: &FlowOptions) -> Result<Vec<FlowPoint>> {
    times.par_iter().map(|&t| fisher_at(law, t, opts)).collect()
}

/// Times `t_k = (1 + t_max)^(k / points) - 1`, uniform in `log(1 + t)`.
pub fn flow_times(t_max: f64, points: usize) -> Vec<f64> {
    let l = (1.0 + t_max).ln();
    (0..=points).map(|k| (l * k as f64 / points as f64).exp_m1()).collect()
}

/// Monotonicity and regularity of a computed flow.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowDiagnostics {
    /// No increase beyond three standard errors between consecutive times.
    pub nonincreasing: bool,
    pub max_increase: f64,
    /// Log-log slope of `|Phi(t) - Phi(t_0)|` against `t - t_0` for `t - t_0 <= 1`.
    pub holder_exponent: f64,
}

pub fn flow_diagnostics(points: &[FlowPoint]) -> Result<FlowDiagnostics> {
    if points.len() < 3 {
        return invalid("need at least three flow points");
    }
    let mut max_increase = f64::NEG_INFINITY;
    let mut nonincreasing = true;
    for w in points.windows(2) {
        let d = w[1].fisher.value - w[0].fisher.value;
        max_increase = max_increase.max(d);
        if d > 3.0 * w[1].fisher.combined_stderr(&w[0].fisher) + 1e-12 {
            nonincreasing = false;
        }
    }
    let base = &points[0];
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for p in &points[1..] {
        let (dt, df) = (p.t - base.t, (p.fisher.value - base.fisher.value).abs());
        if dt > 0.0 && dt <= 1.0 && df > 0.0 {
            lx.push(dt.ln());
            ly.push(df.ln());
        }
    }
    if lx.len() < 2 {
        return invalid("not enough flow points within unit distance of the first");
    }
    Ok(FlowDiagnostics { nonincreasing, max_increase, holder_exponent: linear_fit(&lx, &ly).0 })
}

fn simpson_nonuniform(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut k = 0;
    while k + 2 < x.len() {
        let (h0, h1) = (x[k + 1] - x[k], x[k + 2] - x[k + 1]);
        acc += (h0 + h1) / 6.0 * ((2.0 - h1 / h0) * y[k] + (h0 + h1) * (h0 + h1) / (h0 * h1) * y[k + 1] + (2.0 - h0 / h1) * y[k + 2]);
        k += 2;
    }
    if k + 1 < x.len() {
        acc += 0.5 * (x[k + 1] - x[k]) * (y[k] + y[k + 1]);
    }
    acc
}

/// Smallest flow horizon accepted by [`chi_star`].
pub const MIN_FLOW_HORIZON: f64 = 20.0;

/// `(m/2) log(2 pi e)`, the value for `m` free standard semicirculars.
pub fn semicircular_entropy(m: usize) -> f64 {
    0.5 * m as f64 * (2.0 * PI * std::f64::consts::E).ln()
}

/// `1/2 int_0^inf (m/(1+t) - Phi(t)) dt + (m/2) log(2 pi e)`.
///
/// Integrates in `log(1 + t)` over the given points and closes the tail with
/// `Phi(t) = m/(t + s)`, `s` matched at the last point.
pub fn chi_star(points: &[FlowPoint], m: usize) -> Result<f64> {
    if points.len() < 3 || points[0].t != 0.0 {
        return invalid("flow must start at t = 0 with at least three points");
    }
    let last = points[points.len() - 1];
    if last.t < MIN_FLOW_HORIZON {
        return Err(Error::InsufficientRange(format!("flow ends at t = {}; extend it to at least t = {MIN_FLOW_HORIZON}", last.t)));
    }
    let mf = m as f64;
    let s: Vec<f64> = points.iter().map(|p| p.t.ln_1p()).collect();
    let y: Vec<f64> = points.iter().map(|p| mf - (1.0 + p.t) * p.fisher.value).collect();
    let body = simpson_nonuniform(&s, &y);
    let shift = mf / last.fisher.value - last.t;
    let tail = mf * ((last.t + shift) / (last.t + 1.0)).ln();
    Ok(0.5 * (body + tail) + semicircular_entropy(m))
}

/// [`chi_star`] by adaptive Simpson in `log(1 + t)` on `[0, t_max]`.
pub fn chi_star_adaptive(law: &InitialLaw, t_max: f64, tol: f64, opts: &FlowOptions) -> Result<f64> {
    if t_max < MIN_FLOW_HORIZON {
        return Err(Error::InsufficientRange(format!("t_max = {t_max}; use at least {MIN_FLOW_HORIZON}")));
    }
    let f = |s: f64| -> Result<f64> {
        let t = s.exp_m1();
        Ok(1.0 - (1.0 + t) * fisher_at(law, t, opts)?.fisher.value)
    };
    fn recurse(
        f: &dyn Fn(f64) -> Result<f64>,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm)?, f(rm)?);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return Ok(left + right + (left + right - whole) / 15.0);
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    let b = t_max.ln_1p();
    let (fa, fm, fb) = (f(0.0)?, f(0.5 * b)?, f(b)?);
    let whole = b / 6.0 * (fa + 4.0 * fm + fb);
    let body = recurse(&f, 0.0, b, fa, fm, fb, whole, tol, 20)?;
    let phi_end = 1.0 - fb;
    let phi_end = phi_end / (1.0 + t_max);
    let shift = 1.0 / phi_end - t_max;
    let tail = ((t_max + shift) / (t_max + 1.0)).ln();
    Ok(0.5 * (body + tail) + semicircular_entropy(1))
}

/// `chi(standard semicircular) - 1/2`, the additive constant relating the control-cost entropy to `chi`.
pub fn calibrate_constant(opts: &FlowOptions) -> Result<f64> {
    Ok(chi_star_adaptive(&InitialLaw::Semicircle { variance: 1.0 }, 100.0, 1e-9, opts)? - 0.5)
}

/// Finite-N projection estimate of the Fisher information of `X + sqrt(t) S`.
///
/// Projects the ensemble score `x + grad G(x)` onto `{Y, Y^3, tau(Y^2) Y}`
/// for `Y = X + sqrt(t) S`, per variable, in the `tau` inner product.
/// The standard error comes from ten-block jackknife.
pub fn fisher_matrix_projection(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    samples: &[Vec<HermitianTuple>],
    t: f64,
    seed: u64,
) -> Result<ValueEstimate> {
    if spec.slots() != 1 {
        return invalid("the projection check needs a one-slot potential");
    }
    if samples.len() < 20 {
        return invalid("need at least 20 samples");
    }
    let m = spec.m;
    const K: usize = 3;
    // Per sample and variable: Gram entries and projections.
    let rows: Vec<Vec<([f64; K * K], [f64; K])>> = samples
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let xi = total_gradient(spec, u, x)?;
            let y = if t > 0.0 {
                let s = sample_normalized(x[0].n(), m, t, &mut stream(seed, &[0xF15, k as u64]))?;
                x[0].add(&s)
            } else {
                x[0].clone()
            };
            (0..m)
                .map(|l| {
                    let a = y.mat(l);
                    let a2 = a * a;
                    let feats: [CMat; K] = [a.clone(), &a2 * a, a.scale(tau(&a2).re)];
                    let mut g = [0.0; K * K];
                    let mut r = [0.0; K];
                    for i in 0..K {
                        r[i] = tau(&(xi[0].mat(l) * &feats[i])).re;
                        for j in 0..K {
                            g[i * K + j] = tau(&(&feats[i] * &feats[j])).re;
                        }
                    }
                    Ok((g, r))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let project = |idx: &mut dyn Iterator<Item = usize>| -> f64 {
        let mut g = vec![[0.0; K * K]; m];
        let mut r = vec![[0.0; K]; m];
        let mut count = 0.0;
        for k in idx {
            count += 1.0;
            for l in 0..m {
                for i in 0..K * K {
                    g[l][i] += rows[k][l].0[i];
                }
                for i in 0..K {
                    r[l][i] += rows[k][l].1[i];
                }
            }
        }
        (0..m)
            .map(|l| {
                let gm = DMatrix::from_row_slice(K, K, &g[l]) / count;
                let rv = DVector::from_row_slice(&r[l]) / count;
                let svd = gm.svd(true, true);
                let eps = 1e-12 * svd.singular_values.max();
                let beta = svd.solve(&rv, eps).unwrap_or_else(|_| DVector::zeros(K));
                rv.dot(&beta)
            })
            .sum()
    };
    let n = rows.len();
    let value = project(&mut (0..n));
    let blocks = 10;
    let size = n / blocks;
    let loo: Vec<f64> = (0..blocks).map(|b| project(&mut (0..n).filter(|k| *k / size != b || *k >= blocks * size))).collect();
    let mean = loo.iter().sum::<f64>() / blocks as f64;
    let var = (blocks - 1) as f64 / blocks as f64 * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    Ok(ValueEstimate { value, stderr: var.sqrt(), samples: n })
}

/// Entropy of a one-slot Gibbs law through its optimal Brownian bridge.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChiControl {
    /// `-1/2 int E ||b||^2 dt`.
    pub chi_g: ValueEstimate,
    /// `sum_l E tau(X_l(1)^2)`.
    pub second_moment: ValueEstimate,
    /// `chi_g + second_moment / 2 + m C`.
    pub chi: ValueEstimate,
    pub constant: f64,
}

fn check_terminal(spec: &PotentialSpec) -> Result<()> {
    spec.validate()?;
    if spec.times.len() != 1 || (spec.times[0] - 1.0).abs() > 1e-15 {
        return invalid("the entropy route needs a potential on the single slot t = 1");
    }
    if !spec.is_convex_mode() {
        return invalid("the entropy route needs a convex potential");
    }
    Ok(())
}

/// Control-cost entropy: simulates the optimal bridge to the Gibbs endpoint law.
pub fn chi_microstates_control(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, constant: f64, opts: &RhsOptions) -> Result<ChiControl> {
    check_terminal(spec)?;
    let mut field = OptimalDrift::new(spec, n, opts.drift_samples, opts.seed ^ 0xC41);
    field.curvature = opts.curvature;
    field.unitaries = u.clone();
    let pairs = simulate_costs(spec, u, &field, n, opts)?;
    let r = summarize_costs(&pairs, opts);
    let m2: Vec<f64> = pairs.iter().map(|p| p.combine(|c| c.slots[0].norm2())).collect();
    let second_moment = ValueEstimate::from_samples(&m2);
    let chi_vals: Vec<f64> = pairs.iter().map(|p| p.combine(|c| -c.control + 0.5 * c.slots[0].norm2())).collect();
    let mut chi = ValueEstimate::from_samples(&chi_vals);
    chi.value += spec.m as f64 * constant;
    Ok(ChiControl { chi_g: ValueEstimate { value: -r.control.value, ..r.control }, second_moment, chi, constant })
}

/// Control-cost entropy with an optimal and a perturbed drift on shared noise.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChiPerturbation {
    pub optimal: ValueEstimate,
    /// `chi_g` lowered by the paired excess cost of the perturbed drift.
    pub perturbed: ValueEstimate,
    /// Perturbed value is below the optimal one by more than three standard errors.
    pub pass: bool,
}

pub fn chi_perturbation(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, eps: f64, opts: &RhsOptions) -> Result<ChiPerturbation> {
    check_terminal(spec)?;
    let mut field = OptimalDrift::new(spec, n, opts.drift_samples, opts.seed ^ 0xC41);
    field.curvature = opts.curvature;
    field.unitaries = u.clone();
    let pert = PerturbedDrift::new(&field, eps, n, spec.m, opts.seed)?;
    let a = simulate_costs(spec, u, &field, n, opts)?;
    let b = simulate_costs(spec, u, &pert, n, opts)?;
    let mc = opts.martingale_control;
    let cost = |c: &crate::laplace::PathCost| c.potential + c.control + if mc { c.martingale } else { 0.0 };
    let excess: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y.combine(cost) - x.combine(cost)).collect();
    let excess = ValueEstimate::from_samples(&excess);
    let ctl = summarize_costs(&a, opts).control;
    let optimal = ValueEstimate { value: -ctl.value, ..ctl };
    let perturbed =
        ValueEstimate { value: optimal.value - excess.value, stderr: optimal.stderr.hypot(excess.stderr), samples: excess.samples };
    Ok(ChiPerturbation { optimal, perturbed, pass: excess.value > 3.0 * excess.stderr })
}

/// `E[tau(xi_i P)] - E[(tau x tau)(partial_i P)]` for a candidate conjugate variable.
pub fn candidate_residual(
    samples: &[Vec<HermitianTuple>],
    u: &UnitaryTuple,
    candidate: &(dyn Fn(&[HermitianTuple]) -> Result<Vec<HermitianTuple>> + Sync),
    p: &NCPolynomial,
    i: usize,
) -> Result<ValueEstimate> {
    let dq = free_difference_quotient(p, i);
    let vals: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            let m = x[0].m();
            let xi = candidate(x)?;
            let refs: Vec<&CMat> = x.iter().flat_map(|s| s.mats().iter()).collect();
            let mut ev = Evaluator::from_refs(refs, u);
            let pv = ev.poly(p)?;
            let lhs = tau(&(xi[i / m].mat(i % m) * &pv));
            let mut rhs = Complex64::new(0.0, 0.0);
            for (c, a, b) in dq.terms() {
                rhs += c * tau(&ev.word(a)?) * tau(&ev.word(b)?);
            }
            Ok((lhs - rhs).re)
        })
        .collect::<Result<_>>()?;
    Ok(ValueEstimate::from_samples(&vals))
}

/// One row of a conjugate-variable check.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualRow {
    pub polynomial: String,
    pub variable: usize,
    pub estimate: ValueEstimate,
    /// Within three standard errors of zero.
    pub pass: bool,
}

/// Residuals of `tau((X_i + D_i V) P) = (tau x tau)(partial_i P)` over a polynomial battery, per variable.
pub fn conjugate_variable_residual(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    samples: &[Vec<HermitianTuple>],
    battery: &[NCPolynomial],
) -> Result<Vec<ResidualRow>> {
    let candidate = |x: &[HermitianTuple]| total_gradient(spec, u, x);
    residual_rows(samples, u, &candidate, battery, spec.variables())
}

pub fn residual_rows(
    samples: &[Vec<HermitianTuple>],
    u: &UnitaryTuple,
    candidate: &(dyn Fn(&[HermitianTuple]) -> Result<Vec<HermitianTuple>> + Sync),
    battery: &[NCPolynomial],
    variables: usize,
) -> Result<Vec<ResidualRow>> {
    let mut out = Vec::new();
    for i in 0..variables {
        for p in battery {
            let estimate = candidate_residual(samples, u, candidate, p, i)?;
            out.push(ResidualRow { polynomial: p.to_string(), variable: i, pass: estimate.within(0.0, 3.0, 1e-12), estimate });
        }
    }
    Ok(out)
}

/// `{1, X_i, X_i^2, X_i^3}` for variable `i`.
pub fn monomial_battery(i: usize, degree: usize) -> Vec<NCPolynomial> {
    (0..=degree).map(|d| NCPolynomial::word(vec![crate::nc_poly::Letter::x(i); d])).collect()
}
