//! Path integrators on Hermitian tuples.
//!
//! Everything is in normalized coordinates: increments `S` satisfy
//! `E tau(S_l^2) = dt`, drifts are scaled gradients.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::matrix_core::{from_normalized_coords, normalized_coords, sample_normalized, tau_re_product, HermitianTuple, UnitaryTuple};
use crate::potentials::{gradient_potential, GradientScale, PotentialSpec};
use crate::rng::stream;
use crate::yosida::{prox_from, ConvexFn, SolverOptions};

/// Norm beyond which a path is declared exploded.
pub const EXPLOSION_NORM: f64 = 1e6;

/// A drift `b(t, history, x)` with regularity metadata.
pub trait DriftField: Sync {
    fn drift(&self, t: f64, history: &[HermitianTuple], x: &HermitianTuple) -> Result<HermitianTuple>;

    /// Slot times whose path values are passed back as history.
    fn slot_times(&self) -> &[f64] {
        &[]
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }

    fn monotone(&self) -> bool {
        false
    }
}

type DriftFn<'a> = Box<dyn Fn(f64, &[HermitianTuple], &HermitianTuple) -> Result<HermitianTuple> + Send + Sync + 'a>;

/// Drift given by a closure.
pub struct FnDrift<'a> {
    f: DriftFn<'a>,
    times: Vec<f64>,
    lipschitz: Option<f64>,
    monotone: bool,
}

impl<'a> FnDrift<'a> {
    pub fn new(f: impl Fn(f64, &[HermitianTuple], &HermitianTuple) -> Result<HermitianTuple> + Send + Sync + 'a) -> Self {
        Self { f: Box::new(f), times: Vec::new(), lipschitz: None, monotone: false }
    }

    /// `b = 0`.
    pub fn zero() -> FnDrift<'static> {
        FnDrift::new(|_, _, x| Ok(HermitianTuple::zeros(x.n(), x.m()))).with_lipschitz(0.0).with_monotone(true)
    }

    /// `b(x) = -a x`.
    pub fn linear(a: f64) -> FnDrift<'static> {
        FnDrift::new(move |_, _, x| Ok(x.scale(-a))).with_lipschitz(a.abs()).with_monotone(a >= 0.0)
    }

    pub fn with_slot_times(mut self, times: Vec<f64>) -> Self {
        self.times = times;
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn with_monotone(mut self, m: bool) -> Self {
        self.monotone = m;
        self
    }
}

impl DriftField for FnDrift<'_> {
    fn drift(&self, t: f64, history: &[HermitianTuple], x: &HermitianTuple) -> Result<HermitianTuple> {
        (self.f)(t, history, x)
    }

    fn slot_times(&self) -> &[f64] {
        &self.times
    }

    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    fn monotone(&self) -> bool {
        self.monotone
    }
}

/// Uniform grid `0 = s_0 < ... < s_M = horizon`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return invalid("grid needs at least two nodes");
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("grid must be strictly increasing");
    }
    Ok(())
}

/// Brownian increments on a grid.
#[derive(Clone, Debug)]
pub struct BrownianIncrements {
    pub grid: Vec<f64>,
    pub increments: Vec<HermitianTuple>,
}

impl BrownianIncrements {
    pub fn sample<R: Rng + ?Sized>(n: usize, m: usize, grid: &[f64], rng: &mut R) -> Result<Self> {
        check_grid(grid)?;
        let increments = grid.windows(2).map(|w| sample_normalized(n, m, w[1] - w[0], rng)).collect::<Result<_>>()?;
        Ok(Self { grid: grid.to_vec(), increments })
    }

    /// Every other node, with increments summed in pairs.
    pub fn coarsen(&self) -> Result<Self> {
        if self.increments.len() % 2 != 0 {
            return invalid("coarsening needs an even number of steps");
        }
        let grid = self.grid.iter().step_by(2).cloned().collect();
        let increments = self.increments.chunks(2).map(|p| p[0].add(&p[1])).collect();
        Ok(Self { grid, increments })
    }

    /// The Brownian path itself, started at `x0`.
    pub fn path(&self, x0: &HermitianTuple) -> Vec<HermitianTuple> {
        let mut out = Vec::with_capacity(self.grid.len());
        out.push(x0.clone());
        for inc in &self.increments {
            let next = out.last().unwrap().add(inc);
            out.push(next);
        }
        out
    }
}

/// Discretized controlled path.
#[derive(Clone, Debug)]
pub struct ControlledPath {
    pub grid: Vec<f64>,
    pub states: Vec<HermitianTuple>,
    pub drifts: Vec<HermitianTuple>,
    pub seed: u64,
}

/// Per-node moment summary of a path.
#[derive(Clone, Debug, Serialize)]
pub struct PathMoments {
    pub time: Vec<f64>,
    /// `tau(X_l^2)` per node, per variable.
    pub second: Vec<Vec<f64>>,
    pub drift_norm: Vec<f64>,
}

impl ControlledPath {
    pub fn endpoint(&self) -> &HermitianTuple {
        self.states.last().expect("paths have at least one node")
    }

    /// Linearly interpolated state at time `t` inside the grid.
    pub fn value_at(&self, t: f64) -> HermitianTuple {
        interpolate(&self.grid, &self.states, t)
    }

    /// This path restricted to the nodes of a coarser path on a nested grid.
    pub fn coarsened_like(&self, coarse: &ControlledPath) -> ControlledPath {
        let states = coarse.grid.iter().map(|&t| self.value_at(t)).collect();
        let drifts = coarse.grid.iter().map(|&t| interpolate(&self.grid, &self.drifts, t)).collect();
        ControlledPath { grid: coarse.grid.clone(), states, drifts, seed: self.seed }
    }

    /// `sup_k ||X_k - Y_k||_2^2` over common nodes.
    pub fn sup_distance2(&self, other: &ControlledPath) -> f64 {
        self.states.iter().zip(&other.states).map(|(a, b)| a.sub(b).norm2()).fold(0.0, f64::max)
    }

    pub fn moments(&self) -> PathMoments {
        PathMoments {
            time: self.grid.clone(),
            second: self.states.iter().map(|x| (0..x.m()).map(|l| x.moment(l, 2)).collect()).collect(),
            drift_norm: self.drifts.iter().map(|d| d.norm2().sqrt()).collect(),
        }
    }

    /// CSV rows `time,matrix,row,col,re,im`, keeping every `stride`-th node and the last one.
    pub fn write_csv<W: Write>(&self, mut w: W, stride: usize) -> std::io::Result<()> {
        writeln!(w, "time,matrix,row,col,re,im")?;
        let stride = stride.max(1);
        let last = self.states.len() - 1;
        for (k, (t, x)) in self.grid.iter().zip(&self.states).enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            for (l, a) in x.mats().iter().enumerate() {
                for r in 0..a.nrows() {
                    for c in 0..a.ncols() {
                        let z = a[(r, c)];
                        writeln!(w, "{t},{l},{r},{c},{},{}", z.re, z.im)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn interpolate(grid: &[f64], states: &[HermitianTuple], t: f64) -> HermitianTuple {
    let k = grid.partition_point(|&s| s <= t);
    if k == 0 {
        return states[0].clone();
    }
    if k >= grid.len() {
        return states[states.len() - 1].clone();
    }
    let (a, b) = (grid[k - 1], grid[k]);
    let w = (t - a) / (b - a);
    let mut out = states[k - 1].scale(1.0 - w);
    out.axpy(w, &states[k]);
    out
}

/// Slot values `X(t_j)` for slot times strictly before `now`, interpolated on the nodes so far.
fn history_at(times: &[f64], grid: &[f64], states: &[HermitianTuple], now: f64) -> Vec<HermitianTuple> {
    times.iter().take_while(|&&tj| tj < now).map(|&tj| interpolate(&grid[..states.len()], states, tj)).collect()
}

fn check_norm(t: f64, x: &HermitianTuple) -> Result<()> {
    let norm = x.norm2().sqrt();
    if !norm.is_finite() || norm > EXPLOSION_NORM {
        return Err(Error::Explosion { time: t, norm });
    }
    Ok(())
}

/// Euler-Maruyama with fresh increments drawn from `rng`.
pub fn euler_maruyama<R: Rng + ?Sized>(field: &dyn DriftField, x0: &HermitianTuple, grid: &[f64], rng: &mut R) -> Result<ControlledPath> {
    let noise = BrownianIncrements::sample(x0.n(), x0.m(), grid, rng)?;
    euler_maruyama_with(field, x0, &noise)
}

/// Euler-Maruyama driven by given increments: `X_{k+1} = X_k + dt b(s_k, X_k) + dS_k`.
pub fn euler_maruyama_with(field: &dyn DriftField, x0: &HermitianTuple, noise: &BrownianIncrements) -> Result<ControlledPath> {
    let grid = &noise.grid;
    check_grid(grid)?;
    if let Some(l) = field.lipschitz() {
        let max_step = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        if l.is_finite() && l > 0.0 && max_step > 1.0 / (4.0 * l) * (1.0 + 1e-12) {
            return invalid(format!("step {max_step} exceeds 1/(4 L) for Lipschitz estimate {l}"));
        }
    }
    let mut states = Vec::with_capacity(grid.len());
    let mut drifts = Vec::with_capacity(grid.len());
    states.push(x0.clone());
    for (k, inc) in noise.increments.iter().enumerate() {
        let s = grid[k];
        let dt = grid[k + 1] - s;
        let x = &states[k];
        let hist = history_at(field.slot_times(), grid, &states, s);
        let b = field.drift(s, &hist, x)?;
        let mut next = x.add(inc);
        next.axpy(dt, &b);
        check_norm(grid[k + 1], &next)?;
        drifts.push(b);
        states.push(next);
    }
    let last = grid[grid.len() - 1];
    let hist = history_at(field.slot_times(), grid, &states, last);
    drifts.push(field.drift(last, &hist, &states[states.len() - 1])?);
    Ok(ControlledPath { grid: grid.clone(), states, drifts, seed: 0 })
}

/// Euler scheme with drift `-A_lambda(x)`, the Yosida gradient of a convex function on normalized coordinates.
pub fn euler_yosida(g: &ConvexFn, lambda: f64, x0: &HermitianTuple, noise: &BrownianIncrements) -> Result<ControlledPath> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return invalid(format!("lambda must lie in (0, 1], got {lambda}"));
    }
    let grid = &noise.grid;
    check_grid(grid)?;
    let (n, m) = (x0.n(), x0.m());
    let opts = SolverOptions { tol: 1e-10, max_iter: 20_000 };
    let mut states = vec![x0.clone()];
    let mut drifts = Vec::with_capacity(grid.len());
    let mut warm = normalized_coords(std::slice::from_ref(x0));
    let mut drift_at = |x: &HermitianTuple| -> Result<HermitianTuple> {
        let v = normalized_coords(std::slice::from_ref(x));
        let j = prox_from(g, lambda, &v, &warm, opts)?.point;
        let a: Vec<f64> = v.iter().zip(&j).map(|(p, q)| -(p - q) / lambda).collect();
        warm = j;
        Ok(from_normalized_coords(&a, n, m, 1)?.remove(0))
    };
    for (k, inc) in noise.increments.iter().enumerate() {
        let dt = grid[k + 1] - grid[k];
        let b = drift_at(&states[k])?;
        let mut next = states[k].add(inc);
        next.axpy(dt, &b);
        check_norm(grid[k + 1], &next)?;
        drifts.push(b);
        states.push(next);
    }
    drifts.push(drift_at(&states[states.len() - 1])?);
    Ok(ControlledPath { grid: grid.clone(), states, drifts, seed: 0 })
}

/// Shared-noise comparison of two Yosida parameters.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct YosidaCauchy {
    pub lambda: f64,
    pub mu: f64,
    /// `sup_t ||X^lambda_t - X^mu_t||_2^2`.
    pub sup_distance2: f64,
    /// `sup_distance2 / (lambda + mu)`.
    pub constant: f64,
}

pub fn yosida_cauchy(g: &ConvexFn, lambda: f64, mu: f64, x0: &HermitianTuple, noise: &BrownianIncrements) -> Result<YosidaCauchy> {
    let a = euler_yosida(g, lambda, x0, noise)?;
    let b = euler_yosida(g, mu, x0, noise)?;
    let d = a.sup_distance2(&b);
    Ok(YosidaCauchy { lambda, mu, sup_distance2: d, constant: d / (lambda + mu) })
}

fn langevin_drift(spec: &PotentialSpec, u: &UnitaryTuple, x: &HermitianTuple) -> Result<HermitianTuple> {
    let g = gradient_potential(spec, std::slice::from_ref(x), u, GradientScale::Scaled)?;
    Ok(x.add(&g[0]).scale(-0.5))
}

fn check_langevin(spec: &PotentialSpec, burn_in: f64, dt: f64) -> Result<()> {
    spec.validate()?;
    if spec.slots() != 1 {
        return invalid("Langevin dynamics needs a one-slot potential");
    }
    if !spec.is_convex_mode() && !spec.components.is_empty() {
        return invalid("Langevin dynamics needs a convex-mode potential");
    }
    if !(burn_in > 0.0 && dt > 0.0) {
        return invalid("burn-in and step must be positive");
    }
    Ok(())
}

/// Final state of a Langevin run with its diagnostics.
#[derive(Clone, Debug)]
pub struct LangevinSample {
    pub state: HermitianTuple,
    pub steps: usize,
    /// `tau(X_l^2)` at the end, per variable.
    pub second_moments: Vec<f64>,
}

/// Integrates `dX = -1/2 (X + grad G(X)) dt + dS` from `x0` for time `burn_in`.
///
/// The invariant law has density proportional to `exp(-N^2 (tau(X^2)/2 + G))`.
pub fn langevin_stationary<R: Rng + ?Sized>(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    x0: &HermitianTuple,
    burn_in: f64,
    dt: f64,
    rng: &mut R,
) -> Result<LangevinSample> {
    check_langevin(spec, burn_in, dt)?;
    let steps = (burn_in / dt).ceil() as usize;
    let h = burn_in / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let b = langevin_drift(spec, u, &x)?;
        x.axpy(h, &b);
        x = x.add(&sample_normalized(x.n(), x.m(), h, rng)?);
        check_norm((k + 1) as f64 * h, &x)?;
    }
    let second_moments = (0..x.m()).map(|l| x.moment(l, 2)).collect();
    Ok(LangevinSample { state: x, steps, second_moments })
}

/// Independent Langevin samples started at zero, one stream per path.
pub fn langevin_ensemble(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    n: usize,
    burn_in: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<LangevinSample>> {
    let x0 = HermitianTuple::zeros(n, spec.m);
    (0..paths).into_par_iter().map(|p| langevin_stationary(spec, u, &x0, burn_in, dt, &mut stream(seed, &[p as u64]))).collect()
}

/// Distance between two Langevin paths driven by the same noise.
#[derive(Clone, Debug, Serialize)]
pub struct Coupling {
    pub time: Vec<f64>,
    pub distance2: Vec<f64>,
    /// `max_t ||X_t - Y_t||^2 / (e^{-t} ||X_0 - Y_0||^2)`.
    pub worst_ratio: f64,
}

pub fn langevin_coupling<R: Rng + ?Sized>(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    x0: &HermitianTuple,
    y0: &HermitianTuple,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Coupling> {
    check_langevin(spec, horizon, dt)?;
    let steps = (horizon / dt).ceil() as usize;
    let h = horizon / steps as f64;
    let (mut x, mut y) = (x0.clone(), y0.clone());
    let d0 = x.sub(&y).norm2();
    let mut time = vec![0.0];
    let mut distance2 = vec![d0];
    let mut worst: f64 = if d0 > 0.0 { 1.0 } else { 0.0 };
    for k in 0..steps {
        let s = sample_normalized(x.n(), x.m(), h, rng)?;
        let bx = langevin_drift(spec, u, &x)?;
        let by = langevin_drift(spec, u, &y)?;
        x.axpy(h, &bx);
        y.axpy(h, &by);
        x = x.add(&s);
        y = y.add(&s);
        let t = (k + 1) as f64 * h;
        check_norm(t, &x)?;
        check_norm(t, &y)?;
        let d = x.sub(&y).norm2();
        if d0 > 0.0 {
            worst = worst.max(d / (d0 * (-t).exp()));
        }
        time.push(t);
        distance2.push(d);
    }
    Ok(Coupling { time, distance2, worst_ratio: worst })
}

/// How the conditional expectation of the terminal gradient is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ConditionalEstimator {
    /// Least-squares fit on `paths` simulated paths against the basis
    /// `1, x_1, ..., x_m, x_l^2` for each output variable `l`.
    Regression { paths: usize },
    /// Nested sub-simulation; the budget starts at `samples` and is divided
    /// by four at each deeper level (at least one antithetic pair). The cost
    /// grows exponentially with the iteration count.
    Nested { samples: usize },
}

/// Settings for the forward-backward Picard iteration.
#[derive(Clone, Copy, Debug)]
pub struct PicardOptions {
    pub steps: usize,
    pub estimator: ConditionalEstimator,
    pub tol: f64,
    pub max_iter: usize,
    /// Lipschitz constant of the terminal gradient; estimated when absent.
    pub lipschitz: Option<f64>,
    pub seed: u64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { steps: 4, estimator: ConditionalEstimator::Regression { paths: 256 }, tol: 1e-6, max_iter: 20, lipschitz: None, seed: 0 }
    }
}

/// Convergence history of the Picard iteration.
#[derive(Clone, Debug, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    /// `sup_t ||Y^{(l)}_t - Y^{(l-1)}_t||_2` for `l = 1, 2, ...`.
    pub differences: Vec<f64>,
    /// Largest ratio of successive nonzero differences.
    pub ratio: f64,
    pub lipschitz: f64,
    pub converged: bool,
}

/// Regression coefficients indexed by node, output variable, basis element.
type Coefficients = Vec<Vec<Vec<f64>>>;

struct Picard<'a> {
    spec: &'a PotentialSpec,
    u: &'a UnitaryTuple,
    grid: Vec<f64>,
    opts: PicardOptions,
    n: usize,
}

impl Picard<'_> {
    fn terminal_gradient(&self, y: &HermitianTuple) -> Result<HermitianTuple> {
        Ok(gradient_potential(self.spec, std::slice::from_ref(y), self.u, GradientScale::Scaled)?.remove(0))
    }

    /// Increments keyed by `(depth, sample, step)`. Depth 0 drives the reported path;
    /// deeper samples come in antithetic pairs.
    fn noise(&self, depth: usize, sample: usize, step: usize) -> Result<HermitianTuple> {
        let dt = self.grid[step + 1] - self.grid[step];
        let mut r = stream(self.opts.seed, &[depth as u64, (sample / 2) as u64, step as u64]);
        let s = sample_normalized(self.n, self.spec.m, dt, &mut r)?;
        Ok(if depth > 0 && sample % 2 == 1 { s.scale(-1.0) } else { s })
    }

    fn basis(y: &HermitianTuple, l: usize) -> Vec<crate::matrix_core::CMat> {
        let n = y.n();
        let mut f = Vec::with_capacity(y.m() + 2);
        f.push(crate::matrix_core::CMat::identity(n, n));
        f.extend(y.mats().iter().cloned());
        f.push(y.mat(l) * y.mat(l));
        f
    }

    fn apply(coeffs: &[Vec<f64>], y: &HermitianTuple) -> HermitianTuple {
        let mats = (0..y.m())
            .map(|l| {
                let mut acc = crate::matrix_core::CMat::zeros(y.n(), y.n());
                for (b, f) in coeffs[l].iter().zip(Self::basis(y, l)) {
                    acc += f * num_complex::Complex64::new(*b, 0.0);
                }
                acc
            })
            .collect();
        HermitianTuple::from_hermitian_part(mats)
    }

    fn zero_coefficients(&self) -> Coefficients {
        vec![vec![vec![0.0; self.spec.m + 2]; self.spec.m]; self.opts.steps]
    }

    /// Fits the conditional terminal gradient of the dynamics driven by `prev`.
    fn regress(&self, prev: &Coefficients, paths: usize, x: &HermitianTuple) -> Result<Coefficients> {
        let steps = self.opts.steps;
        let sims: Vec<Result<(Vec<HermitianTuple>, HermitianTuple)>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut states = vec![x.clone()];
                for k in 0..steps {
                    let dt = self.grid[k + 1] - self.grid[k];
                    let mut next = states[k].add(&self.noise(1, p, k)?);
                    next.axpy(-dt, &Self::apply(&prev[k], &states[k]));
                    check_norm(self.grid[k + 1], &next)?;
                    states.push(next);
                }
                let target = self.terminal_gradient(&states[steps])?;
                Ok((states, target))
            })
            .collect();
        let sims: Vec<(Vec<HermitianTuple>, HermitianTuple)> = sims.into_iter().collect::<Result<_>>()?;
        let nb = self.spec.m + 2;
        let mut out = self.zero_coefficients();
        for (k, node) in out.iter_mut().enumerate() {
            for (l, beta) in node.iter_mut().enumerate() {
                let mut gram = DMatrix::<f64>::zeros(nb, nb);
                let mut rhs = DVector::<f64>::zeros(nb);
                for (states, target) in &sims {
                    let f = Self::basis(&states[k], l);
                    for a in 0..nb {
                        rhs[a] += tau_re_product(&f[a], target.mat(l));
                        for b in a..nb {
                            let v = tau_re_product(&f[a], &f[b]);
                            gram[(a, b)] += v;
                            if a != b {
                                gram[(b, a)] += v;
                            }
                        }
                    }
                }
                let svd = gram.svd(true, true);
                let eps = 1e-12 * svd.singular_values.max();
                let sol = svd.solve(&rhs, eps).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                *beta = sol.iter().cloned().collect();
            }
        }
        Ok(out)
    }

    fn follow(&self, coeffs: &Coefficients, x: &HermitianTuple) -> Result<ControlledPath> {
        let mut states = vec![x.clone()];
        let mut drifts = Vec::with_capacity(self.grid.len());
        for k in 0..self.opts.steps {
            let dt = self.grid[k + 1] - self.grid[k];
            let d = Self::apply(&coeffs[k], &states[k]).scale(-1.0);
            let mut next = states[k].add(&self.noise(0, 0, k)?);
            next.axpy(dt, &d);
            check_norm(self.grid[k + 1], &next)?;
            drifts.push(d);
            states.push(next);
        }
        drifts.push(self.terminal_gradient(&states[self.opts.steps])?.scale(-1.0));
        Ok(ControlledPath { grid: self.grid.clone(), states, drifts, seed: self.opts.seed })
    }

    /// Level-`level` nested estimate of `E[grad G(Y_T) | Y_{s_k} = y]`; level 0 is zero.
    fn conditional_gradient(&self, samples: usize, level: usize, depth: usize, k: usize, y: &HermitianTuple) -> Result<HermitianTuple> {
        let m = self.spec.m;
        if level == 0 {
            return Ok(HermitianTuple::zeros(self.n, m));
        }
        let budget = ((samples >> (2 * (depth - 1)).min(63)) & !1).max(2);
        let mut acc = HermitianTuple::zeros(self.n, m);
        for sample in 0..budget {
            let mut z = y.clone();
            for j in k..self.opts.steps {
                let dt = self.grid[j + 1] - self.grid[j];
                let d = self.conditional_gradient(samples, level - 1, depth + 1, j, &z)?;
                z.axpy(-dt, &d);
                z = z.add(&self.noise(depth, sample, j)?);
            }
            acc.axpy(1.0, &self.terminal_gradient(&z)?);
        }
        Ok(acc.scale(1.0 / budget as f64))
    }

    fn iterate_nested(&self, samples: usize, level: usize, x: &HermitianTuple) -> Result<ControlledPath> {
        let mut states = vec![x.clone()];
        let mut drifts = Vec::with_capacity(self.grid.len());
        for k in 0..self.opts.steps {
            let dt = self.grid[k + 1] - self.grid[k];
            let d = self.conditional_gradient(samples, level, 1, k, &states[k])?.scale(-1.0);
            let mut next = states[k].add(&self.noise(0, 0, k)?);
            next.axpy(dt, &d);
            check_norm(self.grid[k + 1], &next)?;
            drifts.push(d);
            states.push(next);
        }
        drifts.push(self.terminal_gradient(&states[self.opts.steps])?.scale(-1.0));
        Ok(ControlledPath { grid: self.grid.clone(), states, drifts, seed: self.opts.seed })
    }

    fn estimate_lipschitz(&self, x: &HermitianTuple) -> Result<f64> {
        let mut rng = stream(self.opts.seed, &[u64::MAX]);
        let mut best: f64 = 0.0;
        for _ in 0..16 {
            let a = x.add(&sample_normalized(self.n, self.spec.m, 1.0, &mut rng)?);
            let b = a.add(&sample_normalized(self.n, self.spec.m, 0.01, &mut rng)?);
            let ga = self.terminal_gradient(&a)?;
            let gb = self.terminal_gradient(&b)?;
            best = best.max((ga.sub(&gb).norm2() / a.sub(&b).norm2()).sqrt());
        }
        Ok(best)
    }
}

/// Picard iteration for the optimally controlled path `dY = -E[grad G(Y_T) | Y_t] dt + dS` on `[0, horizon]`.
///
/// Iterate `l` is driven by the conditional terminal gradient of iterate
/// `l - 1`. Noise is keyed by depth, sample and step and reused across
/// iterations, so successive iterates differ only through the drift.
pub fn picard_fbsde(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    x: &HermitianTuple,
    horizon: f64,
    opts: PicardOptions,
) -> Result<(ControlledPath, PicardReport)> {
    spec.validate()?;
    if spec.slots() != 1 {
        return invalid("Picard iteration needs a one-slot potential");
    }
    let budget = match opts.estimator {
        ConditionalEstimator::Regression { paths } => paths,
        ConditionalEstimator::Nested { samples } => samples,
    };
    if !(horizon > 0.0) || opts.steps == 0 || budget == 0 {
        return invalid("horizon, steps and sample budget must be positive");
    }
    let pic = Picard { spec, u, grid: uniform_grid(horizon, opts.steps), opts, n: x.n() };
    let lip = match opts.lipschitz {
        Some(l) => l,
        None => pic.estimate_lipschitz(x)?,
    };
    let contraction = lip.max(1.0) * horizon;
    if contraction >= 1.0 {
        return Err(Error::NonContraction { ratio: contraction });
    }
    let mut coeffs = pic.zero_coefficients();
    let mut prev = pic.follow(&coeffs, x)?;
    let mut differences = Vec::new();
    let mut ratio: f64 = 0.0;
    for level in 1..=opts.max_iter {
        let next = match opts.estimator {
            ConditionalEstimator::Regression { paths } => {
                coeffs = pic.regress(&coeffs, paths, x)?;
                pic.follow(&coeffs, x)?
            }
            ConditionalEstimator::Nested { samples } => pic.iterate_nested(samples, level, x)?,
        };
        let diff = next.sup_distance2(&prev).sqrt();
        if let Some(&last) = differences.last() {
            if last > 0.0 && diff > 0.0 {
                let r: f64 = diff / last;
                ratio = ratio.max(r);
                if r >= 1.0 {
                    return Err(Error::NonContraction { ratio: r });
                }
            }
        }
        differences.push(diff);
        prev = next;
        if diff < opts.tol {
            let report = PicardReport { iterations: level, differences, ratio, lipschitz: lip, converged: true };
            return Ok((prev, report));
        }
    }
    let report = PicardReport { iterations: opts.max_iter, differences, ratio, lipschitz: lip, converged: false };
    Ok((prev, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_tuple(n: usize) -> HermitianTuple {
        HermitianTuple::zeros(n, 1)
    }

    #[test]
    fn zero_drift_reproduces_brownian_path() {
        let grid = uniform_grid(1.0, 16);
        let noise = BrownianIncrements::sample(3, 1, &grid, &mut stream(1, &[])).unwrap();
        let p = euler_maruyama_with(&FnDrift::zero(), &zero_tuple(3), &noise).unwrap();
        for (a, b) in p.states.iter().zip(noise.path(&zero_tuple(3))) {
            assert!(a.sub(&b).norm2() == 0.0);
        }
        assert_eq!(p.drifts.len(), p.states.len());
    }

    #[test]
    fn ornstein_uhlenbeck_variance() {
        // dX = -X dt + dS from 0: E tau(X_t^2) = (1 - e^{-2t}) / 2.
        let n = 8;
        let grid = uniform_grid(1.0, 200);
        let field = FnDrift::linear(1.0);
        let vals: Vec<f64> = (0..400)
            .into_par_iter()
            .map(|p| euler_maruyama(&field, &zero_tuple(n), &grid, &mut stream(3, &[p])).unwrap().endpoint().moment(0, 2))
            .collect();
        let est = crate::stats::ValueEstimate::from_samples(&vals);
        let exact = 0.5 * (1.0 - (-2.0f64).exp());
        // Euler bias is O(dt), well under the Monte Carlo error here.
        assert!(est.within(exact, 3.0, 2e-3), "{est:?} vs {exact}");
    }

    #[test]
    fn strong_order_one_for_additive_noise() {
        let n = 2;
        let fine = uniform_grid(1.0, 1 << 12);
        let field = FnDrift::linear(1.0);
        let mut errs = vec![0.0; 3];
        for p in 0..20u64 {
            let noise = BrownianIncrements::sample(n, 1, &fine, &mut stream(5, &[p])).unwrap();
            let reference = euler_maruyama_with(&field, &zero_tuple(n), &noise).unwrap();
            let mut coarse = noise.clone();
            for _ in 0..6 {
                coarse = coarse.coarsen().unwrap();
            }
            for e in errs.iter_mut() {
                let path = euler_maruyama_with(&field, &zero_tuple(n), &coarse).unwrap();
                *e += path.endpoint().sub(reference.endpoint()).norm2().sqrt();
                coarse = coarse.coarsen().unwrap();
            }
        }
        // Steps 64, 32, 16: error roughly doubles with each coarsening.
        for w in errs.windows(2) {
            let r = w[1] / w[0];
            assert!(r > 1.6 && r < 2.5, "{errs:?}");
        }
    }

    #[test]
    fn explosion_is_reported() {
        let grid = uniform_grid(1.0, 10);
        let field = FnDrift::new(|_, _, x| Ok(x.scale(1e4)));
        let x0 = HermitianTuple::identity(2, 1);
        assert!(matches!(euler_maruyama(&field, &x0, &grid, &mut stream(0, &[])), Err(Error::Explosion { .. })));
    }

    #[test]
    fn step_bound_enforced() {
        let grid = uniform_grid(1.0, 2);
        let field = FnDrift::linear(1.0);
        assert!(euler_maruyama(&field, &zero_tuple(2), &grid, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn history_is_interpolated() {
        let grid = uniform_grid(1.0, 4);
        let seen = std::sync::Mutex::new(Vec::new());
        let field = FnDrift::new(|t, h: &[HermitianTuple], x: &HermitianTuple| {
            seen.lock().unwrap().push((t, h.len()));
            Ok(HermitianTuple::zeros(x.n(), x.m()))
        })
        .with_slot_times(vec![0.3, 1.0]);
        euler_maruyama(&field, &zero_tuple(2), &grid, &mut stream(0, &[])).unwrap();
        drop(field);
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen, vec![(0.0, 0), (0.25, 0), (0.5, 1), (0.75, 1), (1.0, 1)]);
    }

    #[test]
    fn fourth_moment_bound_holds_for_ou() {
        // Coercivity constant K = 0 for b = -x, dimension d = m = 1.
        let n = 4;
        let grid = uniform_grid(1.0, 64);
        let field = FnDrift::linear(1.0);
        let x0 = HermitianTuple::identity(n, 1);
        let paths: Vec<ControlledPath> =
            (0..200u64).into_par_iter().map(|p| euler_maruyama(&field, &x0, &grid, &mut stream(7, &[p])).unwrap()).collect();
        for (k, &t) in grid.iter().enumerate() {
            let m4: f64 = paths.iter().map(|p| p.states[k].norm2().powi(2)).sum::<f64>() / paths.len() as f64;
            assert!(m4 <= (1.0 + 1.0) * t.exp());
        }
    }

    #[test]
    fn yosida_path_approaches_gradient_path() {
        let n = 2;
        let grid = uniform_grid(1.0, 32);
        let noise = BrownianIncrements::sample(n, 1, &grid, &mut stream(2, &[])).unwrap();
        let c = 0.5;
        let g = ConvexFn::new(move |v: &[f64]| c * v.iter().map(|a| a * a).sum::<f64>())
            .with_gradient(move |v: &[f64]| v.iter().map(|a| 2.0 * c * a).collect());
        let x0 = HermitianTuple::identity(n, 1);
        let exact = euler_maruyama_with(&FnDrift::linear(2.0 * c), &x0, &noise).unwrap();
        let mut prev = f64::INFINITY;
        for lambda in [0.2, 0.05, 0.01] {
            let p = euler_yosida(&g, lambda, &x0, &noise).unwrap();
            let d = p.sup_distance2(&exact);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-4);
        let cauchy = yosida_cauchy(&g, 0.1, 0.05, &x0, &noise).unwrap();
        assert!(cauchy.constant.is_finite() && cauchy.constant < 10.0);
    }

    #[test]
    fn yosida_absolute_value_self_convergence() {
        let grid = uniform_grid(1.0, 1 << 9);
        let g = ConvexFn::l1();
        let x0 = HermitianTuple::identity(1, 1).scale(0.5);
        let mut errs = vec![0.0; 3];
        for p in 0..10u64 {
            let noise = BrownianIncrements::sample(1, 1, &grid, &mut stream(4, &[p])).unwrap();
            let reference = euler_yosida(&g, 0.1, &x0, &noise).unwrap();
            let mut coarse = noise.coarsen().unwrap();
            for e in errs.iter_mut() {
                let path = euler_yosida(&g, 0.1, &x0, &coarse).unwrap();
                *e += path.sup_distance2(&reference.coarsened_like(&path)).sqrt() / 10.0;
                coarse = coarse.coarsen().unwrap();
            }
        }
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
        assert!(errs[0] < 0.02, "{errs:?}");
    }

    #[test]
    fn langevin_coupling_contracts() {
        let spec = PotentialSpec::quadratic(0.5, 1);
        let u = UnitaryTuple::empty(4);
        let mut r = stream(1, &[]);
        let x = sample_normalized(4, 1, 4.0, &mut r).unwrap();
        let y = sample_normalized(4, 1, 4.0, &mut r).unwrap();
        let c = langevin_coupling(&spec, &u, &x, &y, 3.0, 0.01, &mut r).unwrap();
        assert!(c.worst_ratio <= 1.0 + 1e-12, "{}", c.worst_ratio);
    }

    #[test]
    fn langevin_stationary_variance() {
        let u = UnitaryTuple::empty(8);
        for (c, target) in [(0.0, 1.0), (0.5, 0.5)] {
            let spec = if c == 0.0 { PotentialSpec::zero(vec![1.0], 1) } else { PotentialSpec::quadratic(c, 1) };
            let s = langevin_ensemble(&spec, &u, 8, 8.0, 0.02, 200, 11).unwrap();
            let vals: Vec<f64> = s.iter().map(|s| s.second_moments[0]).collect();
            let est = crate::stats::ValueEstimate::from_samples(&vals);
            // Euler bias on the variance is about dt/4 relative.
            assert!(est.within(target, 3.0, 0.01 * target), "{c}: {est:?}");
        }
    }

    #[test]
    fn picard_zero_gradient_converges_immediately() {
        let spec = PotentialSpec::zero(vec![0.5], 1);
        let u = UnitaryTuple::empty(3);
        let (p, rep) = picard_fbsde(&spec, &u, &zero_tuple(3), 0.5, PicardOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.differences, vec![0.0]);
        assert!(rep.converged);
        assert_eq!(p.states.len(), 5);
    }

    fn euler_fixed_point(c: f64, t_end: f64, steps: usize) -> f64 {
        // Linear drift -a_k y: a_k = 2c P_{k+1} / (1 + 2c dt P_{k+1}) with P_k = prod_{j >= k} (1 - dt a_j).
        let dt = t_end / steps as f64;
        let mut tail = 1.0;
        let mut a = 0.0;
        for _ in 0..steps {
            a = 2.0 * c * tail / (1.0 + 2.0 * c * dt * tail);
            tail *= 1.0 - dt * a;
        }
        a
    }

    #[test]
    fn picard_quadratic_fixed_point() {
        let (c, t_end, steps) = (0.5, 0.5, 4);
        let spec = PotentialSpec::quadratic_at(c, 1, vec![t_end]);
        let u = UnitaryTuple::empty(3);
        let x = HermitianTuple::identity(3, 1);
        let opts = PicardOptions { steps, lipschitz: Some(2.0 * c), seed: 3, ..Default::default() };
        let (p, rep) = picard_fbsde(&spec, &u, &x, t_end, opts).unwrap();
        assert!(rep.converged && rep.ratio < 1.0 && rep.differences.len() >= 2, "{rep:?}");
        let a0 = euler_fixed_point(c, t_end, steps);
        let err = p.drifts[0].sub(&x.scale(-a0)).norm2().sqrt() / a0;
        assert!(err < 0.02, "{err}");
        let continuum = 2.0 * c / (1.0 + 2.0 * c * t_end);
        assert!((a0 - continuum).abs() < 0.1 * continuum);
    }

    #[test]
    fn picard_nested_estimator_is_exact_on_linear_dynamics() {
        // Antithetic pairs make nested conditional means exact for linear dynamics.
        let (c, t_end, steps) = (0.5, 0.5, 3);
        let spec = PotentialSpec::quadratic_at(c, 1, vec![t_end]);
        let u = UnitaryTuple::empty(2);
        let x = HermitianTuple::identity(2, 1);
        let opts = PicardOptions {
            steps,
            estimator: ConditionalEstimator::Nested { samples: 2 },
            tol: 1e-12,
            max_iter: 5,
            lipschitz: Some(2.0 * c),
            seed: 1,
        };
        let (p, rep) = picard_fbsde(&spec, &u, &x, t_end, opts).unwrap();
        let d = &rep.differences;
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
        let a0 = euler_fixed_point(c, t_end, steps);
        let err = p.drifts[0].sub(&x.scale(-a0)).norm2().sqrt();
        assert!(err < 2.0 * d[d.len() - 1] + 1e-10, "{err} {d:?}");
    }

    #[test]
    fn picard_rejects_long_horizon() {
        let spec = PotentialSpec::quadratic_at(1.0, 1, vec![1.0]);
        let u = UnitaryTuple::empty(2);
        let r = picard_fbsde(&spec, &u, &zero_tuple(2), 1.0, PicardOptions { lipschitz: Some(2.0), ..Default::default() });
        assert!(matches!(r, Err(Error::NonContraction { .. })));
    }

    #[test]
    fn csv_dump_has_expected_rows() {
        let grid = uniform_grid(1.0, 4);
        let p = euler_maruyama(&FnDrift::zero(), &zero_tuple(2), &grid, &mut stream(0, &[])).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Nodes 0, 2, 4; four entries each.
        assert_eq!(text.lines().count(), 1 + 3 * 4);
        assert!(text.starts_with("time,matrix,row,col,re,im\n"));
    }
}
