//! Both sides of the finite-N variational identity
//! `-(1/N^2) log E[exp(-N^2 G(W))] = E[G(X) + 1/2 int ||b||^2 dt]`,
//! where `X` is Brownian motion driven by the optimal drift `b`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gibbs::gaussian_path;
use crate::matrix_core::{sample_normalized, HermitianTuple, UnitaryTuple};
use crate::potentials::{eval_potential, PotentialSpec};
use crate::rng::stream;
use crate::sde::{euler_maruyama_with, BrownianIncrements, ControlledPath, DriftField};
use crate::stats::{linear_fit, log_mean_exp, mean_var, ValueEstimate};
use crate::value_function::{value_h_detailed, Curvature, OptimalDrift, Proposal, ValueQuery, WeightLimits};

/// Log-weight spread (nats) above which the direct average is reported as unreliable.
pub const DIRECT_SPREAD_LIMIT: f64 = 30.0;

/// How the left-hand side is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LhsMethod {
    /// Plain Brownian paths at the slot times.
    Direct,
    /// Importance sampling from the Laplace-fitted bridge.
    Tilted,
    /// Direct when a pilot run keeps enough effective samples, tilted otherwise.
    Auto,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LhsOptions {
    pub samples: usize,
    pub seed: u64,
    pub method: LhsMethod,
    /// Pilot size for [`LhsMethod::Auto`].
    pub pilot: usize,
    /// Smallest pilot effective-sample fraction that keeps the direct route.
    pub min_ess_fraction: f64,
}

impl Default for LhsOptions {
    fn default() -> Self {
        Self { samples: 10_000, seed: 0, method: LhsMethod::Auto, pilot: 2000, min_ess_fraction: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LhsDetail {
    pub estimate: ValueEstimate,
    /// Method actually used.
    pub method: LhsMethod,
    pub ess: f64,
    /// Range of `N^2 G` over the direct samples, when they were drawn.
    pub log_weight_spread: Option<f64>,
}

struct DirectRun {
    estimate: ValueEstimate,
    ess: f64,
    spread: f64,
}

fn direct_run(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, samples: usize, seed: u64, key: u64) -> Result<DirectRun> {
    let nn = (n * n) as f64;
    let lw: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let x = gaussian_path(&spec.times, n, spec.m, &mut stream(seed, &[key, k as u64]))?;
            Ok(-nn * eval_potential(spec, &x, u)?)
        })
        .collect::<Result<_>>()?;
    let r = log_mean_exp(&lw);
    Ok(DirectRun { estimate: ValueEstimate { value: 0.0 - r.log_mean / nn, stderr: r.stderr / nn, samples }, ess: r.ess, spread: r.spread })
}

fn degenerate(ess: f64, spread: f64) -> Error {
    Error::Degenerate {
        ess,
        spread,
        advice: "the direct average is dominated by a few paths; use the control-cost side or the tilted method".into(),
    }
}

/// `-(1/N^2) log E[exp(-N^2 G)]` over Hermitian Brownian motion at the slot times.
pub fn lhs_log_laplace(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, opts: &LhsOptions) -> Result<LhsDetail> {
    spec.validate()?;
    if n == 0 || opts.samples < 2 {
        return invalid("need a positive matrix size and at least two samples");
    }
    let direct = |samples: usize, key: u64| -> Result<LhsDetail> {
        let r = direct_run(spec, u, n, samples, opts.seed, key)?;
        if r.ess < 2.0f64.min(samples as f64) || r.spread > WeightLimits::default().spread_cap {
            return Err(degenerate(r.ess, r.spread));
        }
        Ok(LhsDetail { estimate: r.estimate, method: LhsMethod::Direct, ess: r.ess, log_weight_spread: Some(r.spread) })
    };
    match opts.method {
        LhsMethod::Direct => direct(opts.samples, 0),
        LhsMethod::Tilted => tilted(spec, u, n, opts, None),
        LhsMethod::Auto => {
            let pilot = direct_run(spec, u, n, opts.pilot.max(2).min(opts.samples), opts.seed, 1)?;
            let frac = pilot.ess / pilot.estimate.samples as f64;
            if frac >= opts.min_ess_fraction && pilot.spread <= DIRECT_SPREAD_LIMIT {
                direct(opts.samples, 0)
            } else {
                tilted(spec, u, n, opts, Some(pilot.spread))
            }
        }
    }
}

fn tilted(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, opts: &LhsOptions, spread: Option<f64>) -> Result<LhsDetail> {
    let q = ValueQuery::new(spec, 0.0, vec![], HermitianTuple::zeros(n, spec.m))
        .unitaries(u.clone())
        .samples(opts.samples)
        .seed(opts.seed, 2)
        .proposal(Proposal::Laplace);
    let d = value_h_detailed(&q)?;
    Ok(LhsDetail { estimate: d.estimate, method: LhsMethod::Tilted, ess: d.ess, log_weight_spread: spread })
}

/// Rule for `int ||b||^2 dt` on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    Trapezoid,
    LeftPoint,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RhsOptions {
    pub paths: usize,
    /// Euler steps over `[0, t_last]`, rounded to even counts per slot interval.
    pub steps: usize,
    /// Draws per drift evaluation.
    pub drift_samples: usize,
    pub quadrature: Quadrature,
    /// Combine `M` and `M/2` step runs on shared noise to cancel the leading Euler bias.
    pub richardson: bool,
    /// Add the mean-zero stochastic integral `sum <b_k, dS_k>`, which cancels most path noise near the optimal drift.
    pub martingale_control: bool,
    /// Curvature model of the drift estimator's proposal.
    pub curvature: Curvature,
    pub seed: u64,
}

impl Default for RhsOptions {
    fn default() -> Self {
        Self {
            paths: 64,
            steps: 16,
            drift_samples: 64,
            quadrature: Quadrature::Trapezoid,
            richardson: true,
            martingale_control: true,
            curvature: Curvature::Auto,
            seed: 0,
        }
    }
}

/// Control-cost estimate and its two terms.
#[derive(Clone, Debug, Serialize)]
pub struct RhsResult {
    pub estimate: ValueEstimate,
    /// `E[G(X)]`.
    pub potential: ValueEstimate,
    /// `E[1/2 int ||b||^2 dt]`.
    pub control: ValueEstimate,
    pub steps: usize,
    pub paths: usize,
}

/// Grid on `[0, t_last]` containing every slot time, with an even number of steps in each slot interval.
pub fn slot_grid(times: &[f64], steps: usize) -> Result<Vec<f64>> {
    let last = match times.last() {
        Some(&t) => t,
        None => return invalid("no slots"),
    };
    let mut grid = vec![0.0];
    let mut prev = 0.0;
    for &t in times {
        let share = ((t - prev) / last * steps as f64 / 2.0).round().max(1.0) as usize * 2;
        for k in 1..=share {
            grid.push(prev + (t - prev) * k as f64 / share as f64);
        }
        prev = t;
    }
    Ok(grid)
}

/// Cost terms of one discretized controlled path.
#[derive(Clone, Debug)]
pub struct PathCost {
    pub potential: f64,
    pub control: f64,
    /// `sum_k <b_k, dS_k>`.
    pub martingale: f64,
    pub slots: Vec<HermitianTuple>,
}

fn path_cost(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    path: &ControlledPath,
    noise: &BrownianIncrements,
    quad: Quadrature,
) -> Result<PathCost> {
    let slots: Vec<HermitianTuple> = spec.times.iter().map(|&t| path.value_at(t)).collect();
    let potential = eval_potential(spec, &slots, u)?;
    let mut control = 0.0;
    let mut martingale = 0.0;
    for (k, inc) in noise.increments.iter().enumerate() {
        let dt = path.grid[k + 1] - path.grid[k];
        let a = path.drifts[k].norm2();
        control += match quad {
            Quadrature::LeftPoint => a * dt,
            Quadrature::Trapezoid => 0.5 * (a + path.drifts[k + 1].norm2()) * dt,
        };
        martingale += path.drifts[k].inner(inc);
    }
    Ok(PathCost { potential, control: 0.5 * control, martingale, slots })
}

/// Fine-grid cost and, under Richardson, the shared-noise half-resolution cost.
#[derive(Clone, Debug)]
pub struct PathPair {
    pub fine: PathCost,
    pub coarse: Option<PathCost>,
}

impl PathPair {
    /// `2 f(fine) - f(coarse)` when a coarse run exists.
    pub fn combine(&self, f: impl Fn(&PathCost) -> f64) -> f64 {
        match &self.coarse {
            Some(c) => 2.0 * f(&self.fine) - f(c),
            None => f(&self.fine),
        }
    }
}

/// Simulates `paths` controlled paths from zero under `field`.
pub fn simulate_costs(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    field: &dyn DriftField,
    n: usize,
    opts: &RhsOptions,
) -> Result<Vec<PathPair>> {
    spec.validate()?;
    if opts.paths < 2 || opts.steps < 2 {
        return invalid("need at least two paths and two steps");
    }
    let grid = slot_grid(&spec.times, opts.steps)?;
    let x0 = HermitianTuple::zeros(n, spec.m);
    (0..opts.paths)
        .into_par_iter()
        .map(|p| {
            let noise = BrownianIncrements::sample(n, spec.m, &grid, &mut stream(opts.seed, &[0x5DE, p as u64]))?;
            let fine = path_cost(spec, u, &euler_maruyama_with(field, &x0, &noise)?, &noise, opts.quadrature)?;
            let coarse = if opts.richardson {
                let cn = noise.coarsen()?;
                Some(path_cost(spec, u, &euler_maruyama_with(field, &x0, &cn)?, &cn, opts.quadrature)?)
            } else {
                None
            };
            Ok(PathPair { fine, coarse })
        })
        .collect()
}

/// Summarizes simulated paths into the control-cost estimate.
pub fn summarize_costs(pairs: &[PathPair], opts: &RhsOptions) -> RhsResult {
    let mc = opts.martingale_control;
    let total: Vec<f64> = pairs.iter().map(|p| p.combine(|c| c.potential + c.control + if mc { c.martingale } else { 0.0 })).collect();
    let pot: Vec<f64> = pairs.iter().map(|p| p.combine(|c| c.potential)).collect();
    let ctl: Vec<f64> = pairs.iter().map(|p| p.combine(|c| c.control)).collect();
    RhsResult {
        estimate: ValueEstimate::from_samples(&total),
        potential: ValueEstimate::from_samples(&pot),
        control: ValueEstimate::from_samples(&ctl),
        steps: opts.steps,
        paths: pairs.len(),
    }
}

/// `E[G(X) + 1/2 int ||b||^2 dt]` along the optimally controlled path, with the drift from the value function.
pub fn rhs_control_cost(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, opts: &RhsOptions) -> Result<RhsResult> {
    let mut field = OptimalDrift::new(spec, n, opts.drift_samples, opts.seed ^ 0xD81F7);
    field.curvature = opts.curvature;
    field.unitaries = u.clone();
    let pairs = simulate_costs(spec, u, &field, n, opts)?;
    Ok(summarize_costs(&pairs, opts))
}

/// Closed-form `E[1/2 int ||b||^2 dt]` for `G = c sum_l tau(X_l(1)^2)`.
pub fn quadratic_control_cost(c: f64, m: usize) -> f64 {
    let m = m as f64;
    0.5 * m * (1.0 + 2.0 * c).ln() - c * m / (1.0 + 2.0 * c)
}

/// Closed-form `E[G(X_1)]` for `G = c sum_l tau(X_l(1)^2)` under the optimal drift.
pub fn quadratic_potential_term(c: f64, m: usize) -> f64 {
    c * m as f64 / (1.0 + 2.0 * c)
}

/// A drift plus `eps (H cos(pi t) + sin(pi t) x / 2)` for a fixed random Hermitian `H`.
pub struct PerturbedDrift<'a> {
    pub base: &'a dyn DriftField,
    pub eps: f64,
    pub direction: HermitianTuple,
}

impl<'a> PerturbedDrift<'a> {
    pub fn new(base: &'a dyn DriftField, eps: f64, n: usize, m: usize, seed: u64) -> Result<Self> {
        let direction = sample_normalized(n, m, 1.0, &mut stream(seed, &[0xBE7]))?;
        Ok(Self { base, eps, direction })
    }
}

impl DriftField for PerturbedDrift<'_> {
    fn drift(&self, t: f64, history: &[HermitianTuple], x: &HermitianTuple) -> Result<HermitianTuple> {
        let mut b = self.base.drift(t, history, x)?;
        b.axpy(self.eps * (PI * t).cos(), &self.direction);
        b.axpy(0.5 * self.eps * (PI * t).sin(), x);
        Ok(b)
    }

    fn slot_times(&self) -> &[f64] {
        self.base.slot_times()
    }
}

/// Optimal against perturbed control cost on shared noise.
#[derive(Clone, Debug, Serialize)]
pub struct SuboptimalityCheck {
    pub eps: f64,
    pub optimal: ValueEstimate,
    pub perturbed: ValueEstimate,
    /// Paired `perturbed - optimal`.
    pub excess: ValueEstimate,
    /// `excess > 3 stderr`.
    pub pass: bool,
}

pub fn suboptimality_check(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, eps: f64, opts: &RhsOptions) -> Result<SuboptimalityCheck> {
    let mut field = OptimalDrift::new(spec, n, opts.drift_samples, opts.seed ^ 0xD81F7);
    field.curvature = opts.curvature;
    field.unitaries = u.clone();
    let pert = PerturbedDrift::new(&field, eps, n, spec.m, opts.seed)?;
    let a = simulate_costs(spec, u, &field, n, opts)?;
    let b = simulate_costs(spec, u, &pert, n, opts)?;
    let (ra, rb) = (summarize_costs(&a, opts), summarize_costs(&b, opts));
    let mc = opts.martingale_control;
    let cost = |c: &PathCost| c.potential + c.control + if mc { c.martingale } else { 0.0 };
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y.combine(cost) - x.combine(cost)).collect();
    let excess = ValueEstimate::from_samples(&diff);
    Ok(SuboptimalityCheck { eps, optimal: ra.estimate, perturbed: rb.estimate, pass: excess.value > 3.0 * excess.stderr, excess })
}

/// `tau(X_l(t_j)^p)` over the controlled path's slot values.
#[derive(Clone, Debug, Serialize)]
pub struct SlotMoment {
    pub slot: usize,
    pub variable: usize,
    pub power: u32,
    pub estimate: ValueEstimate,
}

/// Slot moments of the controlled path, Richardson-combined when available.
pub fn controlled_slot_moments(pairs: &[PathPair], powers: &[u32]) -> Vec<SlotMoment> {
    let Some(first) = pairs.first() else { return Vec::new() };
    let slots = first.fine.slots.len();
    let m = first.fine.slots.first().map(|s| s.m()).unwrap_or(0);
    let mut out = Vec::new();
    for j in 0..slots {
        for l in 0..m {
            for &p in powers {
                let vals: Vec<f64> = pairs.iter().map(|pp| pp.combine(|c| c.slots[j].moment(l, p))).collect();
                out.push(SlotMoment { slot: j, variable: l, power: p, estimate: ValueEstimate::from_samples(&vals) });
            }
        }
    }
    out
}

/// Raw control cost (no Richardson) at several resolutions.
#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub steps: usize,
    pub estimate: ValueEstimate,
}

pub fn grid_study(spec: &PotentialSpec, u: &UnitaryTuple, n: usize, opts: &RhsOptions, steps: &[usize]) -> Result<Vec<GridRow>> {
    steps
        .iter()
        .map(|&s| {
            let o = RhsOptions { steps: s, richardson: false, ..*opts };
            Ok(GridRow { steps: s, estimate: rhs_control_cost(spec, u, n, &o)?.estimate })
        })
        .collect()
}

/// Whether the direct average is usable at this size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `N^2 spread(G)` at most [`DIRECT_SPREAD_LIMIT`] nats.
    Direct,
    /// Beyond it the identity is carried by the control side.
    ControlOnly,
}

#[derive(Clone, Debug, Serialize)]
pub struct LaplaceRow {
    pub n: usize,
    pub lhs: ValueEstimate,
    pub lhs_method: LhsMethod,
    pub rhs: ValueEstimate,
    pub gap: f64,
    pub combined_stderr: f64,
    /// `|gap| <= 3 combined stderr` (plus a `1e-9` floor for exact estimators).
    pub pass: bool,
    pub regime: Regime,
    pub log_weight_spread: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LaplaceReport {
    pub rows: Vec<LaplaceRow>,
    /// `a + b / N^2` fit to the control side, evaluated at `N = infinity`.
    pub extrapolated: Option<ValueEstimate>,
    /// Consecutive left-hand values agree within three combined standard errors.
    pub lhs_cauchy: bool,
    /// Indices `k` where `lhs(N_{k+1}) - lhs(N_k)` changes sign beyond error bars relative to the previous step.
    pub non_monotone: Vec<usize>,
    pub config: serde_json::Value,
}

impl LaplaceReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Columns `N,lhs,lhs_err,rhs,rhs_err,gap`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "N,lhs,lhs_err,rhs,rhs_err,gap")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.n, r.lhs.value, r.lhs.stderr, r.rhs.value, r.rhs.stderr, r.gap)?;
        }
        Ok(())
    }
}

/// Budgets for [`n_convergence`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConvergenceOptions {
    pub lhs: LhsOptions,
    pub rhs: RhsOptions,
}

/// Both sides for each `N`, with trend diagnostics.
pub fn n_convergence(spec: &PotentialSpec, ns: &[usize], opts: &ConvergenceOptions) -> Result<LaplaceReport> {
    n_convergence_with(spec, ns, opts, |n| Ok(UnitaryTuple::empty(n)))
}

/// [`n_convergence`] with the external unitaries for each `N` supplied by `unitaries`.
pub fn n_convergence_with(
    spec: &PotentialSpec,
    ns: &[usize],
    opts: &ConvergenceOptions,
    unitaries: impl Fn(usize) -> Result<UnitaryTuple>,
) -> Result<LaplaceReport> {
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("N list must be nonempty and increasing");
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let u = unitaries(n)?;
        let pilot = direct_run(spec, &u, n, opts.lhs.pilot.max(2), opts.lhs.seed, 3)?;
        let lhs = lhs_log_laplace(spec, &u, n, &opts.lhs)?;
        let rhs = rhs_control_cost(spec, &u, n, &opts.rhs)?.estimate;
        let gap = lhs.estimate.value - rhs.value;
        let combined = lhs.estimate.combined_stderr(&rhs);
        rows.push(LaplaceRow {
            n,
            lhs: lhs.estimate,
            lhs_method: lhs.method,
            rhs,
            gap,
            combined_stderr: combined,
            pass: gap.abs() <= 3.0 * combined + 1e-9,
            regime: if pilot.spread <= DIRECT_SPREAD_LIMIT { Regime::Direct } else { Regime::ControlOnly },
            log_weight_spread: pilot.spread,
        });
    }
    let lhs_cauchy = rows.windows(2).all(|w| (w[1].lhs.value - w[0].lhs.value).abs() <= 3.0 * w[1].lhs.combined_stderr(&w[0].lhs) + 1e-9);
    let steps: Vec<(f64, f64)> = rows.windows(2).map(|w| (w[1].lhs.value - w[0].lhs.value, w[1].lhs.combined_stderr(&w[0].lhs))).collect();
    let non_monotone = steps
        .windows(2)
        .enumerate()
        .filter(|(_, s)| s[0].0.abs() > 3.0 * s[0].1 && s[1].0.abs() > 3.0 * s[1].1 && s[0].0.signum() != s[1].0.signum())
        .map(|(k, _)| k + 1)
        .collect();
    let extrapolated = extrapolate(&rows);
    Ok(LaplaceReport {
        rows,
        extrapolated,
        lhs_cauchy,
        non_monotone,
        config: serde_json::json!({ "spec": spec.to_json_value(), "n": ns, "budgets": opts }),
    })
}

fn extrapolate(rows: &[LaplaceRow]) -> Option<ValueEstimate> {
    if rows.len() < 2 {
        return None;
    }
    let x: Vec<f64> = rows.iter().map(|r| 1.0 / (r.n * r.n) as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.rhs.value).collect();
    let (a, _) = linear_fit(&x, &y);
    // Intercept weights from the least-squares fit, for error propagation.
    let (mx, _) = mean_var(&x);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let k = x.len() as f64;
    let var: f64 = if sxx > 0.0 {
        rows.iter().zip(&x).map(|(r, xi)| (1.0 / k - mx * (xi - mx) / sxx).powi(2) * r.rhs.stderr.powi(2)).sum()
    } else {
        rows.iter().map(|r| r.rhs.stderr.powi(2)).sum::<f64>() / (k * k)
    };
    Some(ValueEstimate { value: a, stderr: var.sqrt(), samples: rows.len() })
}
