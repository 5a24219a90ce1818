//! Monte Carlo value function `h_t` and optimal drift `b = -grad h_t`.
//!
//! All quantities are normalized: `value_h` returns
//! `-(1/N^2) log E[exp(-N^2 G(history, x + future Brownian path))]` and the
//! drift is the scaled gradient, so for `G = c tau(X(1)^2)` one gets
//! `c tau(x^2)/(1+2c(1-t)) + (m/2) log(1+2c(1-t))` and `-2c x/(1+2c(1-t))`.
//!
//! Two proposals are available for the future path. `Brownian` samples the
//! free Brownian continuation. `Laplace` samples a Gaussian centred at the
//! minimizer of `G + bridge energy` with precision built from the Brownian
//! precision and directional curvatures of `G`, and corrects by importance
//! weights. The tilted proposal is exact for quadratic potentials and keeps
//! the weights well conditioned when `N^2 G` spans many nats.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::matrix_core::{from_normalized_coords, normalized_coords, sample_normalized, HermitianTuple, UnitaryTuple};
use crate::potentials::{eval_potential, gradient_potential, GradientScale, PotentialSpec};
use crate::rng::stream;
use crate::sde::DriftField;
use crate::stats::{log_mean_exp, ValueEstimate};
use crate::yosida::{minimize_smooth, SolverOptions};

/// Sampler for the future Brownian path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Proposal {
    Brownian,
    Laplace,
}

/// Curvature model of the Laplace proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Curvature {
    /// One directional curvature per free slot; exact for quadratic potentials.
    Isotropic,
    /// Finite-difference Hessian over every free coordinate.
    Full,
    /// `Full` for non-quadratic potentials up to [`FULL_CURVATURE_LIMIT`] coordinates.
    Auto,
}

/// Largest number of free coordinates for which `Curvature::Auto` builds a full Hessian.
pub const FULL_CURVATURE_LIMIT: usize = 128;

/// Thresholds that declare an importance average degenerate.
#[derive(Clone, Copy, Debug)]
pub struct WeightLimits {
    /// Largest tolerated `max - min` of log weights, in nats.
    pub spread_cap: f64,
    /// Smallest tolerated Kish effective sample size.
    pub min_ess: f64,
}

impl Default for WeightLimits {
    fn default() -> Self {
        Self { spread_cap: 700.0, min_ess: 2.0 }
    }
}

/// Evaluation point of the value function.
#[derive(Clone, Debug)]
pub struct ValueQuery<'a> {
    pub spec: &'a PotentialSpec,
    pub unitaries: UnitaryTuple,
    pub t: f64,
    /// Values at the slots `t_j < t`.
    pub history: Vec<HermitianTuple>,
    pub x: HermitianTuple,
    pub samples: usize,
    pub seed: u64,
    pub stream: u64,
    pub proposal: Proposal,
    pub limits: WeightLimits,
    /// Combine the gradient ratio with its bridge form to reduce variance.
    pub control_variate: bool,
    pub curvature: Curvature,
}

impl<'a> ValueQuery<'a> {
    pub fn new(spec: &'a PotentialSpec, t: f64, history: Vec<HermitianTuple>, x: HermitianTuple) -> Self {
        let n = x.n();
        Self {
            spec,
            unitaries: UnitaryTuple::empty(n),
            t,
            history,
            x,
            samples: 1000,
            seed: 0,
            stream: 0,
            proposal: Proposal::Laplace,
            limits: WeightLimits::default(),
            control_variate: false,
            curvature: Curvature::Auto,
        }
    }

    pub fn curvature(mut self, c: Curvature) -> Self {
        self.curvature = c;
        self
    }

    pub fn samples(mut self, s: usize) -> Self {
        self.samples = s;
        self
    }

    pub fn seed(mut self, seed: u64, stream: u64) -> Self {
        self.seed = seed;
        self.stream = stream;
        self
    }

    pub fn proposal(mut self, p: Proposal) -> Self {
        self.proposal = p;
        self
    }

    pub fn control_variate(mut self, on: bool) -> Self {
        self.control_variate = on;
        self
    }

    pub fn unitaries(mut self, u: UnitaryTuple) -> Self {
        self.unitaries = u;
        self
    }

    /// Number of slots strictly before `t`.
    pub fn past_slots(&self) -> usize {
        history_len(&self.spec.times, self.t)
    }

    fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return invalid(format!("time must be nonnegative, got {}", self.t));
        }
        let i = self.past_slots();
        if self.history.len() != i {
            return Err(Error::DimensionMismatch { expected: i, found: self.history.len() });
        }
        if self.x.m() != self.spec.m {
            return Err(Error::DimensionMismatch { expected: self.spec.m, found: self.x.m() });
        }
        for h in &self.history {
            if h.n() != self.x.n() || h.m() != self.x.m() {
                return invalid("history tuples must match the shape of x");
            }
        }
        if self.samples == 0 {
            return invalid("sample budget must be positive");
        }
        Ok(())
    }
}

/// Number of slot times strictly below `t`.
pub fn history_len(times: &[f64], t: f64) -> usize {
    times.iter().filter(|&&s| s < t).count()
}

/// Drift estimate with diagnostics.
#[derive(Clone, Debug)]
pub struct DriftEstimate {
    pub drift: HermitianTuple,
    /// Root mean square error in the normalized norm.
    pub stderr: f64,
    pub samples: usize,
    pub ess: f64,
    pub warning: Option<String>,
}

/// Value estimate with importance-sampling diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct ValueDetail {
    pub estimate: ValueEstimate,
    pub ess: f64,
    pub spread: f64,
}

struct LaplaceFit {
    mean: Vec<HermitianTuple>,
    /// `L^{-T}` for the Cholesky factor `L` of the precision, either over
    /// slots (shared by every coordinate) or over all free coordinates.
    mix: DMatrix<f64>,
    full: bool,
    /// Log determinant of the full precision in normalized coordinates.
    log_det: f64,
}

fn is_quadratic(spec: &PotentialSpec) -> bool {
    spec.components.len() <= 1 && spec.components.iter().all(|c| c.lambda == Complex64::new(0.0, 0.0) || c.word.is_empty())
}

/// Everything needed to draw future paths for one query.
struct Plan<'q, 'a> {
    q: &'q ValueQuery<'a>,
    past: usize,
    pinned: bool,
    /// Gaps of the free slots, each measured from the previous slot (or from `t`).
    gaps: Vec<f64>,
    laplace: Option<LaplaceFit>,
}

impl<'q, 'a> Plan<'q, 'a> {
    fn new(q: &'q ValueQuery<'a>) -> Result<Self> {
        q.validate()?;
        let times = &q.spec.times;
        let past = q.past_slots();
        let mut gaps = Vec::new();
        let mut pinned = false;
        let mut prev = q.t;
        for (j, &tj) in times.iter().enumerate().skip(past) {
            let g = tj - prev;
            if j == past && g <= 0.0 {
                pinned = true;
            } else {
                gaps.push(g);
            }
            prev = tj;
        }
        let mut plan = Self { q, past, pinned, gaps, laplace: None };
        if q.proposal == Proposal::Laplace && !plan.gaps.is_empty() {
            plan.laplace = Some(plan.fit_laplace()?);
        }
        Ok(plan)
    }

    fn n(&self) -> usize {
        self.q.x.n()
    }

    fn free(&self) -> usize {
        self.gaps.len()
    }

    fn assemble(&self, free: &[HermitianTuple]) -> Vec<HermitianTuple> {
        let mut slots = Vec::with_capacity(self.q.spec.slots());
        slots.extend(self.q.history.iter().cloned());
        if self.pinned {
            slots.push(self.q.x.clone());
        }
        slots.extend(free.iter().cloned());
        slots
    }

    fn potential(&self, slots: &[HermitianTuple]) -> Result<f64> {
        eval_potential(self.q.spec, slots, &self.q.unitaries)
    }

    fn bridge_energy(&self, free: &[HermitianTuple]) -> f64 {
        let mut s = 0.0;
        let mut prev = &self.q.x;
        for (z, g) in free.iter().zip(&self.gaps) {
            s += z.sub(prev).norm2() / g;
            prev = z;
        }
        0.5 * s
    }

    fn fit_laplace(&self) -> Result<LaplaceFit> {
        let n = self.n();
        let m = self.q.spec.m;
        let k = self.free();
        let start = self.past + usize::from(self.pinned);
        let objective = |v: &[f64]| -> (f64, Vec<f64>) {
            let free = from_normalized_coords(v, n, m, k).expect("coordinate length fixed by the plan");
            let slots = self.assemble(&free);
            let f = self.potential(&slots).unwrap_or(f64::INFINITY);
            let grads = gradient_potential(self.q.spec, &slots, &self.q.unitaries, GradientScale::Scaled).expect("slot shapes validated");
            let mut out = Vec::with_capacity(k);
            for a in 0..k {
                let prev = if a == 0 { &self.q.x } else { &free[a - 1] };
                let mut g = grads[start + a].add(&free[a].sub(prev).scale(1.0 / self.gaps[a]));
                if a + 1 < k {
                    g.axpy(-1.0 / self.gaps[a + 1], &free[a + 1].sub(&free[a]));
                }
                out.push(g);
            }
            (f + self.bridge_energy(&free), normalized_coords(&out))
        };
        let init: Vec<HermitianTuple> = vec![self.q.x.clone(); k];
        let v0 = normalized_coords(&init);
        let min_gap = self.gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        let opt = minimize_smooth(objective, &v0, min_gap / 4.0, SolverOptions { tol: 1e-10, max_iter: 5000 }).or_else(|e| match e {
            Error::NonConvergence { .. } => {
                log::debug!("tilted-bridge mode search stopped early: {e}");
                Ok(crate::yosida::Minimum { point: v0.clone(), value: f64::NAN, grad_norm: f64::NAN, iterations: 0 })
            }
            other => Err(other),
        })?;
        let mean = from_normalized_coords(&opt.point, n, m, k)?;

        let dim = k * n * n * m;
        let full = match self.q.curvature {
            Curvature::Isotropic => false,
            Curvature::Full => true,
            Curvature::Auto => !is_quadratic(self.q.spec) && dim <= FULL_CURVATURE_LIMIT,
        };
        if full {
            match self.full_fit(&opt.point) {
                Ok(mut fit) => {
                    fit.mean = mean;
                    return Ok(fit);
                }
                Err(e) => log::debug!("full Laplace fit unavailable, using slot curvature: {e}"),
            }
        }
        self.isotropic_fit(mean)
    }

    /// Hessian of the potential at the mode by central differences of the
    /// gradient, plus the bridge precision on every coordinate.
    fn full_fit(&self, mode: &[f64]) -> Result<LaplaceFit> {
        let n = self.n();
        let m = self.q.spec.m;
        let k = self.free();
        let d = n * n * m;
        let dim = k * d;
        let start = self.past + usize::from(self.pinned);
        let grad = |v: &[f64]| -> Result<Vec<f64>> {
            let free = from_normalized_coords(v, n, m, k)?;
            let g = gradient_potential(self.q.spec, &self.assemble(&free), &self.q.unitaries, GradientScale::Scaled)?;
            Ok(normalized_coords(&g[start..start + k]))
        };
        let eps = 1e-4;
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut v = mode.to_vec();
        for j in 0..dim {
            v[j] = mode[j] + eps;
            let gp = grad(&v)?;
            v[j] = mode[j] - eps;
            let gm = grad(&v)?;
            v[j] = mode[j];
            for i in 0..dim {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
            }
        }
        let mut prec = (&hess + hess.transpose()) * 0.5;
        for a in 0..k {
            let mut diag = 1.0 / self.gaps[a];
            if a + 1 < k {
                diag += 1.0 / self.gaps[a + 1];
            }
            for c in 0..d {
                prec[(a * d + c, a * d + c)] += diag;
                if a + 1 < k {
                    let w = 1.0 / self.gaps[a + 1];
                    prec[(a * d + c, (a + 1) * d + c)] -= w;
                    prec[((a + 1) * d + c, a * d + c)] -= w;
                }
            }
        }
        let chol = Cholesky::new(prec).ok_or_else(|| Error::InvalidArgument("coordinate precision is not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mix = l.transpose().try_inverse().ok_or_else(|| Error::InvalidArgument("singular Cholesky factor".into()))?;
        Ok(LaplaceFit { mean: Vec::new(), mix, full: true, log_det })
    }

    /// Directional curvature of the potential in each free slot.
    fn isotropic_fit(&self, mean: Vec<HermitianTuple>) -> Result<LaplaceFit> {
        let n = self.n();
        let m = self.q.spec.m;
        let k = self.free();
        let start = self.past + usize::from(self.pinned);
        let mut rng = stream(self.q.seed, &[self.q.stream, u64::MAX]);
        let mut kappa = vec![0.0; k];
        let eps = 1e-4;
        for (a, ka) in kappa.iter_mut().enumerate() {
            let mut acc = 0.0;
            let dirs = 2;
            for _ in 0..dirs {
                let h = sample_normalized(n, m, 1.0, &mut rng)?;
                let hn = h.norm2();
                let mut plus = mean.clone();
                plus[a] = plus[a].add(&h.scale(eps));
                let mut minus = mean.clone();
                minus[a] = minus[a].sub(&h.scale(eps));
                let gp = gradient_potential(self.q.spec, &self.assemble(&plus), &self.q.unitaries, GradientScale::Scaled)?;
                let gm = gradient_potential(self.q.spec, &self.assemble(&minus), &self.q.unitaries, GradientScale::Scaled)?;
                acc += gp[start + a].sub(&gm[start + a]).inner(&h) / (2.0 * eps * hn);
            }
            *ka = (acc / dirs as f64).max(0.0);
        }
        let mut prec = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            prec[(a, a)] += 1.0 / self.gaps[a] + kappa[a];
            if a + 1 < k {
                let w = 1.0 / self.gaps[a + 1];
                prec[(a, a)] += w;
                prec[(a, a + 1)] -= w;
                prec[(a + 1, a)] -= w;
            }
        }
        let chol = Cholesky::new(prec).ok_or_else(|| Error::InvalidArgument("slot precision is not positive definite".into()))?;
        let l = chol.l();
        let slot_log_det = 2.0 * (0..k).map(|a| l[(a, a)].ln()).sum::<f64>();
        let mix = l.transpose().try_inverse().ok_or_else(|| Error::InvalidArgument("singular Cholesky factor".into()))?;
        Ok(LaplaceFit { mean, mix, full: false, log_det: (n * n * m) as f64 * slot_log_det })
    }

    /// Draws one future path; returns the full slot list and the log weight.
    fn draw<R: Rng>(&self, rng: &mut R) -> Result<(Vec<HermitianTuple>, f64)> {
        let n = self.n();
        let m = self.q.spec.m;
        let nn = (n * n) as f64;
        let k = self.free();
        match (&self.laplace, k) {
            (_, 0) | (None, _) => {
                let mut free = Vec::with_capacity(k);
                let mut prev = self.q.x.clone();
                for &g in &self.gaps {
                    let z = prev.add(&sample_normalized(n, m, g, rng)?);
                    free.push(z.clone());
                    prev = z;
                }
                let slots = self.assemble(&free);
                let f = self.potential(&slots)?;
                Ok((slots, -nn * f))
            }
            (Some(fit), _) => {
                let noise: Vec<HermitianTuple> = (0..k).map(|_| sample_normalized(n, m, 1.0, rng)).collect::<Result<_>>()?;
                let noise_energy: f64 = noise.iter().map(|g| g.norm2()).sum::<f64>() * 0.5;
                let free: Vec<HermitianTuple> = if fit.full {
                    let xi = DVector::from_vec(normalized_coords(&noise));
                    let shift = &fit.mix * xi;
                    let base = DVector::from_vec(normalized_coords(&fit.mean));
                    from_normalized_coords((base + shift).as_slice(), n, m, k)?
                } else {
                    (0..k)
                        .map(|a| {
                            let mut z = fit.mean[a].clone();
                            for (b, g) in noise.iter().enumerate().skip(a) {
                                let c = fit.mix[(a, b)];
                                if c != 0.0 {
                                    z.axpy(c, g);
                                }
                            }
                            z
                        })
                        .collect()
                };
                let bridge = self.bridge_energy(&free);
                let slots = self.assemble(&free);
                let f = self.potential(&slots)?;
                let log_gap: f64 = self.gaps.iter().map(|g| g.ln()).sum();
                let lw = nn * (-f - bridge + noise_energy) - 0.5 * (nn * m as f64 * log_gap + fit.log_det);
                Ok((slots, lw))
            }
        }
    }
}

/// Weighted first and second moments of the gradient sum `A` and of the
/// control variates `D_j = grad_j(G + bridge)` over the free slots, each of
/// which has mean zero under the target by integration by parts.
#[derive(Clone)]
struct GradSums {
    wa: HermitianTuple,
    w2a: HermitianTuple,
    wd: Vec<HermitianTuple>,
    w2d: Vec<HermitianTuple>,
    wad: DVector<f64>,
    wdd: DMatrix<f64>,
    w2aa: f64,
    w2ad: DVector<f64>,
    w2dd: DMatrix<f64>,
}

impl GradSums {
    fn zeros(n: usize, m: usize, k: usize) -> Self {
        let z = HermitianTuple::zeros(n, m);
        Self {
            wa: z.clone(),
            w2a: z.clone(),
            wd: vec![z.clone(); k],
            w2d: vec![z; k],
            wad: DVector::zeros(k),
            wdd: DMatrix::zeros(k, k),
            w2aa: 0.0,
            w2ad: DVector::zeros(k),
            w2dd: DMatrix::zeros(k, k),
        }
    }

    fn push(&mut self, w: f64, a: &HermitianTuple, d: &[HermitianTuple]) {
        let w2 = w * w;
        self.wa.axpy(w, a);
        self.w2a.axpy(w2, a);
        self.w2aa += w2 * a.norm2();
        for (i, di) in d.iter().enumerate() {
            self.wd[i].axpy(w, di);
            self.w2d[i].axpy(w2, di);
            let ad = a.inner(di);
            self.wad[i] += w * ad;
            self.w2ad[i] += w2 * ad;
            for (j, dj) in d.iter().enumerate().skip(i) {
                let v = di.inner(dj);
                self.wdd[(i, j)] += w * v;
                self.w2dd[(i, j)] += w2 * v;
                if i != j {
                    self.wdd[(j, i)] += w * v;
                    self.w2dd[(j, i)] += w2 * v;
                }
            }
        }
    }

    fn rescale(&mut self, r: f64) {
        let r2 = r * r;
        self.wa = self.wa.scale(r);
        self.w2a = self.w2a.scale(r2);
        self.w2aa *= r2;
        for t in self.wd.iter_mut() {
            *t = t.scale(r);
        }
        for t in self.w2d.iter_mut() {
            *t = t.scale(r2);
        }
        self.wad *= r;
        self.wdd *= r;
        self.w2ad *= r2;
        self.w2dd *= r2;
    }

    fn add(&mut self, o: &GradSums) {
        self.wa = self.wa.add(&o.wa);
        self.w2a = self.w2a.add(&o.w2a);
        self.w2aa += o.w2aa;
        for (a, b) in self.wd.iter_mut().zip(&o.wd) {
            *a = a.add(b);
        }
        for (a, b) in self.w2d.iter_mut().zip(&o.w2d) {
            *a = a.add(b);
        }
        self.wad += &o.wad;
        self.wdd += &o.wdd;
        self.w2ad += &o.w2ad;
        self.w2dd += &o.w2dd;
    }
}

/// Running weighted sums relative to a reference log weight.
#[derive(Clone)]
struct Summary {
    count: usize,
    max: f64,
    min: f64,
    s0: f64,
    s2: f64,
    grad: Option<GradSums>,
}

impl Summary {
    fn rescale(&mut self, new_max: f64) {
        if self.max == new_max || self.count == 0 {
            self.max = new_max;
            return;
        }
        let r = (self.max - new_max).exp();
        self.s0 *= r;
        self.s2 *= r * r;
        if let Some(g) = self.grad.as_mut() {
            g.rescale(r);
        }
        self.max = new_max;
    }

    fn merge(mut self, mut other: Summary) -> Summary {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let mx = self.max.max(other.max);
        self.rescale(mx);
        other.rescale(mx);
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.s0 += other.s0;
        self.s2 += other.s2;
        if let (Some(a), Some(b)) = (self.grad.as_mut(), other.grad.as_ref()) {
            a.add(b);
        }
        self
    }
}

const CHUNK: usize = 64;

impl Plan<'_, '_> {
    /// `grad_j(G + bridge)` for each free slot, given the potential gradients.
    fn control_variates(&self, slots: &[HermitianTuple], grads: &[HermitianTuple]) -> Vec<HermitianTuple> {
        let start = self.past + usize::from(self.pinned);
        let k = self.free();
        (0..k)
            .map(|a| {
                let prev = if a == 0 { &self.q.x } else { &slots[start + a - 1] };
                let mut g = grads[start + a].add(&slots[start + a].sub(prev).scale(1.0 / self.gaps[a]));
                if a + 1 < k {
                    g.axpy(-1.0 / self.gaps[a + 1], &slots[start + a + 1].sub(&slots[start + a]));
                }
                g
            })
            .collect()
    }
}

fn accumulate(plan: &Plan, with_gradient: bool) -> Result<Summary> {
    let q = plan.q;
    let (n, m) = (q.x.n(), q.spec.m);
    let chunks = q.samples.div_ceil(CHUNK);
    let parts: Vec<Result<Summary>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(q.seed, &[q.stream, c as u64]);
            let count = CHUNK.min(q.samples - c * CHUNK);
            let mut draws = Vec::with_capacity(count);
            for _ in 0..count {
                let (slots, lw) = plan.draw(&mut rng)?;
                let g = if with_gradient {
                    let grads = gradient_potential(q.spec, &slots, &q.unitaries, GradientScale::Scaled)?;
                    let mut a = HermitianTuple::zeros(n, m);
                    for s in grads.iter().skip(plan.past) {
                        a.axpy(1.0, s);
                    }
                    let d = if q.control_variate { plan.control_variates(&slots, &grads) } else { Vec::new() };
                    Some((a, d))
                } else {
                    None
                };
                draws.push((lw, g));
            }
            let max = draws.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
            let min = draws.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
            let mut s = Summary {
                count,
                max,
                min,
                s0: 0.0,
                s2: 0.0,
                grad: with_gradient.then(|| GradSums::zeros(n, m, if q.control_variate { plan.free() } else { 0 })),
            };
            for (lw, g) in draws {
                let w = (lw - max).exp();
                s.s0 += w;
                s.s2 += w * w;
                if let (Some(sums), Some((a, d))) = (s.grad.as_mut(), g) {
                    sums.push(w, &a, &d);
                }
            }
            Ok(s)
        })
        .collect();
    let mut total: Option<Summary> = None;
    for p in parts {
        let p = p?;
        total = Some(match total {
            None => p,
            Some(t) => t.merge(p),
        });
    }
    Ok(total.expect("at least one chunk"))
}

fn check_limits(s: &Summary, limits: &WeightLimits) -> Result<f64> {
    let ess = if s.s2 > 0.0 { s.s0 * s.s0 / s.s2 } else { 0.0 };
    let spread = s.max - s.min;
    if spread > limits.spread_cap || ess < limits.min_ess.min(s.count as f64) {
        return Err(Error::Degenerate { ess, spread, advice: "increase the sample budget or switch to the tilted-bridge proposal".into() });
    }
    Ok(ess)
}

/// Normalized value function `(1/N^2) h_t(sqrt(N) history, sqrt(N) x)` with diagnostics.
pub fn value_h_detailed(q: &ValueQuery) -> Result<ValueDetail> {
    let plan = Plan::new(q)?;
    let nn = (q.x.n() * q.x.n()) as f64;
    let s = accumulate(&plan, false)?;
    let ess = check_limits(&s, &q.limits)?;
    let n = s.count as f64;
    let mean = s.s0 / n;
    let var = if s.count > 1 { ((s.s2 - s.s0 * s.s0 / n) / (n - 1.0)).max(0.0) } else { 0.0 };
    let log_mean = s.max + mean.ln();
    let stderr = if mean > 0.0 { (var / n).sqrt() / mean / nn } else { f64::INFINITY };
    Ok(ValueDetail { estimate: ValueEstimate { value: -log_mean / nn, stderr, samples: s.count }, ess, spread: s.max - s.min })
}

/// Normalized value function estimate.
pub fn value_h(q: &ValueQuery) -> Result<ValueEstimate> {
    value_h_detailed(q).map(|d| d.estimate)
}

fn drift_from_summary(s: Summary, ess: f64) -> DriftEstimate {
    let g = s.grad.expect("gradient sums requested");
    let s0 = s.s0;
    let k = g.wd.len();
    let mean_a = g.wa.scale(1.0 / s0);
    let mean_d: Vec<HermitianTuple> = g.wd.iter().map(|d| d.scale(1.0 / s0)).collect();
    let mut cov_dd = DMatrix::<f64>::zeros(k, k);
    let mut cov_ad = DVector::<f64>::zeros(k);
    for i in 0..k {
        cov_ad[i] = g.wad[i] / s0 - mean_a.inner(&mean_d[i]);
        for j in 0..k {
            cov_dd[(i, j)] = g.wdd[(i, j)] / s0 - mean_d[i].inner(&mean_d[j]);
        }
    }
    let beta = if k == 0 {
        DVector::zeros(0)
    } else {
        let svd = cov_dd.svd(true, true);
        let eps = 1e-12 * svd.singular_values.max().max(1e-300);
        svd.solve(&cov_ad, eps).map(|b| -b).unwrap_or_else(|_| DVector::zeros(k))
    };
    let mut mean = mean_a;
    for (b, d) in beta.iter().zip(&mean_d) {
        mean.axpy(*b, d);
    }
    // sum w^2 |C - mean|^2 with C = A + sum_j beta_j D_j.
    let w2cc = g.w2aa + 2.0 * beta.dot(&g.w2ad) + (g.w2dd.clone() * &beta).dot(&beta);
    let mut w2c = g.w2a.clone();
    for (b, d) in beta.iter().zip(&g.w2d) {
        w2c.axpy(*b, d);
    }
    let var_num = (w2cc - 2.0 * w2c.inner(&mean) + s.s2 * mean.norm2()).max(0.0);
    let stderr = var_num.sqrt() / s0;
    DriftEstimate { drift: mean.scale(-1.0), stderr, samples: s.count, ess, warning: None }
}

fn drift_ratio(q: &ValueQuery) -> Result<DriftEstimate> {
    let plan = Plan::new(q)?;
    if plan.past == q.spec.slots() {
        return Ok(DriftEstimate {
            drift: HermitianTuple::zeros(q.x.n(), q.spec.m),
            stderr: 0.0,
            samples: 0,
            ess: q.samples as f64,
            warning: None,
        });
    }
    let s = accumulate(&plan, true)?;
    let ess = check_limits(&s, &q.limits)?;
    Ok(drift_from_summary(s, ess))
}

/// Optimal drift as a weighted ratio of summed potential gradients, under the query's proposal.
///
/// With `control_variate` set, the mean-zero slot gradients of
/// `G + bridge` are added with variance-minimizing coefficients.
pub fn drift_logratio(q: &ValueQuery) -> Result<DriftEstimate> {
    drift_ratio(q)
}

/// Optimal drift as a self-normalized importance estimate under the tilted bridge.
///
/// Sets a warning when the effective sample size drops below 1% of the budget.
pub fn drift_gradexp(q: &ValueQuery) -> Result<DriftEstimate> {
    let mut tilted = q.clone();
    tilted.proposal = Proposal::Laplace;
    let mut d = drift_ratio(&tilted)?;
    if d.ess < 0.01 * q.samples as f64 {
        d.warning = Some(format!("effective sample size {:.1} is below 1% of {} draws", d.ess, q.samples));
    }
    Ok(d)
}

/// Value at `(t, x)` recomputed through the value function at `t + delta`.
///
/// Samples the Brownian path over `[t, t + delta]` (including any slots it
/// crosses), evaluates `h_{t+delta}` at the endpoint with `inner` draws, and
/// returns `-(1/N^2) log E[exp(-N^2 h_{t+delta})]` over `outer` paths.
pub fn value_h_composed(q: &ValueQuery, delta: f64, outer: usize, inner: usize) -> Result<ValueEstimate> {
    q.validate()?;
    if !(delta > 0.0) {
        return invalid("delta must be positive");
    }
    let n = q.x.n();
    let m = q.spec.m;
    let nn = (n * n) as f64;
    let s = q.t + delta;
    let past = q.past_slots();
    let crossed: Vec<f64> = q.spec.times.iter().cloned().filter(|&tj| tj >= q.t && tj < s).collect();
    let lws: Vec<Result<(f64, f64)>> = (0..outer)
        .into_par_iter()
        .map(|o| {
            let mut rng = stream(q.seed, &[q.stream, 1 << 40, o as u64]);
            let mut hist = q.history.clone();
            let mut cur = q.x.clone();
            let mut now = q.t;
            for &tj in &crossed {
                if tj > now {
                    cur = cur.add(&sample_normalized(n, m, tj - now, &mut rng)?);
                    now = tj;
                }
                hist.push(cur.clone());
            }
            cur = cur.add(&sample_normalized(n, m, s - now, &mut rng)?);
            debug_assert_eq!(hist.len(), past + crossed.len());
            let mut inner_q = q.clone();
            inner_q.t = s;
            inner_q.history = hist;
            inner_q.x = cur;
            inner_q.samples = inner;
            inner_q.stream = derive_inner_stream(q.stream, o);
            let h = value_h(&inner_q)?;
            Ok((-nn * h.value, h.stderr))
        })
        .collect();
    let mut lw = Vec::with_capacity(outer);
    let mut inner_var = 0.0;
    for r in lws {
        let (l, e) = r?;
        lw.push(l);
        inner_var += e * e;
    }
    let r = log_mean_exp(&lw);
    let inner_se = (inner_var / outer as f64 / outer as f64).sqrt();
    Ok(ValueEstimate { value: -r.log_mean / nn, stderr: (r.stderr / nn).hypot(inner_se), samples: outer })
}

fn derive_inner_stream(stream: u64, o: usize) -> u64 {
    crate::rng::derive_key(stream, &[o as u64, 0xC0])
}

/// Monte Carlo optimal drift as a [`DriftField`] for path integrators.
pub struct OptimalDrift<'a> {
    pub spec: &'a PotentialSpec,
    pub unitaries: UnitaryTuple,
    pub samples: usize,
    pub seed: u64,
    pub proposal: Proposal,
    pub curvature: Curvature,
}

impl<'a> OptimalDrift<'a> {
    pub fn new(spec: &'a PotentialSpec, n: usize, samples: usize, seed: u64) -> Self {
        Self { spec, unitaries: UnitaryTuple::empty(n), samples, seed, proposal: Proposal::Laplace, curvature: Curvature::Auto }
    }

    /// The full estimate at `(t, history, x)`.
    pub fn estimate(&self, t: f64, history: &[HermitianTuple], x: &HermitianTuple) -> Result<DriftEstimate> {
        let key = crate::rng::derive_key(t.to_bits(), &[x.norm2().to_bits(), x.mat(0)[(0, 0)].re.to_bits()]);
        let q = ValueQuery::new(self.spec, t, history.to_vec(), x.clone())
            .unitaries(self.unitaries.clone())
            .samples(self.samples)
            .seed(self.seed, key)
            .proposal(self.proposal)
            .curvature(self.curvature)
            .control_variate(true);
        drift_logratio(&q)
    }
}

impl DriftField for OptimalDrift<'_> {
    fn drift(&self, t: f64, history: &[HermitianTuple], x: &HermitianTuple) -> Result<HermitianTuple> {
        self.estimate(t, history, x).map(|d| d.drift)
    }

    fn slot_times(&self) -> &[f64] {
        &self.spec.times
    }

    fn monotone(&self) -> bool {
        self.spec.is_convex_mode()
    }
}

/// Closed-form value for `G = c sum_l tau(X_l(1)^2)`.
pub fn quadratic_value(c: f64, m: usize, t: f64, x: &HermitianTuple) -> f64 {
    let a = 1.0 + 2.0 * c * (1.0 - t);
    c * x.norm2() / a + 0.5 * m as f64 * a.ln()
}

/// Closed-form optimal drift for `G = c sum_l tau(X_l(1)^2)`.
pub fn quadratic_drift(c: f64, t: f64, x: &HermitianTuple) -> HermitianTuple {
    x.scale(-2.0 * c / (1.0 + 2.0 * c * (1.0 - t)))
}
