//! Matrix Gibbs ensembles `exp(-N^2 (G + bridge))` on time slots, sampled by MALA.
//!
//! The bridge term `1/2 sum tau((x_j - x_{j-1})^2)/(t_j - t_{j-1})` makes the
//! ensemble with `G = 0` the law of the normalized Hermitian Brownian motion
//! at the slot times.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::matrix_core::{sample_normalized, slots_norm2, tau, CMat, HermitianTuple, UnitaryTuple};
use crate::nc_poly::{free_difference_quotient, Evaluator, LetterKind, NCPolynomial};
use crate::potentials::{
    eval_bridge_potential, eval_potential, gradient_bridge_potential, gradient_potential, GradientScale, PotentialSpec,
};
use crate::rng::stream;
use crate::stats::{autocorr_ess, batch_means_stderr, mean_var, r_hat, ValueEstimate};

/// Score of the ensemble, one tuple per slot, in the `Re Tr` pairing.
pub type ScoreTuple = Vec<HermitianTuple>;

/// `G + bridge` on the slots.
pub fn total_potential(spec: &PotentialSpec, u: &UnitaryTuple, x: &[HermitianTuple]) -> Result<f64> {
    Ok(eval_potential(spec, x, u)? + eval_bridge_potential(&spec.times, x)?)
}

/// Scaled gradient of `G + bridge`.
pub fn total_gradient(spec: &PotentialSpec, u: &UnitaryTuple, x: &[HermitianTuple]) -> Result<Vec<HermitianTuple>> {
    let g = gradient_potential(spec, x, u, GradientScale::Scaled)?;
    let b = gradient_bridge_potential(&spec.times, x)?;
    Ok(g.iter().zip(&b).map(|(a, b)| a.add(b)).collect())
}

/// `Xi = -N grad(G + bridge)`: the gradient of the log density `-N^2 (G + bridge)` under `Re Tr`.
pub fn score_field(spec: &PotentialSpec, u: &UnitaryTuple, x: &[HermitianTuple]) -> Result<ScoreTuple> {
    let n = x.first().map(|s| s.n()).unwrap_or(0) as f64;
    Ok(total_gradient(spec, u, x)?.into_iter().map(|g| g.scale(-n)).collect())
}

/// One MALA chain on the ensemble.
#[derive(Clone, Debug)]
pub struct GibbsEnsemble {
    pub spec: PotentialSpec,
    pub unitaries: UnitaryTuple,
    pub n: usize,
    pub step: f64,
    pub state: Vec<HermitianTuple>,
    pub accepted: usize,
    pub proposed: usize,
    cache: Option<(f64, Vec<HermitianTuple>)>,
}

impl GibbsEnsemble {
    pub fn new(spec: PotentialSpec, n: usize) -> Result<Self> {
        spec.validate()?;
        if n == 0 {
            return invalid("matrix size must be positive");
        }
        let min_gap = spec.times.iter().scan(0.0, |prev, &t| {
            let g = t - *prev;
            *prev = t;
            Some(g)
        });
        let min_gap = min_gap.fold(f64::INFINITY, f64::min);
        let state = vec![HermitianTuple::zeros(n, spec.m); spec.slots()];
        Ok(Self { unitaries: UnitaryTuple::empty(n), n, step: 0.5 * min_gap, state, accepted: 0, proposed: 0, cache: None, spec })
    }

    pub fn with_unitaries(mut self, u: UnitaryTuple) -> Self {
        self.unitaries = u;
        self.cache = None;
        self
    }

    pub fn set_state(&mut self, x: Vec<HermitianTuple>) {
        self.state = x;
        self.cache = None;
    }

    fn nn(&self) -> f64 {
        (self.n * self.n) as f64
    }

    pub fn potential(&self, x: &[HermitianTuple]) -> Result<f64> {
        total_potential(&self.spec, &self.unitaries, x)
    }

    pub fn gradient(&self, x: &[HermitianTuple]) -> Result<Vec<HermitianTuple>> {
        total_gradient(&self.spec, &self.unitaries, x)
    }

    /// Unnormalized log density `-N^2 (G + bridge)`.
    pub fn log_density(&self, x: &[HermitianTuple]) -> Result<f64> {
        Ok(-self.nn() * self.potential(x)?)
    }

    fn mean_move(&self, x: &[HermitianTuple], grad: &[HermitianTuple]) -> Vec<HermitianTuple> {
        x.iter()
            .zip(grad)
            .map(|(a, g)| {
                let mut y = a.clone();
                y.axpy(-0.5 * self.step, g);
                y
            })
            .collect()
    }

    /// `log q(to | from)` up to a constant.
    fn log_proposal(&self, from: &[HermitianTuple], grad_from: &[HermitianTuple], to: &[HermitianTuple]) -> f64 {
        let mean = self.mean_move(from, grad_from);
        let d: Vec<HermitianTuple> = to.iter().zip(&mean).map(|(a, b)| a.sub(b)).collect();
        -self.nn() * slots_norm2(&d) / (2.0 * self.step)
    }

    /// Metropolis-Hastings log ratio for the move `x -> y`.
    pub fn log_accept_ratio(&self, x: &[HermitianTuple], y: &[HermitianTuple]) -> Result<f64> {
        let (gx, gy) = (self.gradient(x)?, self.gradient(y)?);
        Ok(self.log_density(y)? + self.log_proposal(y, &gy, x) - self.log_density(x)? - self.log_proposal(x, &gx, y))
    }

    /// One MALA transition; returns the acceptance probability of the proposal.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        if self.cache.is_none() {
            self.cache = Some((self.potential(&self.state)?, self.gradient(&self.state)?));
        }
        let (phi_x, grad_x) = self.cache.clone().expect("cache filled above");
        let mean = self.mean_move(&self.state, &grad_x);
        let y: Vec<HermitianTuple> =
            mean.iter().map(|a| Ok(a.add(&sample_normalized(self.n, self.spec.m, self.step, rng)?))).collect::<Result<_>>()?;
        let phi_y = self.potential(&y)?;
        let grad_y = self.gradient(&y)?;
        let nn = self.nn();
        let log_a = -nn * phi_y + self.log_proposal(&y, &grad_y, &self.state) + nn * phi_x - self.log_proposal(&self.state, &grad_x, &y);
        let prob = if log_a.is_nan() { 0.0 } else { log_a.min(0.0).exp() };
        self.proposed += 1;
        if rng.random::<f64>() < prob {
            self.accepted += 1;
            self.state = y;
            self.cache = Some((phi_y, grad_y));
        }
        Ok(prob)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// MALA run settings.
#[derive(Clone, Copy, Debug)]
pub struct MalaOptions {
    pub chains: usize,
    pub burn_in: usize,
    /// Kept draws per chain.
    pub samples: usize,
    pub thin: usize,
    /// Acceptance rate targeted by the burn-in step-size adaptation.
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for MalaOptions {
    fn default() -> Self {
        Self { chains: 4, burn_in: 500, samples: 1000, thin: 1, target_accept: 0.574, seed: 0 }
    }
}

/// Per-chain outputs of a MALA run.
#[derive(Clone, Debug)]
pub struct MalaRun<T> {
    pub chains: Vec<Vec<T>>,
    pub acceptance: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

/// Brownian path at the slot times, the exact law of the ensemble with `G = 0`.
pub fn gaussian_path<R: Rng + ?Sized>(times: &[f64], n: usize, m: usize, rng: &mut R) -> Result<Vec<HermitianTuple>> {
    let mut out = Vec::with_capacity(times.len());
    let mut prev_t = 0.0;
    let mut cur = HermitianTuple::zeros(n, m);
    for &t in times {
        cur = cur.add(&sample_normalized(n, m, t - prev_t, rng)?);
        out.push(cur.clone());
        prev_t = t;
    }
    Ok(out)
}

/// Runs independent chains, recording `observe(state)` at each kept draw.
pub fn mala_observe<T, F>(ens: &GibbsEnsemble, opts: MalaOptions, observe: F) -> Result<MalaRun<T>>
where
    T: Send,
    F: Fn(&[HermitianTuple]) -> T + Sync,
{
    if opts.chains == 0 || opts.samples == 0 {
        return invalid("chains and samples must be positive");
    }
    let results: Vec<Result<(Vec<T>, f64, f64)>> = (0..opts.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(opts.seed, &[c as u64]);
            let mut chain = ens.clone();
            chain.set_state(gaussian_path(&ens.spec.times, ens.n, ens.spec.m, &mut rng)?);
            let mut log_step = chain.step.ln();
            for k in 0..opts.burn_in {
                let p = chain.advance(&mut rng)?;
                log_step += (p - opts.target_accept) / ((k + 10) as f64).powf(0.6);
                chain.step = log_step.exp();
            }
            chain.accepted = 0;
            chain.proposed = 0;
            let mut draws = Vec::with_capacity(opts.samples);
            let thin = opts.thin.max(1);
            for _ in 0..opts.samples {
                for _ in 0..thin {
                    chain.advance(&mut rng)?;
                }
                draws.push(observe(&chain.state));
            }
            let rate = chain.acceptance_rate();
            if rate < 0.05 {
                return Err(Error::AcceptanceCollapse { rate });
            }
            Ok((draws, rate, chain.step))
        })
        .collect();
    let mut run = MalaRun { chains: Vec::new(), acceptance: Vec::new(), step_sizes: Vec::new() };
    for r in results {
        let (d, a, s) = r?;
        run.chains.push(d);
        run.acceptance.push(a);
        run.step_sizes.push(s);
    }
    Ok(run)
}

/// Runs independent chains and keeps the sampled slot tuples.
pub fn mala_sample(ens: &GibbsEnsemble, opts: MalaOptions) -> Result<MalaRun<Vec<HermitianTuple>>> {
    mala_observe(ens, opts, |x| x.to_vec())
}

/// Pooled mean of a scalar series over chains with autocorrelation diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChainEstimate {
    pub value: f64,
    /// Batch-means standard error pooled over chains.
    pub stderr: f64,
    pub ess: f64,
    pub r_hat: f64,
    pub samples: usize,
}

impl ChainEstimate {
    pub fn as_value(&self) -> ValueEstimate {
        ValueEstimate { value: self.value, stderr: self.stderr, samples: self.samples }
    }
}

pub fn chain_estimate(chains: &[Vec<f64>]) -> ChainEstimate {
    let c = chains.len() as f64;
    let means: Vec<f64> = chains.iter().map(|ch| mean_var(ch).0).collect();
    let value = means.iter().sum::<f64>() / c;
    let var: f64 = chains.iter().map(|ch| batch_means_stderr(ch, 20).powi(2)).sum::<f64>() / (c * c);
    let ess = chains.iter().map(|ch| autocorr_ess(ch)).sum();
    let samples = chains.iter().map(|ch| ch.len()).sum();
    ChainEstimate { value, stderr: var.sqrt(), ess, r_hat: r_hat(chains), samples }
}

impl MalaRun<Vec<f64>> {
    /// Pooled estimate of the `k`-th recorded observable.
    pub fn estimate(&self, k: usize) -> ChainEstimate {
        let series: Vec<Vec<f64>> = self.chains.iter().map(|ch| ch.iter().map(|v| v[k]).collect()).collect();
        chain_estimate(&series)
    }
}

impl MalaRun<Vec<HermitianTuple>> {
    pub fn draws(&self) -> impl Iterator<Item = &Vec<HermitianTuple>> {
        self.chains.iter().flatten()
    }

    pub fn series(&self, f: impl Fn(&[HermitianTuple]) -> f64) -> Vec<Vec<f64>> {
        self.chains.iter().map(|ch| ch.iter().map(|x| f(x)).collect()).collect()
    }
}

fn flat_refs(x: &[HermitianTuple]) -> Vec<&CMat> {
    x.iter().flat_map(|s| s.mats().iter()).collect()
}

/// `tau(grad_i(G + bridge) P) - (tau x tau)(partial_i P)` at one configuration, real part.
///
/// Letters of `P` use the flat variable index `slot * m + l`; `P` may not
/// contain Cayley letters of variable `i`.
pub fn sd_integrand(spec: &PotentialSpec, u: &UnitaryTuple, x: &[HermitianTuple], p: &NCPolynomial, i: usize) -> Result<f64> {
    let m = spec.m;
    if i >= spec.variables() {
        return Err(Error::IndexOutOfRange { index: i, available: spec.variables() });
    }
    if p.terms().iter().any(|(_, w)| w.iter().any(|l| l.kind == LetterKind::Cayley && l.index == i)) {
        return invalid("test polynomial contains a Cayley letter of the differentiated variable");
    }
    let grad = total_gradient(spec, u, x)?;
    let gi = grad[i / m].mat(i % m);
    let mut ev = Evaluator::from_refs(flat_refs(x), u);
    let pv = ev.poly(p)?;
    let lhs = tau(&(gi * &pv));
    let dq = free_difference_quotient(p, i);
    let mut rhs = Complex64::new(0.0, 0.0);
    for (c, a, b) in dq.terms() {
        rhs += c * tau(&ev.word(a)?) * tau(&ev.word(b)?);
    }
    Ok((lhs - rhs).re)
}

/// Schwinger-Dyson residual `E[tau(grad_i(G + bridge) P)] - E[(tau x tau)(partial_i P)]`.
///
/// Vanishes for exact samples of the ensemble. The standard error treats
/// the samples as independent.
pub fn sd_residual(
    spec: &PotentialSpec,
    u: &UnitaryTuple,
    samples: &[Vec<HermitianTuple>],
    p: &NCPolynomial,
    i: usize,
) -> Result<ValueEstimate> {
    let vals: Vec<f64> = samples.iter().map(|x| sd_integrand(spec, u, x, p, i)).collect::<Result<_>>()?;
    Ok(ValueEstimate::from_samples(&vals))
}

/// Fluctuation statistics of `Re tau(P)` and of operator norms over samples.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConcentrationReport {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub fourth_central: f64,
    /// Largest operator norm of any slot matrix over all samples.
    pub max_operator_norm: f64,
    pub mean_operator_norm: f64,
}

pub fn operator_norm(a: &CMat) -> f64 {
    a.clone().symmetric_eigenvalues().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn concentration_stats(samples: &[Vec<HermitianTuple>], u: &UnitaryTuple, observable: &NCPolynomial) -> Result<ConcentrationReport> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let rows: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|x| {
            let v = tau(&Evaluator::from_refs(flat_refs(x), u).poly(observable)?).re;
            let norm = x.iter().flat_map(|s| s.mats().iter()).map(operator_norm).fold(0.0, f64::max);
            Ok((v, norm))
        })
        .collect();
    let rows: Vec<(f64, f64)> = rows.into_iter().collect::<Result<_>>()?;
    let vals: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let (mean, variance) = mean_var(&vals);
    let fourth_central = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / vals.len() as f64;
    let max_operator_norm = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let mean_operator_norm = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(ConcentrationReport { samples: vals.len(), mean, variance, fourth_central, max_operator_norm, mean_operator_norm })
}

/// Exact draws of the `G = 0` ensemble.
pub fn gaussian_samples(times: &[f64], n: usize, m: usize, count: usize, seed: u64) -> Result<Vec<Vec<HermitianTuple>>> {
    (0..count).into_par_iter().map(|k| gaussian_path(times, n, m, &mut stream(seed, &[k as u64]))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nc_poly::parse_word;

    fn rand_slots(n: usize, k: usize, seed: u64) -> Vec<HermitianTuple> {
        let mut r = stream(seed, &[]);
        (0..k).map(|_| sample_normalized(n, 1, 1.0, &mut r).unwrap()).collect()
    }

    #[test]
    fn gaussian_and_quadratic_scores() {
        let n = 5;
        let x = rand_slots(n, 1, 1);
        let u = UnitaryTuple::empty(n);
        let s = score_field(&PotentialSpec::zero(vec![1.0], 1), &u, &x).unwrap();
        assert!(s[0].sub(&x[0].scale(-(n as f64))).norm2() < 1e-24);
        let c = 0.5;
        let s = score_field(&PotentialSpec::quadratic(c, 1), &u, &x).unwrap();
        assert!(s[0].sub(&x[0].scale(-(n as f64) * (1.0 + 2.0 * c))).norm2() < 1e-24);
    }

    #[test]
    fn score_matches_finite_differences() {
        let n = 4;
        let mut spec = PotentialSpec::quadratic_at(0.3, 1, vec![0.4, 1.0]);
        spec.components[0].word = parse_word("X1 X2 X1 X2").unwrap();
        spec.components[0].lambda = Complex64::new(0.1, 0.05);
        let u = UnitaryTuple::empty(n);
        let x = rand_slots(n, 2, 2);
        let h = rand_slots(n, 2, 3);
        let ens = GibbsEnsemble::new(spec.clone(), n).unwrap();
        let eps = 1e-5;
        let shift = |s: f64| -> Vec<HermitianTuple> { x.iter().zip(&h).map(|(a, b)| a.add(&b.scale(s))).collect() };
        let fd = (ens.log_density(&shift(eps)).unwrap() - ens.log_density(&shift(-eps)).unwrap()) / (2.0 * eps);
        let score = score_field(&spec, &u, &x).unwrap();
        // Re Tr(Xi H) = N tau(Xi H).
        let an: f64 = score.iter().zip(&h).map(|(a, b)| a.inner(b) * n as f64).sum();
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} {an}");
    }

    #[test]
    fn detailed_balance_log_ratios_antisymmetric() {
        let spec = PotentialSpec::quadratic_at(0.4, 1, vec![0.5, 1.0]);
        let mut ens = GibbsEnsemble::new(spec, 4).unwrap();
        ens.step = 0.1;
        let x = rand_slots(4, 2, 5);
        let y = rand_slots(4, 2, 6);
        let f = ens.log_accept_ratio(&x, &y).unwrap();
        let b = ens.log_accept_ratio(&y, &x).unwrap();
        assert!((f + b).abs() <= 1e-10 * f.abs().max(1.0), "{f} {b}");
    }

    #[test]
    fn mala_second_moments() {
        let n = 6;
        for (spec, target) in [(PotentialSpec::zero(vec![1.0], 1), 1.0), (PotentialSpec::quadratic(0.5, 1), 0.5)] {
            let ens = GibbsEnsemble::new(spec, n).unwrap();
            let opts = MalaOptions { chains: 4, burn_in: 300, samples: 1500, thin: 1, seed: 7, ..Default::default() };
            let run = mala_observe(&ens, opts, |x| vec![x[0].moment(0, 2)]).unwrap();
            let est = run.estimate(0);
            assert!(run.acceptance.iter().all(|&a| (0.4..=0.8).contains(&a)), "{:?}", run.acceptance);
            assert!((est.value - target).abs() <= 3.0 * est.stderr, "{est:?} vs {target}");
            assert!(est.r_hat < 1.1);
        }
    }

    #[test]
    fn sd_residual_trivial_and_gaussian() {
        let n = 6;
        let spec = PotentialSpec::zero(vec![1.0], 1);
        let u = UnitaryTuple::empty(n);
        let samples = gaussian_samples(&spec.times, n, 1, 400, 3).unwrap();
        for w in ["1", "X1", "X1 X1", "X1 X1 X1", "X1 X1 X1 X1"] {
            let p = NCPolynomial::word(parse_word(w).unwrap());
            let r = sd_residual(&spec, &u, &samples, &p, 0).unwrap();
            assert!(r.within(0.0, 3.0, 1e-12), "{w}: {r:?}");
        }
    }

    #[test]
    fn sd_residual_rejects_cayley_in_differentiated_variable() {
        let spec = PotentialSpec::zero(vec![1.0], 1);
        let u = UnitaryTuple::empty(2);
        let x = rand_slots(2, 1, 1);
        let p = NCPolynomial::word(parse_word("u1").unwrap());
        assert!(sd_integrand(&spec, &u, &x, &p, 0).is_err());
    }

    #[test]
    fn concentration_report_on_gaussian() {
        let samples = gaussian_samples(&[1.0], 8, 1, 200, 1).unwrap();
        let p = NCPolynomial::word(parse_word("X1 X1").unwrap());
        let r = concentration_stats(&samples, &UnitaryTuple::empty(8), &p).unwrap();
        assert!((r.mean - 1.0).abs() < 0.05);
        assert!(r.max_operator_norm < 3.5 && r.mean_operator_norm > 1.5);
    }
}
