//! The six experiment commands.

use serde::Serialize;
use serde_json::json;

use matlap::free_entropy::{
    calibrate_constant, chi_microstates_control, chi_perturbation, chi_star_adaptive, fisher_semicircular_flow, flow_diagnostics,
    flow_times, quadratic_law,
};
use matlap::gibbs::{gaussian_samples, mala_observe, sd_integrand, sd_residual};
use matlap::laplace::{controlled_slot_moments, grid_study, n_convergence_with, simulate_costs, slot_grid};
use matlap::matrix_core::{haar_unitaries, sample_normalized};
use matlap::nc_poly::Letter;
use matlap::rng::{derive_key, stream};
use matlap::sde::{euler_maruyama, langevin_coupling};
use matlap::yosida::{check_suite, SuiteOptions};
use matlap::{
    ConvergenceOptions, Error, FlowOptions, GibbsEnsemble, HermitianTuple, LhsOptions, MalaOptions, NCPolynomial, OptimalDrift, RhsOptions,
    UnitaryTuple, ValueEstimate,
};

use crate::config::Config;
use crate::error::AppError;
use crate::report::{Check, OutDir, Outcome};

const LAPLACE: &str = "the Laplace functional -(1/N^2) log E exp(-N^2 G) equals the minimal expected potential plus control cost";
const MIXING: &str = "independent MALA chains agree on every recorded moment (R-hat at most 1.1)";
const ENDPOINT: &str = "the optimally controlled diffusion ends in the Gibbs measure of the potential";
const SCHWINGER_DYSON: &str = "the Gibbs measure satisfies the Schwinger-Dyson equations with conjugate variable X + cyclic gradient of G";
const CONTRACTION: &str = "Langevin dynamics of a convex potential contracts squared distances at rate e^-t";
const BOUNDED_PATH: &str = "the controlled diffusion driven by the optimal drift stays finite on the horizon";
const ENTROPY: &str = "the control-cost entropy of the Gibbs law equals the Fisher-flow free entropy chi*";
const FLOW: &str = "free Fisher information along the semicircular flow is nonincreasing and Holder continuous";
const ENTROPY_MIN: &str = "the optimal drift minimizes the entropy cost: perturbing it lowers chi";
const YOSIDA_CLOSED: &str = "the Moreau envelope and proximal map of |y| are the Huber function and soft threshold";
const YOSIDA_FIRM: &str = "proximal maps are firmly nonexpansive";
const YOSIDA_LIP: &str = "the Yosida approximation is (1/lambda)-Lipschitz";
const YOSIDA_MONO: &str = "the Moreau envelope is nonincreasing in lambda and below g";

fn key(cfg: &Config, tag: u64, n: usize) -> u64 {
    derive_key(cfg.seed, &[tag, n as u64])
}

/// Haar unitaries for the external letters of the potential.
fn unitaries(cfg: &Config, n: usize) -> Result<UnitaryTuple, AppError> {
    let k = cfg.spec().extern_count();
    if k == 0 {
        return Ok(UnitaryTuple::empty(n));
    }
    Ok(haar_unitaries(n, k, &mut stream(cfg.seed, &[0xA1, n as u64]))?)
}

fn rhs_options(cfg: &Config, tag: u64, n: usize) -> RhsOptions {
    let b = &cfg.file.budgets;
    RhsOptions { paths: b.paths, steps: cfg.file.grid.steps, drift_samples: b.drift_samples, seed: key(cfg, tag, n), ..Default::default() }
}

fn mala_options(cfg: &Config, tag: u64, n: usize) -> MalaOptions {
    let b = &cfg.file.budgets;
    MalaOptions { chains: b.chains, burn_in: b.burn_in, samples: b.samples, thin: b.thin, seed: key(cfg, tag, n), ..Default::default() }
}

fn optimal_drift<'a>(cfg: &'a Config, n: usize, u: &UnitaryTuple, tag: u64) -> OptimalDrift<'a> {
    let mut field = OptimalDrift::new(cfg.spec(), n, cfg.file.budgets.drift_samples, key(cfg, tag, n));
    field.unitaries = u.clone();
    field
}

fn within(e: &ValueEstimate, target: f64) -> bool {
    (e.value - target).abs() <= 3.0 * e.stderr + 1e-12
}

pub fn laplace_verify(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let spec = cfg.spec();
    let b = &cfg.file.budgets;
    let opts = ConvergenceOptions {
        lhs: LhsOptions { samples: b.lhs_samples, seed: key(cfg, 1, 0), ..Default::default() },
        rhs: rhs_options(cfg, 2, 0),
    };
    let report = n_convergence_with(spec, &cfg.n, &opts, |n| {
        unitaries(cfg, n).map_err(|e| match e {
            AppError::Numerical(e) => e,
            other => Error::InvalidArgument(other.to_string()),
        })
    })?;
    let mut o = Outcome::default();
    for r in &report.rows {
        o.check(Check::new(
            format!("identity gap N={}", r.n),
            r.pass,
            LAPLACE,
            json!({ "lhs": r.lhs, "rhs": r.rhs, "gap": r.gap, "combined_stderr": r.combined_stderr, "lhs_method": r.lhs_method, "regime": r.regime }),
        ));
    }
    out.table_with("laplace.csv", |f| report.write_csv(f))?;
    o.result("rows", &report.rows);
    o.result("extrapolated", report.extrapolated);
    o.result("lhs_cauchy", report.lhs_cauchy);
    o.result("non_monotone", &report.non_monotone);
    if !cfg.file.grid.study.is_empty() {
        let n = *cfg.n.last().expect("validated nonempty");
        let rows = grid_study(spec, &unitaries(cfg, n)?, n, &rhs_options(cfg, 3, n), &cfg.file.grid.study)?;
        #[derive(Serialize)]
        struct Row {
            steps: usize,
            value: f64,
            stderr: f64,
        }
        let table: Vec<Row> = rows.iter().map(|r| Row { steps: r.steps, value: r.estimate.value, stderr: r.estimate.stderr }).collect();
        out.table("grid.csv", &table)?;
        o.result("grid_study", json!({ "n": n, "rows": table }));
    }
    Ok(o)
}

#[derive(Serialize)]
struct MomentRow {
    n: usize,
    slot: usize,
    variable: usize,
    power: u32,
    value: f64,
    stderr: f64,
    ess: f64,
    r_hat: f64,
}

pub fn gibbs_sample(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let spec = cfg.spec();
    let powers = &cfg.file.gibbs.powers;
    let index: Vec<(usize, usize, u32)> =
        (0..spec.slots()).flat_map(|j| (0..spec.m).flat_map(move |l| powers.iter().map(move |&p| (j, l, p)))).collect();
    let mut o = Outcome::default();
    let (mut table, mut compare, mut diagnostics) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &cfg.n {
        let u = unitaries(cfg, n)?;
        let ens = GibbsEnsemble::new(spec.clone(), n)?.with_unitaries(u.clone());
        let run = mala_observe(&ens, mala_options(cfg, 10, n), |x| index.iter().map(|&(j, l, p)| x[j].moment(l, p)).collect::<Vec<f64>>())?;
        let mut worst_rhat = 0.0f64;
        let mut rows = Vec::new();
        for (k, &(slot, variable, power)) in index.iter().enumerate() {
            let e = run.estimate(k);
            worst_rhat = worst_rhat.max(e.r_hat);
            rows.push(MomentRow { n, slot, variable, power, value: e.value, stderr: e.stderr, ess: e.ess, r_hat: e.r_hat });
        }
        o.check(Check::new(format!("chain agreement N={n}"), worst_rhat <= 1.1, MIXING, json!({ "max_r_hat": worst_rhat })));
        diagnostics.push(json!({ "n": n, "acceptance": run.acceptance, "step_sizes": run.step_sizes, "max_r_hat": worst_rhat }));
        if cfg.file.gibbs.compare_controlled {
            let field = optimal_drift(cfg, n, &u, 11);
            let pairs = simulate_costs(spec, &u, &field, n, &rhs_options(cfg, 12, n))?;
            let mut ok = true;
            let mut worst_z = 0.0f64;
            for sm in controlled_slot_moments(&pairs, powers) {
                let mala = rows.iter().find(|r| r.slot == sm.slot && r.variable == sm.variable && r.power == sm.power).expect("same index");
                let comb = sm.estimate.stderr.hypot(mala.stderr);
                let z = (sm.estimate.value - mala.value).abs() / comb.max(1e-300);
                ok &= (sm.estimate.value - mala.value).abs() <= 3.0 * comb;
                worst_z = worst_z.max(z);
                compare.push(json!({
                    "n": n, "slot": sm.slot, "variable": sm.variable, "power": sm.power,
                    "controlled": sm.estimate, "mala": { "value": mala.value, "stderr": mala.stderr },
                }));
            }
            o.check(Check::new(format!("controlled endpoint N={n}"), ok, ENDPOINT, json!({ "max_z": worst_z })));
        }
        table.extend(rows);
    }
    out.table("gibbs_moments.csv", &table)?;
    o.result("moments", &table);
    o.result("diagnostics", diagnostics);
    if cfg.file.gibbs.compare_controlled {
        o.result("controlled_comparison", compare);
    }
    Ok(o)
}

/// Monomials in each variable, plus mixed words when there are several.
fn sd_battery(variables: usize, degree: usize, mixed: bool) -> Vec<(usize, NCPolynomial)> {
    let mut out = Vec::new();
    for i in 0..variables {
        for d in 0..=degree {
            out.push((i, NCPolynomial::word(vec![Letter::x(i); d])));
        }
        if mixed {
            for j in (0..variables).filter(|&j| j != i) {
                let words = [vec![Letter::x(j)], vec![Letter::x(i), Letter::x(j)], vec![Letter::x(j), Letter::x(i), Letter::x(j)]];
                out.extend(words.into_iter().filter(|w| w.len() <= degree).map(|w| (i, NCPolynomial::word(w))));
            }
        }
    }
    out
}

/// Words print without their unit coefficient.
fn label(p: &NCPolynomial) -> String {
    match p.terms() {
        [(c, w)] if c.re == 1.0 && c.im == 0.0 => matlap::nc_poly::format_word(w),
        _ => p.to_string(),
    }
}

#[derive(Serialize)]
struct SdRow {
    n: usize,
    variable: usize,
    polynomial: String,
    residual: f64,
    stderr: f64,
    z: f64,
}

pub fn sd_check(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let spec = cfg.spec();
    let battery = sd_battery(spec.variables(), cfg.file.sd.degree, cfg.file.sd.mixed);
    let b = &cfg.file.budgets;
    let mut o = Outcome::default();
    let mut table = Vec::new();
    for &n in &cfg.n {
        let u = unitaries(cfg, n)?;
        // With no potential components the ensemble is the Brownian law at the slot times.
        let estimates: Vec<ValueEstimate> = if spec.components.is_empty() {
            let samples = gaussian_samples(&spec.times, n, spec.m, b.chains * b.samples, key(cfg, 20, n))?;
            battery.iter().map(|(i, p)| sd_residual(spec, &u, &samples, p, *i)).collect::<matlap::Result<_>>()?
        } else {
            let probe = matlap::gibbs::gaussian_path(&spec.times, n, spec.m, &mut stream(cfg.seed, &[21, n as u64]))?;
            for (i, p) in &battery {
                sd_integrand(spec, &u, &probe, p, *i)?;
            }
            let ens = GibbsEnsemble::new(spec.clone(), n)?.with_unitaries(u.clone());
            let run = mala_observe(&ens, mala_options(cfg, 22, n), |x| {
                battery.iter().map(|(i, p)| sd_integrand(spec, &u, x, p, *i).unwrap_or(f64::NAN)).collect::<Vec<f64>>()
            })?;
            (0..battery.len()).map(|k| run.estimate(k).as_value()).collect()
        };
        let mut ok = true;
        let mut worst_z = 0.0f64;
        for ((i, p), e) in battery.iter().zip(&estimates) {
            let z = e.value.abs() / e.stderr.max(1e-300);
            let pass = within(e, 0.0);
            ok &= pass;
            if e.value != 0.0 {
                worst_z = worst_z.max(z);
            }
            table.push(SdRow {
                n,
                variable: *i,
                polynomial: label(p),
                residual: e.value,
                stderr: e.stderr,
                z: if e.value == 0.0 { 0.0 } else { z },
            });
        }
        o.check(Check::new(
            format!("Schwinger-Dyson residuals N={n}"),
            ok,
            SCHWINGER_DYSON,
            json!({ "tests": battery.len(), "max_z": worst_z }),
        ));
    }
    out.table("sd_residuals.csv", &table)?;
    o.result("residuals", &table);
    Ok(o)
}

#[derive(Serialize)]
struct PathRow {
    n: usize,
    time: f64,
    variable: usize,
    second_moment: f64,
    drift_norm: f64,
}

#[derive(Serialize)]
struct CouplingRow {
    n: usize,
    pair: usize,
    time: f64,
    distance2: f64,
}

pub fn sde_run(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let spec = cfg.spec();
    let s = &cfg.file.sde;
    let mut o = Outcome::default();
    let (mut moments, mut coupling, mut endpoints) = (Vec::new(), Vec::new(), Vec::new());
    let langevin = spec.slots() == 1 && (spec.is_convex_mode() || spec.components.is_empty());
    for &n in &cfg.n {
        let u = unitaries(cfg, n)?;
        let field = optimal_drift(cfg, n, &u, 30);
        let grid = slot_grid(&spec.times, cfg.file.grid.steps)?;
        let path = euler_maruyama(&field, &HermitianTuple::zeros(n, spec.m), &grid, &mut stream(cfg.seed, &[31, n as u64]))?;
        out.table_with(&format!("path_N{n}.csv"), |f| path.write_csv(f, s.dump_stride))?;
        let pm = path.moments();
        let finite = pm.second.iter().flatten().chain(&pm.drift_norm).all(|v| v.is_finite());
        o.check(Check::new(format!("controlled path N={n}"), finite, BOUNDED_PATH, json!({ "nodes": pm.time.len() })));
        for (k, t) in pm.time.iter().enumerate() {
            for (l, &v) in pm.second[k].iter().enumerate() {
                moments.push(PathRow { n, time: *t, variable: l, second_moment: v, drift_norm: pm.drift_norm[k] });
            }
        }
        endpoints.push(json!({ "n": n, "second_moments": pm.second.last(), "final_drift_norm": pm.drift_norm.last() }));
        if langevin {
            let mut worst = 0.0f64;
            for p in 0..s.pairs {
                let mut rng = stream(cfg.seed, &[32, n as u64, p as u64]);
                let x0 = sample_normalized(n, spec.m, 1.0 + p as f64, &mut rng)?;
                let y0 = sample_normalized(n, spec.m, 0.5, &mut rng)?;
                let c = langevin_coupling(spec, &u, &x0, &y0, s.horizon, s.dt, &mut rng)?;
                worst = worst.max(c.worst_ratio);
                coupling.extend(c.time.iter().zip(&c.distance2).map(|(&time, &distance2)| CouplingRow { n, pair: p, time, distance2 }));
            }
            o.check(Check::new(
                format!("Langevin contraction N={n}"),
                worst <= 1.05,
                CONTRACTION,
                json!({ "worst_ratio": worst, "tolerance": 1.05 }),
            ));
        }
    }
    out.table("path_moments.csv", &moments)?;
    o.result("endpoints", endpoints);
    if langevin {
        out.table("coupling.csv", &coupling)?;
    } else {
        o.result("coupling", "skipped: Langevin contraction needs a one-slot convex potential");
    }
    Ok(o)
}

pub fn entropy_estimate(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let spec = cfg.spec();
    if spec.times.len() != 1 || spec.times[0] != 1.0 {
        return Err(AppError::Config { path: "potential.times".into(), msg: "entropy estimates need the single slot [1.0]".into() });
    }
    if !spec.is_convex_mode() {
        return Err(AppError::Config { path: "potential".into(), msg: "entropy estimates need a convex potential".into() });
    }
    let e = &cfg.file.entropy;
    let flow_opts = FlowOptions::default();
    let mut o = Outcome::default();
    let mut rows = Vec::new();
    if let Ok(law) = quadratic_law(spec) {
        let constant = calibrate_constant(&flow_opts)?;
        let star = chi_star_adaptive(&law, e.t_max, e.tol, &flow_opts)?;
        #[derive(Serialize)]
        struct Row {
            n: usize,
            chi: f64,
            chi_stderr: f64,
            chi_star: f64,
        }
        let mut table = Vec::new();
        for &n in &cfg.n {
            let u = unitaries(cfg, n)?;
            let r = chi_microstates_control(spec, &u, n, constant, &rhs_options(cfg, 40, n))?;
            let rel = ((r.chi.value - star) / star).abs();
            o.check(Check::new(
                format!("entropy routes agree N={n}"),
                rel <= e.rel_tolerance,
                ENTROPY,
                json!({ "chi": r.chi, "chi_star": star, "relative_gap": rel, "tolerance": e.rel_tolerance }),
            ));
            rows.push(json!({ "n": n, "chi": r.chi, "chi_g": r.chi_g, "second_moment": r.second_moment, "chi_star": star }));
            table.push(Row { n, chi: r.chi.value, chi_stderr: r.chi.stderr, chi_star: star });
        }
        let points = fisher_semicircular_flow(&law, &flow_times(e.flow_t_max, e.flow_points), &flow_opts)?;
        let d = flow_diagnostics(&points)?;
        o.check(Check::new(
            "Fisher flow regularity",
            d.nonincreasing && d.holder_exponent >= 0.45,
            FLOW,
            serde_json::to_value(d).expect("serializes"),
        ));
        #[derive(Serialize)]
        struct FlowRow {
            t: f64,
            fisher: f64,
            fisher_stderr: f64,
            fisher_conjugate: f64,
            residual: f64,
            mass: f64,
        }
        let flow: Vec<FlowRow> = points
            .iter()
            .map(|p| FlowRow {
                t: p.t,
                fisher: p.fisher.value,
                fisher_stderr: p.fisher.stderr,
                fisher_conjugate: p.fisher_conjugate,
                residual: p.residual,
                mass: p.mass,
            })
            .collect();
        out.table("flow.csv", &flow)?;
        o.result("constant", constant);
        o.result("chi_star", star);
        out.table("entropy.csv", &table)?;
    } else {
        #[derive(Serialize)]
        struct Row {
            n: usize,
            optimal: f64,
            optimal_stderr: f64,
            perturbed: f64,
            perturbed_stderr: f64,
        }
        let mut table = Vec::new();
        for &n in &cfg.n {
            let u = unitaries(cfg, n)?;
            let r = chi_perturbation(spec, &u, n, e.eps, &rhs_options(cfg, 41, n))?;
            o.check(Check::new(
                format!("optimal drift minimizes N={n}"),
                r.pass,
                ENTROPY_MIN,
                json!({ "optimal": r.optimal, "perturbed": r.perturbed, "eps": e.eps }),
            ));
            rows.push(serde_json::to_value(r).expect("serializes"));
            table.push(Row {
                n,
                optimal: r.optimal.value,
                optimal_stderr: r.optimal.stderr,
                perturbed: r.perturbed.value,
                perturbed_stderr: r.perturbed.stderr,
            });
        }
        out.table("entropy.csv", &table)?;
    }
    o.result("rows", rows);
    Ok(o)
}

pub fn yosida_test(cfg: &Config, out: &OutDir) -> Result<Outcome, AppError> {
    let y = &cfg.file.yosida;
    let r = check_suite(&SuiteOptions { pairs: y.pairs, dim: y.dim, lambdas: y.lambdas.clone(), seed: key(cfg, 50, 0) })?;
    let mut o = Outcome::default();
    o.check(Check::new("closed forms for |y|", r.closed_form_pass, YOSIDA_CLOSED, json!({ "max_error": r.closed_form_error })));
    o.check(Check::new("firm nonexpansiveness", r.firm_pass, YOSIDA_FIRM, json!({ "max_violation": r.firm_violation })));
    o.check(Check::new("Lipschitz bound", r.lipschitz_pass, YOSIDA_LIP, json!({ "max_ratio": r.lipschitz_ratio })));
    o.check(Check::new("envelope monotone in lambda", r.monotone, YOSIDA_MONO, json!({})));
    #[derive(Serialize)]
    struct Row {
        metric: &'static str,
        value: f64,
        pass: bool,
    }
    out.table(
        "yosida.csv",
        &[
            Row { metric: "closed_form_error", value: r.closed_form_error, pass: r.closed_form_pass },
            Row { metric: "firm_violation", value: r.firm_violation, pass: r.firm_pass },
            Row { metric: "lipschitz_ratio", value: r.lipschitz_ratio, pass: r.lipschitz_pass },
        ],
    )?;
    o.result("suite", &r);
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_counts() {
        assert_eq!(sd_battery(1, 3, true).len(), 4);
        // Per variable: 4 monomials and 3 mixed words.
        assert_eq!(sd_battery(2, 3, true).len(), 14);
        assert_eq!(sd_battery(2, 1, true).len(), 6);
        assert_eq!(sd_battery(2, 3, false).len(), 8);
    }
}
