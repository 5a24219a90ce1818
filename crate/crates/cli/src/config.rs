//! Experiment configuration: a single JSON document, validated with field paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use matlap::PotentialSpec;

use crate::error::AppError;

/// Subcommands; the optional `command` field of a config must match the one invoked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    LaplaceVerify,
    GibbsSample,
    SdCheck,
    SdeRun,
    EntropyEstimate,
    YosidaTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::LaplaceVerify => "laplace-verify",
            Command::GibbsSample => "gibbs-sample",
            Command::SdCheck => "sd-check",
            Command::SdeRun => "sde-run",
            Command::EntropyEstimate => "entropy-estimate",
            Command::YosidaTest => "yosida-test",
        }
    }

    fn needs_potential(self) -> bool {
        self != Command::YosidaTest
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Samples for the left-hand side of the Laplace identity.
    pub lhs_samples: usize,
    /// Controlled paths per estimate.
    pub paths: usize,
    /// Inner Monte Carlo draws per drift evaluation.
    pub drift_samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    /// Kept draws per chain.
    pub samples: usize,
    pub thin: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { lhs_samples: 20_000, paths: 64, drift_samples: 32, chains: 4, burn_in: 300, samples: 300, thin: 2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    /// Euler steps over the potential's time horizon.
    pub steps: usize,
    /// Extra step counts for a discretization study at the largest `N`.
    pub study: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { steps: 16, study: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSection {
    pub powers: Vec<u32>,
    /// Also compare against endpoint moments of the controlled diffusion.
    pub compare_controlled: bool,
}

impl Default for GibbsSection {
    fn default() -> Self {
        Self { powers: vec![2, 4], compare_controlled: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdSection {
    /// Largest monomial degree in the test battery.
    pub degree: usize,
    /// Add mixed words when there are several variables.
    pub mixed: bool,
}

impl Default for SdSection {
    fn default() -> Self {
        Self { degree: 3, mixed: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    /// Keep every `dump_stride`-th node in the path dumps.
    pub dump_stride: usize,
    /// Langevin coupling horizon.
    pub horizon: f64,
    pub dt: f64,
    /// Coupled Langevin pairs per `N`.
    pub pairs: usize,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self { dump_stride: 1, horizon: 3.0, dt: 0.01, pairs: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    /// Horizon of the adaptive Fisher-flow integral.
    pub t_max: f64,
    pub tol: f64,
    /// Horizon and point count of the tabulated flow.
    pub flow_t_max: f64,
    pub flow_points: usize,
    /// Allowed relative gap between the two entropy routes.
    pub rel_tolerance: f64,
    /// Drift perturbation size for non-quadratic potentials.
    pub eps: f64,
}

impl Default for EntropySection {
    fn default() -> Self {
        Self { t_max: 100.0, tol: 1e-8, flow_t_max: 4.0, flow_points: 24, rel_tolerance: 0.05, eps: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YosidaSection {
    pub pairs: usize,
    pub dim: usize,
    pub lambdas: Vec<f64>,
}

impl Default for YosidaSection {
    fn default() -> Self {
        let d = matlap::yosida::SuiteOptions::default();
        Self { pairs: d.pairs, dim: d.dim, lambdas: d.lambdas }
    }
}

/// The document as written on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<serde_json::Value>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub gibbs: GibbsSection,
    #[serde(default)]
    pub sd: SdSection,
    #[serde(default)]
    pub sde: SdeSection,
    #[serde(default)]
    pub entropy: EntropySection,
    #[serde(default)]
    pub yosida: YosidaSection,
}

/// Validated configuration with the seed resolved.
#[derive(Clone, Debug)]
pub struct Config {
    pub command: Command,
    pub spec: Option<PotentialSpec>,
    pub n: Vec<usize>,
    pub seed: u64,
    pub file: ConfigFile,
}

impl Config {
    pub fn spec(&self) -> &PotentialSpec {
        self.spec.as_ref().expect("validated configs carry a potential for this command")
    }

    /// The resolved document, written next to the report.
    pub fn echo(&self) -> serde_json::Value {
        let mut file = self.file.clone();
        file.command = Some(self.command);
        file.seed = Some(self.seed);
        file.potential = self.spec.as_ref().map(PotentialSpec::to_json_value);
        serde_json::to_value(file).expect("configs always serialize")
    }
}

fn bad<T>(path: &str, msg: impl Into<String>) -> Result<T, AppError> {
    Err(AppError::Config { path: path.to_string(), msg: msg.into() })
}

pub fn load(path: &Path, command: Command, seed_override: Option<u64>) -> Result<Config, AppError> {
    let text = std::fs::read_to_string(path).or_else(|e| bad("", format!("cannot read {}: {e}", path.display())))?;
    parse(&text, command, seed_override)
}

pub fn parse(text: &str, command: Command, seed_override: Option<u64>) -> Result<Config, AppError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).or_else(|e| {
        let path = e.path().to_string();
        bad(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })?;
    if let Some(c) = file.command {
        if c != command {
            return bad("command", format!("config is for '{}' but '{}' was invoked", c.name(), command.name()));
        }
    }
    let seed = match seed_override.or(file.seed) {
        Some(s) => s,
        None => return bad("seed", "a seed is required (in the config or via --seed)"),
    };
    let spec = match (&file.potential, command.needs_potential()) {
        (Some(v), _) => Some(PotentialSpec::from_json_value(v).or_else(|e| match e {
            matlap::Error::Field { field, msg } if field.is_empty() => bad("potential", msg),
            matlap::Error::Field { field, msg } => bad(&format!("potential.{field}"), msg),
            other => bad("potential", other.to_string()),
        })?),
        (None, true) => return bad("potential", format!("required for {}", command.name())),
        (None, false) => None,
    };
    validate(&file, command)?;
    Ok(Config { command, spec, n: file.n.clone(), seed, file })
}

fn positive(path: &str, v: usize) -> Result<(), AppError> {
    if v == 0 {
        return bad(path, "must be positive");
    }
    Ok(())
}

fn positive_f(path: &str, v: f64) -> Result<(), AppError> {
    if !(v > 0.0 && v.is_finite()) {
        return bad(path, format!("must be a positive finite number, got {v}"));
    }
    Ok(())
}

fn validate(f: &ConfigFile, command: Command) -> Result<(), AppError> {
    let b = &f.budgets;
    for (name, v) in [
        ("lhs_samples", b.lhs_samples),
        ("paths", b.paths),
        ("drift_samples", b.drift_samples),
        ("chains", b.chains),
        ("burn_in", b.burn_in),
        ("samples", b.samples),
        ("thin", b.thin),
    ] {
        positive(&format!("budgets.{name}"), v)?;
    }
    if b.lhs_samples < 2 || b.paths < 2 {
        return bad("budgets", "lhs_samples and paths must be at least 2");
    }
    positive("grid.steps", f.grid.steps)?;
    for (i, &s) in f.grid.study.iter().enumerate() {
        positive(&format!("grid.study[{i}]"), s)?;
    }
    if command.needs_potential() {
        if f.n.is_empty() {
            return bad("n", format!("at least one matrix size is required for {}", command.name()));
        }
        for (i, &n) in f.n.iter().enumerate() {
            positive(&format!("n[{i}]"), n)?;
        }
        if f.n.windows(2).any(|w| w[1] <= w[0]) {
            return bad("n", "matrix sizes must be strictly increasing");
        }
    }
    if f.gibbs.powers.is_empty() || f.gibbs.powers.iter().any(|&p| p == 0 || p > 12) {
        return bad("gibbs.powers", "powers must lie in 1..=12 and the list must be nonempty");
    }
    if f.sd.degree > 8 {
        return bad("sd.degree", "at most 8");
    }
    positive("sde.dump_stride", f.sde.dump_stride)?;
    positive("sde.pairs", f.sde.pairs)?;
    positive_f("sde.horizon", f.sde.horizon)?;
    positive_f("sde.dt", f.sde.dt)?;
    let e = &f.entropy;
    positive_f("entropy.t_max", e.t_max)?;
    positive_f("entropy.tol", e.tol)?;
    positive_f("entropy.flow_t_max", e.flow_t_max)?;
    positive_f("entropy.rel_tolerance", e.rel_tolerance)?;
    positive_f("entropy.eps", e.eps)?;
    if e.flow_points < 4 {
        return bad("entropy.flow_points", "at least 4");
    }
    positive("yosida.pairs", f.yosida.pairs)?;
    positive("yosida.dim", f.yosida.dim)?;
    if f.yosida.lambdas.is_empty() {
        return bad("yosida.lambdas", "at least one value is required");
    }
    for (i, &l) in f.yosida.lambdas.iter().enumerate() {
        positive_f(&format!("yosida.lambdas[{i}]"), l)?;
    }
    Ok(())
}
