//! Strict TOML configuration.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use smp_core::coefficients::{
    builtin_problem, validate_assumptions_seeded, AssumptionReport, ControlSet, CostWeights, FamilyParams,
};
use smp_core::dynamics::ControlField;
use smp_core::field::{StateField, TimeGrid};
use smp_core::mesh::{Domain, Mesh};
use smp_core::noise::{NoiseSpec, Spectrum};
use smp_core::optimize::OptimizerOptions;
use smp_core::problem::ProblemSpec;

use crate::error::CliError;

/// Samples drawn when auditing the coefficient hypotheses.
pub const VALIDATION_SAMPLES: usize = 2000;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub domain: DomainSection,
    pub time: TimeSection,
    pub coefficients: CoefficientsSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub rng: RngSection,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Interval,
    Rectangle,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub kind: DomainKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: Vec<usize>,
    #[serde(default)]
    pub initial: InitialSection,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    /// `y₀ ≡ value`.
    Constant,
    /// `value · Π_i sin(π s_i)` in normalized coordinates `s ∈ [0, 1]^d`.
    Sine,
    /// `value · s_1`.
    Linear,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: InitialKind,
    pub value: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self { kind: InitialKind::Constant, value: 1.0 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub family: String,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one")]
    pub gamma_slope: f64,
    #[serde(default = "unit_beta")]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn unit_beta() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// Box bounds per component; default `[−1, 1]^m`.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Initial control value per component; default zero.
    pub initial: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_sigma")]
    pub sigma0: f64,
    /// Defaults to `sigma0`.
    #[serde(default)]
    pub boundary_sigma0: Option<f64>,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default = "four")]
    pub interior_modes: usize,
    #[serde(default = "four")]
    pub boundary_modes: usize,
}

fn yes() -> bool {
    true
}

fn default_sigma() -> f64 {
    0.1
}

fn four() -> usize {
    4
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma0: default_sigma(),
            boundary_sigma0: None,
            decay: 1.0,
            interior_modes: 4,
            boundary_modes: 4,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "one")]
    pub interior_running: f64,
    #[serde(default = "one")]
    pub boundary_running: f64,
    #[serde(default = "one")]
    pub control: f64,
    #[serde(default = "one")]
    pub interior_terminal: f64,
    #[serde(default = "one")]
    pub boundary_terminal: f64,
    #[serde(default)]
    pub target: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let w = CostWeights::default();
        Self {
            interior_running: w.interior_running,
            boundary_running: w.boundary_running,
            control: w.control,
            interior_terminal: w.interior_terminal,
            boundary_terminal: w.boundary_terminal,
            target: w.target,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub initial_step: Option<f64>,
    #[serde(default = "default_slope")]
    pub armijo_slope: f64,
    #[serde(default = "default_ratio")]
    pub backtrack_ratio: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "yes")]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub resample_every: usize,
}

fn default_paths() -> usize {
    OptimizerOptions::default().paths
}

fn default_iterations() -> usize {
    OptimizerOptions::default().max_iterations
}

fn default_slope() -> f64 {
    OptimizerOptions::default().armijo_slope
}

fn default_ratio() -> f64 {
    OptimizerOptions::default().backtrack_ratio
}

fn default_tolerance() -> f64 {
    OptimizerOptions::default().tolerance
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerOptions::default();
        Self {
            paths: o.paths,
            max_iterations: o.max_iterations,
            initial_step: o.initial_step,
            armijo_slope: o.armijo_slope,
            backtrack_ratio: o.backtrack_ratio,
            tolerance: o.tolerance,
            common_random_numbers: o.common_random_numbers,
            resample_every: o.resample_every,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RngSection {
    #[serde(default)]
    pub seed: u64,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }
}

/// A configuration turned into solver objects.
#[derive(Clone, Debug)]
pub struct Setup {
    pub config: Config,
    pub problem: ProblemSpec,
    pub options: OptimizerOptions,
    pub initial_control: ControlField,
    pub assumptions: AssumptionReport,
}

impl Setup {
    pub fn seed(&self) -> u64 {
        self.options.seed
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Builds every object and audits the coefficient hypotheses, without
/// failing on the audit result.
pub fn build(config: Config, seed_override: Option<u64>) -> Result<Setup, CliError> {
    let seed = seed_override.unwrap_or(config.rng.seed);
    let d = &config.domain;
    let dim = match d.kind {
        DomainKind::Interval => 1,
        DomainKind::Rectangle => 2,
    };
    if d.lower.len() != dim || d.upper.len() != dim || d.resolution.len() != dim {
        return Err(bad(format!("[domain] lower, upper and resolution need {dim} entries for a {:?}", d.kind)));
    }
    let domain = match d.kind {
        DomainKind::Interval => Domain::Interval { lo: d.lower[0], hi: d.upper[0] },
        DomainKind::Rectangle => Domain::Rectangle { lo: [d.lower[0], d.lower[1]], hi: [d.upper[0], d.upper[1]] },
    };
    let mesh = Mesh::build(&domain, &d.resolution)?;

    let c = &config.coefficients;
    let k = &config.cost;
    let params = FamilyParams {
        epsilon: c.epsilon,
        kappa: c.kappa,
        gamma_slope: c.gamma_slope,
        beta: c.beta.clone(),
        delta: c.delta,
        cost: CostWeights {
            interior_running: k.interior_running,
            boundary_running: k.boundary_running,
            control: k.control,
            interior_terminal: k.interior_terminal,
            boundary_terminal: k.boundary_terminal,
            target: k.target,
        },
    };
    let (family, default_set) = builtin_problem(&c.family, params)?;
    let m = default_set.dim();
    let ctl = &config.control;
    let lower = ctl.lower.clone().unwrap_or_else(|| default_set.lower().to_vec());
    let upper = ctl.upper.clone().unwrap_or_else(|| default_set.upper().to_vec());
    if lower.len() != m || upper.len() != m {
        return Err(bad(format!("[control] bounds need {m} entries (one per beta component)")));
    }
    let controls = ControlSet::new(lower, upper)?;

    let t = &config.time;
    let grid = TimeGrid::new(t.horizon, t.steps)?;

    let n = &config.noise;
    if n.sigma0 < 0.0 || n.boundary_sigma0.is_some_and(|s| s < 0.0) || !n.decay.is_finite() {
        return Err(bad("[noise] amplitudes must be nonnegative and decay finite"));
    }
    let spectrum =
        Spectrum { sigma0: n.sigma0, boundary_sigma0: n.boundary_sigma0.unwrap_or(n.sigma0), decay: n.decay };
    let mut noise = NoiseSpec::with_default_modes(&mesh, spectrum, n.interior_modes, n.boundary_modes, seed);
    if !n.enabled {
        noise = noise.silenced();
    }

    let lo = mesh.domain().lower();
    let hi = mesh.domain().upper();
    let init = &d.initial;
    let initial = StateField::from_fn(&mesh, |x| {
        let s = |i: usize| (x[i] - lo[i]) / (hi[i] - lo[i]);
        match init.kind {
            InitialKind::Constant => init.value,
            InitialKind::Sine => init.value * (0..dim).map(|i| (std::f64::consts::PI * s(i)).sin()).product::<f64>(),
            InitialKind::Linear => init.value * s(0),
        }
    });

    let assumptions = validate_assumptions_seeded(&family, &controls, dim, seed, VALIDATION_SAMPLES)?;
    let problem = ProblemSpec::new(mesh, Arc::new(family), controls, noise, grid, initial)?;

    let u0 = ctl.initial.clone().unwrap_or_else(|| vec![0.0; m]);
    if u0.len() != m {
        return Err(bad(format!("[control] initial needs {m} entries")));
    }
    let initial_control = ControlField::constant(&problem, &u0)?;

    let o = &config.optimizer;
    let options = OptimizerOptions {
        paths: o.paths,
        max_iterations: o.max_iterations,
        initial_step: o.initial_step,
        armijo_slope: o.armijo_slope,
        backtrack_ratio: o.backtrack_ratio,
        tolerance: o.tolerance,
        common_random_numbers: o.common_random_numbers,
        resample_every: o.resample_every,
        seed,
    };
    options.validate()?;
    Ok(Setup { config, problem, options, initial_control, assumptions })
}

/// Reads, builds and requires every hypothesis to pass.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<Setup, CliError> {
    let setup = build(Config::read(path)?, seed_override)?;
    if let Some(f) = setup.assumptions.first_failure() {
        return Err(CliError::Assumption {
            name: f.name.clone(),
            margin: f.worst_margin,
            sample: f.worst_sample.clone(),
        });
    }
    Ok(setup)
}
