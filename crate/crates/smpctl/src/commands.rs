use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use smp_core::adjoint::solve_adjoint_pathwise;
use smp_core::coefficients::AssumptionReport;
use smp_core::dynamics::{
    energy_bound, observed_order, solve_forward, variational_defects, BoundaryArray, ControlField,
};
use smp_core::field::{StateField, TimeGrid};
use smp_core::mesh::Mesh;
use smp_core::operator::norm_h;
use smp_core::optimize::{
    estimate_cost, evaluate_ensemble, gradient_check, run_optimizer, sample_coordinates, CostEstimate,
    OptimizerOptions, Status,
};
use smp_core::problem::ProblemSpec;
use smp_core::smp::{check_sufficient_from_means, OptimalityReport, Verdict};

use crate::config::{build, load_config, Config, Setup};
use crate::error::CliError;
use crate::io::{self, out_file};

/// Relative error bound of the deterministic gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Minimal observed order of the difference-quotient study.
pub const THETA_ORDER: f64 = 0.9;
/// Defects below this are roundoff and count as an exact difference quotient.
pub const EXACT_DEFECT: f64 = 1e-10;

/// Whether a command's check passed (exit 0) or failed (exit 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

fn verdict_word(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn validate(config: &Path, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let setup = build(Config::read(config)?, seed)?;
    let r: &AssumptionReport = &setup.assumptions;
    println!("family {} ({} samples)", r.family, r.samples);
    println!("constants delta={} c0={} c1={} c2={}", r.constants.delta, r.constants.c0, r.constants.c1, r.constants.c2);
    for c in &r.checks {
        println!("{} {:<24} worst margin {:e}", verdict_word(c.pass), c.name, c.worst_margin);
    }
    println!("assumptions {}", verdict_word(r.pass));
    io::ensure_dir(out)?;
    io::write_json(&out_file(out, "report.json"), &ValidateReport { seed: setup.seed(), assumptions: r })?;
    Ok(Outcome::from_bool(r.pass))
}

#[derive(Serialize)]
struct ValidateReport<'a> {
    seed: u64,
    assumptions: &'a AssumptionReport,
}

#[derive(Serialize)]
struct EnergySummary {
    mean_max_energy: f64,
    bound: f64,
    nonfinite_paths: usize,
}

#[derive(Serialize)]
struct SimulateReport {
    seed: u64,
    paths: usize,
    cost: CostEstimate,
    energy: EnergySummary,
}

pub fn simulate(config: &Path, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let setup = load_config(config, seed)?;
    let p = &setup.problem;
    let u = &setup.initial_control;
    let paths = if p.noise.is_silent() { 1 } else { setup.options.paths };
    let energies = (0..paths as u64)
        .into_par_iter()
        .map(|path| -> Result<f64, CliError> {
            let t = solve_forward(p, u, path)?;
            let mut worst: f64 = 0.0;
            for s in t.states() {
                worst = worst.max(norm_h(&p.mesh, s)?.powi(2));
            }
            Ok(worst)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
    let nonfinite = energies.iter().filter(|e| !e.is_finite()).count();
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    let bound = energy_bound(p, u)?.expected_sup;

    let traj = solve_forward(p, u, 0)?;
    let adj = solve_adjoint_pathwise(p, &traj, u)?;
    io::ensure_dir(out)?;
    io::write_trajectory(&out_file(out, "trajectory.csv"), setup.seed(), &p.mesh, &traj)?;
    io::write_adjoint(&out_file(out, "adjoint.csv"), setup.seed(), &p.mesh, &adj)?;
    let cost = estimate_cost(p, u, paths, setup.seed())?;
    let report = SimulateReport {
        seed: setup.seed(),
        paths,
        cost,
        energy: EnergySummary { mean_max_energy: mean, bound, nonfinite_paths: nonfinite },
    };
    io::write_json(&out_file(out, "report.json"), &report)?;
    println!("cost {} ± {} over {paths} paths", cost.mean, cost.half_width);
    let ok = nonfinite == 0 && mean <= bound;
    println!("energy E max|Y|^2 = {mean} vs bound {bound}: {}", verdict_word(ok));
    Ok(Outcome::from_bool(ok))
}

pub fn gradient_check_cmd(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    coordinates: usize,
    fd_step: f64,
) -> Result<Outcome, CliError> {
    let setup = load_config(config, seed)?;
    let p = &setup.problem;
    let coords = sample_coordinates(p, coordinates, setup.seed());
    let rows = gradient_check(p, &setup.initial_control, &coords, fd_step, setup.options.paths, setup.seed())?;
    io::ensure_dir(out)?;
    let mesh = &p.mesh;
    io::write_csv(
        &out_file(out, "gradcheck.csv"),
        setup.seed(),
        &io::GRADCHECK_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                mesh.boundary_nodes()[r.boundary_slot].to_string(),
                r.component.to_string(),
                r.adjoint.to_string(),
                r.finite_difference.to_string(),
                r.relative_error.to_string(),
                r.adjoint_half_width.to_string(),
                r.fd_half_width.to_string(),
                r.intervals_overlap().to_string(),
            ]
        }),
    )?;
    let max_rel = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let ok = if p.noise.is_silent() {
        println!("max relative error {max_rel:e} (bound {GRADCHECK_TOLERANCE:e})");
        max_rel <= GRADCHECK_TOLERANCE
    } else {
        let overlapping = rows.iter().filter(|r| r.intervals_overlap()).count();
        println!(
            "{overlapping}/{} coordinates with overlapping 95% intervals; max relative error {max_rel:e}",
            rows.len()
        );
        overlapping == rows.len()
    };
    println!("gradient check {}", verdict_word(ok));
    Ok(Outcome::from_bool(ok))
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    seed: u64,
    status: Status,
    iterations: usize,
    cost: f64,
    half_width: f64,
    options: &'a OptimizerOptions,
    optimality: &'a OptimalityReport,
}

pub fn optimize(config: &Path, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let setup = load_config(config, seed)?;
    let p = &setup.problem;
    let outcome = run_optimizer(p, &setup.initial_control, &setup.options)?;
    io::ensure_dir(out)?;
    let s = setup.seed();
    let recs = &outcome.history.records;
    io::write_csv(
        &out_file(out, "history.csv"),
        s,
        &io::HISTORY_COLUMNS,
        recs.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.cost.to_string(),
                r.half_width.to_string(),
                r.residual.to_string(),
                r.step.to_string(),
            ]
        }),
    )?;
    io::write_csv(
        &out_file(out, "timing.csv"),
        s,
        &io::TIMING_COLUMNS,
        recs.iter().map(|r| vec![r.iteration.to_string(), r.seconds.to_string()]),
    )?;
    io::write_control(&out_file(out, "control.csv"), s, &p.mesh, outcome.control.values())?;
    let last = recs.last().expect("history has iteration 0");
    let report = OptimizeReport {
        seed: s,
        status: outcome.status,
        iterations: last.iteration,
        cost: last.cost,
        half_width: last.half_width,
        options: &setup.options,
        optimality: &outcome.report,
    };
    io::write_json(&out_file(out, "report.json"), &report)?;
    println!(
        "{:?} after {} iterations: cost {} ± {}, residual {:e}",
        outcome.status, last.iteration, last.cost, last.half_width, last.residual
    );
    if let Some(suff) = &outcome.report.sufficiency {
        println!("sufficiency {:?} (sigma {})", suff.verdict, suff.sigma);
    }
    Ok(Outcome::from_bool(outcome.status == Status::Converged))
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    control_file: String,
    tolerance: f64,
    cost: CostEstimate,
    optimality: &'a OptimalityReport,
}

pub fn verify(config: &Path, seed: Option<u64>, out: &Path, control: &Path) -> Result<Outcome, CliError> {
    let setup = load_config(config, seed)?;
    let p = &setup.problem;
    let u = io::read_control(control, p)?;
    let eval = evaluate_ensemble(p, &u, setup.options.paths, setup.options.seed_for(0))?;
    let tol = 10.0 * setup.options.tolerance;
    let report = check_sufficient_from_means(p, &u, &eval.gradient, &eval.boundary_costate, tol)?;
    io::ensure_dir(out)?;
    io::write_json(
        &out_file(out, "report.json"),
        &VerifyReport {
            seed: setup.seed(),
            control_file: control.display().to_string(),
            tolerance: tol,
            cost: eval.cost,
            optimality: &report,
        },
    )?;
    println!("residual {:e}", report.residual);
    if let Some(w) = &report.witness {
        println!(
            "witness: step {} (t = {}), boundary node {}, control {:?}, direction {:?}",
            w.step, w.time, w.node, w.control, w.direction
        );
    }
    let verdict = report.sufficiency.as_ref().map(|s| s.verdict);
    if let Some(v) = verdict {
        println!("sufficiency {v:?}");
    }
    let ok = report.residual <= tol && verdict != Some(Verdict::Fails);
    println!("verify {}", verdict_word(ok));
    Ok(Outcome::from_bool(ok))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub study: &'static str,
    pub level: usize,
    pub steps: usize,
    pub resolution: String,
    pub parameter: f64,
    pub error: f64,
    pub order: Option<f64>,
}

fn resolution_label(mesh: &Mesh) -> String {
    mesh.resolution().iter().map(|r| r.to_string()).collect::<Vec<_>>().join("x")
}

fn with_orders(mut rows: Vec<StudyRow>) -> Vec<StudyRow> {
    for i in 1..rows.len() {
        let ratio = rows[i - 1].parameter / rows[i].parameter;
        rows[i].order = Some((rows[i - 1].error / rows[i].error).ln() / ratio.ln());
    }
    rows
}

fn terminal_state(p: &ProblemSpec, value: &[f64]) -> Result<StateField, CliError> {
    let u = ControlField::constant(p, value)?;
    Ok(solve_forward(p, &u, 0)?.terminal().clone())
}

/// Refinement in `Δt` against a run with 16× the finest step count.
fn time_study(p: &ProblemSpec, u: &[f64], levels: usize) -> Result<Vec<StudyRow>, CliError> {
    let horizon = p.grid.horizon();
    let n0 = p.steps();
    let reference = terminal_state(&p.with_grid(TimeGrid::new(horizon, n0 << (levels + 3))?), u)?;
    let mut rows = Vec::new();
    for l in 0..levels {
        let steps = n0 << l;
        let q = p.with_grid(TimeGrid::new(horizon, steps)?);
        let mut d = terminal_state(&q, u)?;
        d.axpy(-1.0, &reference);
        rows.push(StudyRow {
            study: "time",
            level: l,
            steps,
            resolution: resolution_label(&p.mesh),
            parameter: horizon / steps as f64,
            error: norm_h(&p.mesh, &d)?,
            order: None,
        });
    }
    Ok(with_orders(rows))
}

fn refine(p: &ProblemSpec, factor: usize) -> Result<ProblemSpec, CliError> {
    let res: Vec<usize> = p.mesh.resolution().iter().map(|r| (r - 1) * factor + 1).collect();
    let mesh = Mesh::build(p.mesh.domain(), &res)?;
    // Same patterns and amplitudes on the finer mesh; the study runs without noise.
    let noise = smp_core::noise::NoiseSpec::none(p.seed());
    let initial = interpolate_initial(p, &mesh);
    Ok(ProblemSpec::new(mesh, p.coeffs.clone(), p.controls.clone(), noise, p.grid.clone(), initial)?)
}

/// Nodal values of the initial state on a nested refinement (P1 interpolation).
fn interpolate_initial(p: &ProblemSpec, fine: &Mesh) -> StateField {
    let coarse = &p.mesh;
    let res = coarse.resolution();
    let lo = coarse.domain().lower();
    let hi = coarse.domain().upper();
    let y = &p.initial;
    StateField::from_fn(fine, |x| {
        let locate = |axis: usize| {
            let n = res[axis];
            let s = ((x[axis] - lo[axis]) / (hi[axis] - lo[axis]) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        if res.len() == 1 {
            let (i, t) = locate(0);
            (1.0 - t) * y[i] + t * y[i + 1]
        } else {
            let nx = res[0];
            let (i, tx) = locate(0);
            let (j, ty) = locate(1);
            let v = |a: usize, b: usize| y[b * nx + a];
            (1.0 - tx) * (1.0 - ty) * v(i, j)
                + tx * (1.0 - ty) * v(i + 1, j)
                + (1.0 - tx) * ty * v(i, j + 1)
                + tx * ty * v(i + 1, j + 1)
        }
    })
}

/// Refinement in `h` at fixed `Δt` against a finer nested mesh, compared at the coarse nodes in the coarse lumped H-norm.
fn space_study(p: &ProblemSpec, u: &[f64], levels: usize) -> Result<Vec<StudyRow>, CliError> {
    // Two extra halvings in 1D; one in 2D keeps the reference mesh affordable.
    let extra = if p.mesh.resolution().len() == 1 { 2 } else { 1 };
    let rf = 1usize << (levels - 1 + extra);
    let reference_problem = refine(p, rf)?;
    let reference = terminal_state(&reference_problem, u)?;
    let fine_res = reference_problem.mesh.resolution().to_vec();
    let mut rows = Vec::new();
    for l in 0..levels {
        let factor = 1usize << l;
        let q = refine(p, factor)?;
        let y = terminal_state(&q, u)?;
        let res = q.mesh.resolution().to_vec();
        let stride = rf / factor;
        let err2: f64 = (0..q.mesh.num_nodes())
            .map(|node| {
                let fine = if res.len() == 1 {
                    node * stride
                } else {
                    let (i, j) = (node % res[0], node / res[0]);
                    (j * stride) * fine_res[0] + i * stride
                };
                q.mesh.h_mass()[node] * (y[node] - reference[fine]).powi(2)
            })
            .sum();
        let h = (p.mesh.domain().upper()[0] - p.mesh.domain().lower()[0]) / (res[0] - 1) as f64;
        rows.push(StudyRow {
            study: "space",
            level: l,
            steps: p.steps(),
            resolution: resolution_label(&q.mesh),
            parameter: h,
            error: err2.sqrt(),
            order: None,
        });
    }
    Ok(with_orders(rows))
}

/// Direction pointing away from the nearer bound, with a smooth time profile.
fn interior_direction(p: &ProblemSpec, u: &ControlField) -> BoundaryArray {
    let (lo, hi) = (p.controls.lower(), p.controls.upper());
    let mut w = BoundaryArray::zeros(p.steps(), p.mesh.num_boundary(), p.control_dim());
    for n in 0..p.steps() {
        let profile = 0.5 + 0.5 * (3.0 * p.grid.time(n)).sin();
        for k in 0..p.mesh.num_boundary() {
            for c in 0..p.control_dim() {
                let v = u.values().at(n, k)[c];
                let mid = if lo[c].is_finite() && hi[c].is_finite() { 0.5 * (lo[c] + hi[c]) } else { v };
                let span = (hi[c] - lo[c]).min(2.0);
                let sign = if v <= mid { 1.0 } else { -1.0 };
                w.at_mut(n, k)[c] = sign * 0.25 * span * profile;
            }
        }
    }
    w
}

fn theta_study(setup: &Setup) -> Result<Vec<StudyRow>, CliError> {
    let p = &setup.problem;
    let u = &setup.initial_control;
    let w = interior_direction(p, u);
    let thetas = [1e-1, 1e-2, 1e-3];
    let errors = variational_defects(p, u, &w, &thetas, 0)?;
    let rows = thetas
        .iter()
        .zip(&errors)
        .enumerate()
        .map(|(l, (&t, &e))| StudyRow {
            study: "theta",
            level: l,
            steps: p.steps(),
            resolution: resolution_label(&p.mesh),
            parameter: t,
            error: e,
            order: None,
        })
        .collect();
    Ok(with_orders(rows))
}

pub fn convergence(config: &Path, seed: Option<u64>, out: &Path, levels: usize) -> Result<Outcome, CliError> {
    if levels < 2 {
        return Err(CliError::Config("convergence needs at least 2 levels".into()));
    }
    let setup = load_config(config, seed)?;
    let det = setup.problem.deterministic();
    let u0 = setup.initial_control.values().at(0, 0).to_vec();
    let mut rows = time_study(&det, &u0, levels)?;
    rows.extend(space_study(&det, &u0, levels)?);
    let theta = theta_study(&setup)?;
    let thetas: Vec<f64> = theta.iter().map(|r| r.parameter).collect();
    let errors: Vec<f64> = theta.iter().map(|r| r.error).collect();
    // A control-affine problem has a roundoff-level defect: the quotient is exact.
    let exact = errors.iter().all(|&e| e <= EXACT_DEFECT);
    let theta_order = if exact { f64::INFINITY } else { observed_order(&thetas, &errors) };
    rows.extend(theta);
    io::ensure_dir(out)?;
    io::write_csv(
        &out_file(out, "convergence.csv"),
        setup.seed(),
        &io::CONVERGENCE_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.study.to_string(),
                r.level.to_string(),
                r.steps.to_string(),
                r.resolution.clone(),
                r.parameter.to_string(),
                r.error.to_string(),
                r.order.map(|o| o.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    for r in &rows {
        let order = r.order.map(|o| format!("{o:.3}")).unwrap_or_else(|| "-".into());
        println!("{:<6} level {} parameter {:e} error {:e} order {order}", r.study, r.level, r.parameter, r.error);
    }
    let ok = theta_order >= THETA_ORDER;
    if exact {
        println!("difference quotient exact to roundoff: {}", verdict_word(ok));
    } else {
        println!("difference-quotient order {theta_order:.3}: {}", verdict_word(ok));
    }
    Ok(Outcome::from_bool(ok))
}

pub fn default_out() -> PathBuf {
    PathBuf::from("smpctl-out")
}
