//! Monte Carlo cost and gradient estimation, and projected-gradient descent.
//!
//! Paths are simulated in parallel and reduced in path order, so every
//! estimate is a deterministic function of (problem, control, path count,
//! seed) whatever the size of the thread pool.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::solve_adjoint_pathwise;
use crate::dynamics::{path_cost, solve_forward_seeded, BoundaryArray, ControlField};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::smp::{check_sufficient_from_means, gradient_density, smp_residual, weighted_inner, OptimalityReport};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;
pub const MAX_BACKTRACKS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerOptions {
    pub paths: usize,
    pub max_iterations: usize,
    /// First trial step; estimated from two probe evaluations if absent.
    pub initial_step: Option<f64>,
    /// Armijo sufficient-decrease fraction.
    pub armijo_slope: f64,
    pub backtrack_ratio: f64,
    /// Stop once the projected-gradient residual is at or below this.
    pub tolerance: f64,
    pub common_random_numbers: bool,
    /// With common random numbers, draw a fresh seed every this many
    /// iterations (0 keeps the master seed throughout).
    pub resample_every: usize,
    pub seed: u64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            paths: 64,
            max_iterations: 200,
            initial_step: None,
            armijo_slope: 1e-4,
            backtrack_ratio: 0.5,
            tolerance: 1e-6,
            common_random_numbers: true,
            resample_every: 0,
            seed: 0,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.paths == 0 {
            return bad("optimizer needs at least one path".into());
        }
        if !(self.armijo_slope > 0.0 && self.armijo_slope < 1.0) {
            return bad(format!("armijo_slope {} must lie in (0, 1)", self.armijo_slope));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad(format!("backtrack_ratio {} must lie in (0, 1)", self.backtrack_ratio));
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance {} must be nonnegative", self.tolerance));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("initial_step {s} must be positive"));
            }
        }
        Ok(())
    }

    /// Seed used at iteration `it`.
    pub fn seed_for(&self, it: usize) -> u64 {
        let epoch = if self.common_random_numbers { it.checked_div(self.resample_every).unwrap_or(0) } else { it };
        if epoch == 0 {
            self.seed
        } else {
            splitmix(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample mean of the path costs with its 95% half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub half_width: f64,
    pub paths: usize,
}

fn mean_and_half_width(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * (var / n).sqrt())
}

/// Silent noise makes every path identical, so one suffices.
fn effective_paths(problem: &ProblemSpec, n_paths: usize) -> Result<usize> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    Ok(if problem.noise.is_silent() { 1 } else { n_paths })
}

fn tag(path: u64) -> impl Fn(Error) -> Error {
    move |e| Error::Path { path, source: Box::new(e) }
}

/// Cost of each path, in path order.
pub fn path_costs(problem: &ProblemSpec, control: &ControlField, n_paths: usize, seed: u64) -> Result<Vec<f64>> {
    let n = effective_paths(problem, n_paths)?;
    (0..n as u64)
        .into_par_iter()
        .map(|path| {
            let traj = solve_forward_seeded(problem, control, seed, path).map_err(tag(path))?;
            path_cost(problem, &traj, control).map_err(tag(path))
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .collect()
}

pub fn estimate_cost(problem: &ProblemSpec, control: &ControlField, n_paths: usize, seed: u64) -> Result<CostEstimate> {
    let costs = path_costs(problem, control, n_paths, seed)?;
    let (mean, half_width) = mean_and_half_width(&costs);
    Ok(CostEstimate { mean, half_width, paths: costs.len() })
}

/// Cost, gradient density and boundary co-state averaged over an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub cost: CostEstimate,
    pub path_costs: Vec<f64>,
    pub gradient: BoundaryArray,
    /// Standard error of each gradient coordinate.
    pub gradient_std_error: BoundaryArray,
    /// Mean boundary co-state, one value per (step, boundary slot).
    pub boundary_costate: BoundaryArray,
}

pub fn evaluate_ensemble(
    problem: &ProblemSpec,
    control: &ControlField,
    n_paths: usize,
    seed: u64,
) -> Result<Evaluation> {
    let n = effective_paths(problem, n_paths)?;
    let mesh = &problem.mesh;
    let per_path = (0..n as u64)
        .into_par_iter()
        .map(|path| {
            let run = || -> Result<(f64, BoundaryArray, Vec<f64>)> {
                let traj = solve_forward_seeded(problem, control, seed, path)?;
                let cost = path_cost(problem, &traj, control)?;
                let adj = solve_adjoint_pathwise(problem, &traj, control)?;
                let g = gradient_density(problem, &traj, control, &adj)?;
                let pb = (0..problem.steps())
                    .flat_map(|s| mesh.boundary_nodes().iter().map(move |&b| (s, b)))
                    .map(|(s, b)| adj.state(s)[b])
                    .collect();
                Ok((cost, g, pb))
            };
            run().map_err(tag(path))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let path_costs: Vec<f64> = per_path.iter().map(|r| r.0).collect();
    let (mean, half_width) = mean_and_half_width(&path_costs);
    let first = &per_path[0].1;
    let (steps, nb, m) = (first.steps(), first.boundary(), first.dim());
    let mut sum = vec![0.0; first.len()];
    let mut pbar = vec![0.0; steps * nb];
    for (_, g, pb) in &per_path {
        sum.iter_mut().zip(g.as_slice()).for_each(|(a, v)| *a += v);
        pbar.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
    }
    let nf = n as f64;
    let gmean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let mut se = vec![0.0; gmean.len()];
    if n > 1 {
        for (_, g, _) in &per_path {
            se.iter_mut().zip(g.as_slice().iter().zip(&gmean)).for_each(|(a, (v, mu))| *a += (v - mu).powi(2));
        }
        se.iter_mut().for_each(|a| *a = (*a / (nf - 1.0) / nf).sqrt());
    }
    Ok(Evaluation {
        cost: CostEstimate { mean, half_width, paths: n },
        path_costs,
        gradient: BoundaryArray::from_vec(steps, nb, m, gmean)?,
        gradient_std_error: BoundaryArray::from_vec(steps, nb, m, se)?,
        boundary_costate: BoundaryArray::from_vec(steps, nb, 1, pbar.iter().map(|v| v / nf).collect())?,
    })
}

/// Mean gradient density over `n_paths` paths of `seed`.
pub fn estimate_gradient(
    problem: &ProblemSpec,
    control: &ControlField,
    n_paths: usize,
    seed: u64,
) -> Result<BoundaryArray> {
    Ok(evaluate_ensemble(problem, control, n_paths, seed)?.gradient)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub half_width: f64,
    pub residual: f64,
    /// Accepted step (0 at iteration 0).
    pub step: f64,
    /// Wall time since the start of the run; excluded from serialization so
    /// that reports are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct OptimizerOutcome {
    pub control: ControlField,
    pub history: RunHistory,
    pub report: OptimalityReport,
    pub status: Status,
    pub evaluation: Evaluation,
}

fn step_to(problem: &ProblemSpec, u: &ControlField, g: &BoundaryArray, alpha: f64) -> Result<ControlField> {
    ControlField::projected(problem, &u.values().plus_scaled(-alpha, g))
}

fn weighted_norm(problem: &ProblemSpec, a: &BoundaryArray) -> f64 {
    weighted_inner(problem, a, a).sqrt()
}

/// `α₀ = 1 / (1 + L)` with `L = ‖g(u₁) − g(u)‖_W / ‖u₁ − u‖_W` and
/// `u₁ = Π_U(u − g)`.
fn initial_step(problem: &ProblemSpec, u: &ControlField, eval: &Evaluation, paths: usize, seed: u64) -> Result<f64> {
    let probe = step_to(problem, u, &eval.gradient, 1.0)?;
    let du = weighted_norm(problem, &probe.values().minus(u.values()));
    if du == 0.0 {
        return Ok(1.0);
    }
    let g1 = estimate_gradient(problem, &probe, paths, seed)?;
    let lip = weighted_norm(problem, &g1.minus(&eval.gradient)) / du;
    Ok(1.0 / (1.0 + lip))
}

/// Projected gradient descent `u ← Π_U(u − α g)` with Armijo backtracking on
/// the sample-average cost. The final report is the sufficiency check at ten
/// times the tolerance.
pub fn run_optimizer(problem: &ProblemSpec, u0: &ControlField, opts: &OptimizerOptions) -> Result<OptimizerOutcome> {
    opts.validate()?;
    let start = Instant::now();
    let mut u = u0.clone();
    let mut seed = opts.seed_for(0);
    let mut eval = evaluate_ensemble(problem, &u, opts.paths, seed)?;
    let mut residual = smp_residual(problem, &u, &eval.gradient, 1.0)?.residual;
    let mut history = RunHistory::default();
    history.records.push(IterationRecord {
        iteration: 0,
        cost: eval.cost.mean,
        half_width: eval.cost.half_width,
        residual,
        step: 0.0,
        seconds: start.elapsed().as_secs_f64(),
    });
    let mut status = Status::MaxIterations;
    let mut alpha = match opts.initial_step {
        Some(a) => a,
        None if residual > opts.tolerance => initial_step(problem, &u, &eval, opts.paths, seed)?,
        None => 1.0,
    };

    for it in 1..=opts.max_iterations {
        if residual <= opts.tolerance {
            status = Status::Converged;
            break;
        }
        let next_seed = opts.seed_for(it);
        if next_seed != seed {
            seed = next_seed;
            eval = evaluate_ensemble(problem, &u, opts.paths, seed)?;
        }
        // After the first iteration, try one growth step before backtracking.
        let mut trial = if it == 1 { alpha } else { alpha / opts.backtrack_ratio };
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let cand = step_to(problem, &u, &eval.gradient, trial)?;
            let d = cand.values().minus(u.values());
            let slope = weighted_inner(problem, &eval.gradient, &d);
            let ce = evaluate_ensemble(problem, &cand, opts.paths, seed)?;
            if ce.cost.mean <= eval.cost.mean + opts.armijo_slope * slope {
                accepted = Some((cand, ce));
                break;
            }
            trial *= opts.backtrack_ratio;
        }
        let Some((cand, ce)) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };
        alpha = trial;
        u = cand;
        eval = ce;
        residual = smp_residual(problem, &u, &eval.gradient, 1.0)?.residual;
        history.records.push(IterationRecord {
            iteration: it,
            cost: eval.cost.mean,
            half_width: eval.cost.half_width,
            residual,
            step: alpha,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if residual <= opts.tolerance {
        status = Status::Converged;
    }
    let report =
        check_sufficient_from_means(problem, &u, &eval.gradient, &eval.boundary_costate, 10.0 * opts.tolerance)?;
    Ok(OptimizerOutcome { control: u, history, report, status, evaluation: eval })
}

/// One row of a gradient check: the adjoint derivative of the cost with
/// respect to a single control value against a finite difference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheckRow {
    pub step: usize,
    pub boundary_slot: usize,
    pub component: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    pub adjoint_half_width: f64,
    pub fd_half_width: f64,
}

impl GradientCheckRow {
    /// Whether the two 95% intervals intersect.
    pub fn intervals_overlap(&self) -> bool {
        (self.adjoint - self.finite_difference).abs() <= self.adjoint_half_width + self.fd_half_width
    }
}

/// `|a − b| / max(|a|, |b|)`, or `|a − b|` when both are below `1e-10`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// `count` distinct control coordinates `(step, slot, component)` drawn with
/// a ChaCha8 stream seeded by `seed`.
pub fn sample_coordinates(problem: &ProblemSpec, count: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let (nb, m) = (problem.mesh.num_boundary(), problem.control_dim());
    let total = problem.steps() * nb * m;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, count.min(total)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| (i / (nb * m), (i / m) % nb, i % m)).collect()
}

/// Compares `∂J/∂u_{n,k,c} = Δt M_Γ[k] ḡ_{n,k,c}` with central differences of
/// the sample-average cost (one-sided and inward where `u ± h` leaves `U`),
/// all paths sharing the same seed.
pub fn gradient_check(
    problem: &ProblemSpec,
    control: &ControlField,
    coords: &[(usize, usize, usize)],
    fd_step: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<GradientCheckRow>> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step {fd_step} must be positive")));
    }
    let eval = evaluate_ensemble(problem, control, n_paths, seed)?;
    let dt = problem.dt();
    let (lo, hi) = (problem.controls.lower(), problem.controls.upper());
    let mut rows = Vec::with_capacity(coords.len());
    for &(n, k, c) in coords {
        let weight = dt * problem.mesh.boundary_mass()[k];
        let u = control.values().at(n, k)[c];
        let shifted = |s: f64| -> Result<Vec<f64>> {
            let mut v = control.values().clone();
            v.at_mut(n, k)[c] = u + s;
            path_costs(problem, &ControlField::new(problem, v)?, n_paths, seed)
        };
        let (plus, minus, span) = if u + fd_step > hi[c] {
            (eval.path_costs.clone(), shifted(-fd_step)?, fd_step)
        } else if u - fd_step < lo[c] {
            (shifted(fd_step)?, eval.path_costs.clone(), fd_step)
        } else {
            (shifted(fd_step)?, shifted(-fd_step)?, 2.0 * fd_step)
        };
        let diffs: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / span).collect();
        let (fd, fd_hw) = mean_and_half_width(&diffs);
        let adjoint = weight * eval.gradient.at(n, k)[c];
        rows.push(GradientCheckRow {
            step: n,
            boundary_slot: k,
            component: c,
            adjoint,
            finite_difference: fd,
            relative_error: relative_error(adjoint, fd),
            adjoint_half_width: Z95 * weight * eval.gradient_std_error.at(n, k)[c],
            fd_half_width: fd_hw,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_problem, FamilyParams};
    use crate::dynamics::solve_forward;
    use crate::field::{StateField, TimeGrid};
    use crate::mesh::{Domain, Mesh};
    use crate::noise::{NoiseSpec, Spectrum};
    use crate::smp::Verdict;
    use std::sync::Arc;

    fn problem(nodes: usize, steps: usize, y0: f64, sigma: f64) -> ProblemSpec {
        let mesh = Mesh::build(&Domain::Interval { lo: 0.0, hi: 1.0 }, &[nodes]).unwrap();
        let (fam, u) = builtin_problem("lq-dbc", FamilyParams::default()).unwrap();
        let spectrum = Spectrum { sigma0: sigma, boundary_sigma0: sigma, decay: 1.0 };
        let noise = NoiseSpec::with_default_modes(&mesh, spectrum, 4, 4, 0);
        let initial = StateField::constant(&mesh, y0);
        ProblemSpec::new(mesh, Arc::new(fam), u, noise, TimeGrid::new(1.0, steps).unwrap(), initial).unwrap()
    }

    #[test]
    fn zero_problem_costs_nothing() {
        let p = problem(7, 5, 0.0, 0.0);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let c = estimate_cost(&p, &u, 10, 1).unwrap();
        assert_eq!((c.mean, c.half_width, c.paths), (0.0, 0.0, 1));
        assert_eq!(estimate_gradient(&p, &u, 10, 1).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cost_matches_independent_quadrature_of_the_trajectory() {
        let p = problem(5, 4, 1.0, 0.0);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let traj = solve_forward(&p, &u, 0).unwrap();
        // ℓ = ½y² with lumped weights (h/2, h, h, h, h/2), boundary ℓ̄ = ½ȳ², ψ likewise.
        let h = 0.25;
        let w = [h / 2.0, h, h, h, h / 2.0];
        let l = |y: &StateField| {
            let interior: f64 = (0..5).map(|i| 0.5 * w[i] * y[i] * y[i]).sum();
            interior + 0.5 * (y[0] * y[0] + y[4] * y[4])
        };
        let dt = 0.25;
        let mut expected = 0.0;
        for n in 0..4 {
            expected += dt * 0.5 * (l(traj.state(n)) + l(traj.state(n + 1)));
        }
        expected += l(traj.terminal());
        let c = estimate_cost(&p, &u, 1, 0).unwrap();
        assert!((c.mean - expected).abs() < 1e-12, "{} vs {expected}", c.mean);
    }

    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let p = problem(9, 10, 1.0, 0.3);
        let u = ControlField::constant(&p, &[0.2]).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| evaluate_ensemble(&p, &u, 37, 11).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.cost.mean.to_bits(), b.cost.mean.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn gradient_standard_error_scales_like_inverse_root_n() {
        let p = problem(9, 10, 1.0, 0.5);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let a = evaluate_ensemble(&p, &u, 400, 3).unwrap();
        let b = evaluate_ensemble(&p, &u, 1600, 3).unwrap();
        let ratio = a.gradient_std_error.max_abs() / b.gradient_std_error.max_abs();
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn starting_at_the_optimum_stops_immediately() {
        let p = problem(7, 5, 0.0, 0.0);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let out = run_optimizer(&p, &u, &OptimizerOptions::default()).unwrap();
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].residual, 0.0);
        assert_eq!(out.status, Status::Converged);
    }

    #[test]
    fn accepted_costs_never_increase() {
        let p = problem(9, 12, 1.0, 0.2);
        let u = ControlField::constant(&p, &[-0.5]).unwrap();
        let opts = OptimizerOptions { paths: 16, max_iterations: 15, seed: 4, ..OptimizerOptions::default() };
        let out = run_optimizer(&p, &u, &opts).unwrap();
        for w in out.history.records.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
        assert!(out.history.records.iter().enumerate().all(|(i, r)| r.iteration == i));
    }

    #[test]
    fn deterministic_optimum_satisfies_both_conditions() {
        let p = problem(9, 10, 1.0, 0.0);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let opts = OptimizerOptions { tolerance: 1e-8, ..OptimizerOptions::default() };
        let out = run_optimizer(&p, &u, &opts).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert!(out.report.residual <= 1e-8);
        assert_eq!(out.report.sufficiency.unwrap().verdict, Verdict::Holds);
        // Interior optimum of lq-dbc: u = P̄.
        for n in 0..10 {
            for k in 0..2 {
                let diff = out.control.values().at(n, k)[0] - out.evaluation.boundary_costate.at(n, k)[0];
                assert!(diff.abs() < 1e-7);
            }
        }
    }

    #[test]
    fn deterministic_gradient_check_passes() {
        let p = problem(9, 10, 1.0, 0.0);
        let u = ControlField::constant(&p, &[0.2]).unwrap();
        let coords = sample_coordinates(&p, 8, 1);
        assert_eq!(coords.len(), 8);
        let rows = gradient_check(&p, &u, &coords, 1e-5, 1, 0).unwrap();
        assert!(rows.iter().all(|r| r.relative_error < 1e-6), "{rows:?}");
    }

    #[test]
    fn invalid_options_are_rejected() {
        let p = problem(5, 3, 0.0, 0.0);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        for bad in [
            OptimizerOptions { paths: 0, ..OptimizerOptions::default() },
            OptimizerOptions { armijo_slope: 1.0, ..OptimizerOptions::default() },
            OptimizerOptions { backtrack_ratio: 0.0, ..OptimizerOptions::default() },
        ] {
            assert!(run_optimizer(&p, &u, &bad).is_err());
        }
    }
}
