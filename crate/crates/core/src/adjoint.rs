//! Backward equation for the co-state.
//!
//! The pathwise solver is the exact transpose of the linearized forward
//! scheme, which makes the discrete duality identity hold to rounding error
//! on every path:
//!
//! ```text
//! P_N = M⁻¹ D_yΨ(Y_N)
//! (M − Δt D_yA(Y_{n+1}, u_n))ᵀ P_n = M P_{n+1} + Δt c_n
//! c_n = ½ [D_yL(Y_{n+1}, u_n) + D_yL(Y_{n+1}, u_{n+1})]   (n < N−1)
//! c_{N−1} = ½ D_yL(Y_N, u_{N−1})
//! ```
//!
//! `c_n` collects the trapezoid weights that multiply `Z_{n+1}` in the
//! linearized cost. The regression solver projects the pathwise co-states
//! onto functionals of the current state to exhibit an adapted pair `(P, Q)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{check_control_shape, check_trajectory, BoundaryArray, ControlField};
use crate::error::{Error, Result};
use crate::field::{DualField, StateField, StateTrajectory, TimeGrid};
use crate::operator::{boundary_norm_sq, gradient_norm_sq, inner_h};
use crate::problem::ProblemSpec;

/// Relative singular value cut-off of the truncated least squares fit.
pub const REGRESSION_RCOND: f64 = 1e-8;
pub const MIN_REGRESSION_PATHS: usize = 100;
pub const MAX_REGRESSORS: usize = 20;

/// Co-states `P_0, …, P_N` and, for regression estimates, the loadings
/// `q_{n,k} = ⟨Q_n e_k, e_k⟩_H` on each noise mode for `n < N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointTrajectory {
    grid: TimeGrid,
    states: Vec<StateField>,
    loadings: Option<Vec<Vec<f64>>>,
}

impl AdjointTrajectory {
    pub fn new(grid: TimeGrid, states: Vec<StateField>, loadings: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if states.len() != grid.steps() + 1 {
            return Err(Error::LengthMismatch { expected: grid.steps() + 1, found: states.len() });
        }
        if let Some(q) = &loadings {
            if q.len() != grid.steps() {
                return Err(Error::LengthMismatch { expected: grid.steps(), found: q.len() });
            }
        }
        Ok(Self { grid, states, loadings })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &[StateField] {
        &self.states
    }

    pub fn state(&self, n: usize) -> &StateField {
        &self.states[n]
    }

    pub fn terminal(&self) -> &StateField {
        self.states.last().expect("at least one state")
    }

    /// Loadings at step `n`, if estimated.
    pub fn loadings(&self, n: usize) -> Option<&[f64]> {
        self.loadings.as_ref().map(|q| q[n].as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(StateField::is_finite) && self.loadings.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// The trapezoid weight `c_n` multiplying `Z_{n+1}` in the linearized cost.
pub(crate) fn cost_weight(
    problem: &ProblemSpec,
    traj: &StateTrajectory,
    control: &ControlField,
    n: usize,
) -> DualField {
    let op = problem.operator();
    let y = traj.state(n + 1);
    let mut c = op.running_cost_dy(y, control.step(n));
    if n + 1 < problem.steps() {
        c.axpy(1.0, &op.running_cost_dy(y, control.step(n + 1)));
    }
    c.scale(0.5);
    c
}

pub fn solve_adjoint_pathwise(
    problem: &ProblemSpec,
    traj: &StateTrajectory,
    control: &ControlField,
) -> Result<AdjointTrajectory> {
    check_trajectory(problem, traj)?;
    check_control_shape(problem, control.values())?;
    let mesh = &problem.mesh;
    let op = problem.operator();
    let dt = problem.dt();
    let steps = problem.steps();
    let mut states = vec![StateField::zeros(mesh.num_nodes()); steps + 1];
    states[steps] = StateField::riesz(mesh, &op.terminal_cost_dy(traj.terminal()));
    for n in (0..steps).rev() {
        let u = control.step(n);
        let mut rhs = DualField::lift(mesh, &states[n + 1]);
        rhs.axpy(dt, &cost_weight(problem, traj, control, n));
        let mut jac = op.dya_matrix(traj.state(n + 1), u)?;
        jac.scale(-dt);
        jac.add_diagonal(mesh.h_mass());
        let mut p = rhs.into_vec();
        jac.transpose().factor()?.solve_in_place(&mut p);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "adjoint", location: format!("step {n}") });
        }
        states[n] = StateField::from_vec(p);
    }
    AdjointTrajectory::new(problem.grid.clone(), states, None)
}

/// Both sides of the discrete duality identity
/// `⟨D_yΨ(Y_N), Z_N⟩ = Σ_n Δt [⟨D_uA_n w_n, P_n⟩ − ⟨c_n, Z_{n+1}⟩]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualityCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl DualityCheck {
    pub fn relative_residual(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.lhs.abs().max(self.rhs.abs()).max(f64::MIN_POSITIVE)
    }
}

pub fn duality_check(
    problem: &ProblemSpec,
    traj: &StateTrajectory,
    control: &ControlField,
    adjoint: &AdjointTrajectory,
    direction: &BoundaryArray,
    variation: &StateTrajectory,
) -> Result<DualityCheck> {
    check_trajectory(problem, traj)?;
    check_trajectory(problem, variation)?;
    check_control_shape(problem, direction)?;
    let op = problem.operator();
    let lhs = op.terminal_cost_dy(traj.terminal()).pairing(variation.terminal());
    let mut rhs = 0.0;
    for n in 0..problem.steps() {
        let g = op.apply_dua(traj.state(n + 1), control.step(n), direction.step(n))?;
        rhs += problem.dt()
            * (g.pairing(adjoint.state(n)) - cost_weight(problem, traj, control, n).pairing(variation.state(n + 1)));
    }
    Ok(DualityCheck { lhs, rhs })
}

/// Margins of the structural inequalities of the backward operator at one
/// state/co-state pair. Nonnegative margins mean the inequality holds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BackwardStructure {
    /// `⟨D_yA(y, u)* p, p⟩ ≤ 0`.
    pub monotonicity: f64,
    /// `−⟨D_yA* p, p⟩ − ⟨D_yL, p⟩_H ≥ δ‖p‖²_V − ½‖p‖²_H − C` with
    /// `C = 3/2 c₂² (‖(ρ, ρ̃)‖²_H + ‖y‖²_H + ‖u‖²_{L²(Γ)})`.
    pub coercivity: f64,
}

/// Evaluates [`BackwardStructure`] with `‖p‖²_V = ‖∇p‖²_{L²(O)} + ‖p̄‖²_{L²(Γ)}`.
pub fn backward_structure(
    problem: &ProblemSpec,
    y: &StateField,
    u: &[f64],
    p: &StateField,
) -> Result<BackwardStructure> {
    let mesh = &problem.mesh;
    let coeffs = problem.coeffs.as_ref();
    let op = problem.operator();
    let k = coeffs.constants();
    let form = op.apply_dya_adjoint(y, u, p)?.pairing(p);
    let monotonicity = -form / (1.0 + form.abs());

    let lhs = -form - op.running_cost_dy(y, u).pairing(p);
    let v2 = gradient_norm_sq(mesh, p)? + boundary_norm_sq(mesh, p)?;
    let rho2: f64 =
        mesh.coords().iter().zip(mesh.interior_mass()).map(|(&x, w)| w * coeffs.rho(x).powi(2)).sum::<f64>()
            + mesh
                .boundary_nodes()
                .iter()
                .zip(mesh.boundary_mass())
                .map(|(&b, w)| w * coeffs.rho_tilde(mesh.coords()[b]).powi(2))
                .sum::<f64>();
    let m = problem.control_dim();
    let u2: f64 = mesh
        .boundary_mass()
        .iter()
        .enumerate()
        .map(|(i, w)| w * u[i * m..(i + 1) * m].iter().map(|v| v * v).sum::<f64>())
        .sum();
    let c = 1.5 * k.c2 * k.c2 * (rho2 + inner_h(mesh, y, y)? + u2);
    let rhs = k.delta * v2 - 0.5 * inner_h(mesh, p, p)? - c;
    let coercivity = (lhs - rhs) / (1.0 + lhs.abs());
    Ok(BackwardStructure { monotonicity, coercivity })
}

/// Regressors: a constant, the boundary and interior averages, the
/// projections of the state on the leading noise patterns, and optionally the
/// squares of the two averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BasisSpec {
    pub mode_projections: usize,
    pub squares: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { mode_projections: 8, squares: true }
    }
}

impl BasisSpec {
    pub fn names(&self, problem: &ProblemSpec) -> Vec<String> {
        let mut names = vec!["constant".to_string(), "boundary_average".into(), "interior_average".into()];
        let k = self.mode_projections.min(problem.noise.num_modes());
        names.extend((0..k).map(|j| format!("mode_{j}")));
        if self.squares {
            names.push("boundary_average^2".into());
            names.push("interior_average^2".into());
        }
        names
    }

    pub fn evaluate(&self, problem: &ProblemSpec, y: &StateField) -> Vec<f64> {
        let mesh = &problem.mesh;
        let vol: f64 = mesh.interior_mass().iter().sum();
        let len: f64 = mesh.boundary_mass().iter().sum();
        let interior = y.as_slice().iter().zip(mesh.interior_mass()).map(|(v, w)| v * w).sum::<f64>() / vol;
        let boundary =
            mesh.boundary_nodes().iter().zip(mesh.boundary_mass()).map(|(&b, w)| y[b] * w).sum::<f64>() / len;
        let mut out = vec![1.0, boundary, interior];
        let k = self.mode_projections.min(problem.noise.num_modes());
        out.extend(problem.noise.mode_pairings(mesh, y.as_slice()).into_iter().take(k));
        if self.squares {
            out.push(boundary * boundary);
            out.push(interior * interior);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionStep {
    pub step: usize,
    pub rank: usize,
    pub condition: f64,
    /// Mean squared H-distance between pathwise and projected co-states.
    pub residual_variance: f64,
    /// True when the fit fell back to the ensemble mean.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionReport {
    pub basis: Vec<String>,
    pub paths: usize,
    pub steps: Vec<RegressionStep>,
}

/// Least squares projector onto the span of standardized regressors.
struct Projector {
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    rank: usize,
    condition: f64,
    fallback: bool,
}

impl Projector {
    fn new(rows: &[Vec<f64>]) -> Self {
        let p = rows.len();
        let r = rows[0].len();
        // Column 0 is the constant; the others are centred and scaled, and
        // dropped when (numerically) constant over the ensemble.
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; p]];
        for j in 1..r {
            let mean = rows.iter().map(|x| x[j]).sum::<f64>() / p as f64;
            let sd = (rows.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / p as f64).sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                cols.push(rows.iter().map(|x| (x[j] - mean) / sd).collect());
            }
        }
        let design = DMatrix::from_fn(p, cols.len(), |i, j| cols[j][i]);
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = REGRESSION_RCOND * smax;
        let kept: Vec<f64> = svd.singular_values.iter().copied().filter(|&s| s > eps).collect();
        match svd.pseudo_inverse(eps) {
            Ok(pinv) if smax.is_finite() && smax > 0.0 => Self {
                rank: kept.len(),
                condition: smax / kept.iter().copied().fold(f64::INFINITY, f64::min),
                design,
                pinv,
                fallback: false,
            },
            _ => {
                let design = DMatrix::from_element(p, 1, 1.0);
                let pinv = DMatrix::from_element(1, p, 1.0 / p as f64);
                Self { design, pinv, rank: 1, condition: 1.0, fallback: true }
            }
        }
    }

    /// Fitted values for each column of `targets` (rows = paths).
    fn fit(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * (&self.pinv * targets)
    }
}

/// Adapted co-state estimates for an ensemble.
///
/// `paths` pairs each trajectory with the path index it was simulated with
/// (under the problem's master seed). Returns one [`AdjointTrajectory`] per
/// path, carrying loadings, and a diagnostic report.
pub fn solve_adjoint_regression(
    problem: &ProblemSpec,
    paths: &[(u64, StateTrajectory)],
    control: &ControlField,
    basis: &BasisSpec,
) -> Result<(Vec<AdjointTrajectory>, RegressionReport)> {
    if paths.len() < MIN_REGRESSION_PATHS {
        return Err(Error::InvalidArgument(format!(
            "regression needs at least {MIN_REGRESSION_PATHS} paths, got {}",
            paths.len()
        )));
    }
    let names = basis.names(problem);
    if names.len() > MAX_REGRESSORS {
        return Err(Error::InvalidArgument(format!(
            "{} regressors requested, at most {MAX_REGRESSORS} allowed",
            names.len()
        )));
    }
    let pathwise = paths
        .iter()
        .map(|(id, t)| {
            solve_adjoint_pathwise(problem, t, control).map_err(|e| Error::Path { path: *id, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;

    let mesh = &problem.mesh;
    let np = paths.len();
    let nn = mesh.num_nodes();
    let nm = problem.noise.num_modes();
    let steps = problem.steps();
    let sdt = problem.dt().sqrt();
    let to_matrix = |n: usize, src: &[AdjointTrajectory]| DMatrix::from_fn(np, nn, |i, j| src[i].state(n)[j]);

    let mut fitted: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    let mut projectors = Vec::with_capacity(steps);
    let mut report = RegressionReport { basis: names, paths: np, steps: Vec::with_capacity(steps) };
    for n in 0..steps {
        let rows: Vec<Vec<f64>> = paths.iter().map(|(_, t)| basis.evaluate(problem, t.state(n))).collect();
        let proj = Projector::new(&rows);
        let target = to_matrix(n, &pathwise);
        let fit = proj.fit(&target);
        let resid = (0..np)
            .map(|i| (0..nn).map(|j| mesh.h_mass()[j] * (target[(i, j)] - fit[(i, j)]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / np as f64;
        report.steps.push(RegressionStep {
            step: n,
            rank: proj.rank,
            condition: proj.condition,
            residual_variance: resid,
            fallback: proj.fallback,
        });
        fitted.push(fit);
        projectors.push(proj);
    }
    fitted.push(to_matrix(steps, &pathwise));

    // Loadings: regress ⟨P_{n+1} − E_n P_{n+1}, e_k⟩ ξ_k / √Δt on the basis at step n.
    let mut loadings = vec![vec![vec![0.0; nm]; steps]; np];
    for n in 0..steps {
        let next = &fitted[n + 1];
        let innov = next - projectors[n].fit(next);
        let products = DMatrix::from_fn(np, nm, |i, k| {
            let row: Vec<f64> = innov.row(i).iter().copied().collect();
            let xi = problem.noise.standard_normals(paths[i].0, n as u64)[k];
            problem.noise.mode_pairings(mesh, &row)[k] * xi / sdt
        });
        let q = projectors[n].fit(&products);
        for (i, path_q) in loadings.iter_mut().enumerate() {
            path_q[n] = q.row(i).iter().copied().collect();
        }
    }

    let out = (0..np)
        .map(|i| {
            let states = fitted.iter().map(|f| StateField::from_vec(f.row(i).iter().copied().collect())).collect();
            AdjointTrajectory::new(problem.grid.clone(), states, Some(std::mem::take(&mut loadings[i])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_problem, CostWeights, FamilyParams};
    use crate::dynamics::{path_cost, solve_forward, solve_variational};
    use crate::mesh::{Domain, Mesh};
    use crate::noise::{NoiseSpec, Spectrum};
    use crate::operator::norm_h;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn problem(family: &str, params: FamilyParams, nodes: usize, steps: usize, sigma: f64) -> ProblemSpec {
        let mesh = Mesh::build(&Domain::Interval { lo: 0.0, hi: 1.0 }, &[nodes]).unwrap();
        let (fam, u) = builtin_problem(family, params).unwrap();
        let spectrum = Spectrum { sigma0: sigma, boundary_sigma0: sigma, decay: 1.0 };
        let noise = NoiseSpec::with_default_modes(&mesh, spectrum, 4, 4, 5);
        let initial = StateField::from_fn(&mesh, |x| 1.0 + 0.5 * x[0]);
        ProblemSpec::new(mesh, Arc::new(fam), u, noise, TimeGrid::new(1.0, steps).unwrap(), initial).unwrap()
    }

    fn semilinear() -> FamilyParams {
        FamilyParams { epsilon: 0.5, kappa: 0.8, ..FamilyParams::default() }
    }

    fn random_direction(p: &ProblemSpec, rng: &mut impl Rng) -> BoundaryArray {
        let nb = p.mesh.num_boundary();
        let v = (0..p.steps() * nb).map(|_| rng.random_range(-1.0..1.0)).collect();
        BoundaryArray::from_vec(p.steps(), nb, 1, v).unwrap()
    }

    #[test]
    fn zero_costs_give_zero_costate() {
        let params = FamilyParams { cost: CostWeights::zero(), ..semilinear() };
        let p = problem("semilinear-dbc", params, 9, 10, 0.3);
        let u = ControlField::constant(&p, &[0.2]).unwrap();
        let traj = solve_forward(&p, &u, 1).unwrap();
        let adj = solve_adjoint_pathwise(&p, &traj, &u).unwrap();
        assert!(adj.states().iter().all(|s| s.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn terminal_value_is_riesz_of_terminal_derivative() {
        let p = problem("lq-dbc", FamilyParams::default(), 9, 6, 0.3);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let traj = solve_forward(&p, &u, 0).unwrap();
        let adj = solve_adjoint_pathwise(&p, &traj, &u).unwrap();
        // ψ = ψ̄ = ½y² gives P_N(x) = Y_N(x) at interior nodes.
        for i in 1..8 {
            assert!((adj.terminal()[i] - traj.terminal()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn duality_is_exact_per_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (fam, params) in [("lq-dbc", FamilyParams::default()), ("semilinear-dbc", semilinear())] {
            let p = problem(fam, params, 13, 20, 0.4);
            let u = ControlField::constant(&p, &[0.3]).unwrap();
            for path in 0..5 {
                let traj = solve_forward(&p, &u, path).unwrap();
                let adj = solve_adjoint_pathwise(&p, &traj, &u).unwrap();
                let w = random_direction(&p, &mut rng);
                let z = solve_variational(&p, &traj, &u, &w).unwrap();
                let d = duality_check(&p, &traj, &u, &adj, &w, &z).unwrap();
                assert!(d.relative_residual() < 1e-11, "{fam} path {path}: {d:?}");
            }
        }
    }

    #[test]
    fn directional_derivative_matches_cost_difference() {
        let p = problem("semilinear-dbc", semilinear(), 11, 16, 0.2);
        let u = ControlField::constant(&p, &[0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_direction(&p, &mut rng).scaled(0.5);
        let traj = solve_forward(&p, &u, 4).unwrap();
        let adj = solve_adjoint_pathwise(&p, &traj, &u).unwrap();
        let op = p.operator();
        let mut deriv = 0.0;
        let mut a = [0.0];
        let mut b = [0.0];
        let mut g = [0.0];
        for n in 0..p.steps() {
            for k in 0..p.mesh.num_boundary() {
                op.ell_bar_du(traj.state(n), u.step(n), k, &mut a);
                op.ell_bar_du(traj.state(n + 1), u.step(n), k, &mut b);
                op.gamma_du(traj.state(n + 1), u.step(n), k, &mut g);
                let node = p.mesh.boundary_nodes()[k];
                let density = 0.5 * (a[0] + b[0]) - adj.state(n)[node] * g[0];
                deriv += p.dt() * p.mesh.boundary_mass()[k] * density * w.at(n, k)[0];
            }
        }
        let theta = 1e-6;
        let cost = |s: f64| {
            let v = ControlField::new(&p, u.values().plus_scaled(s, &w)).unwrap();
            path_cost(&p, &solve_forward(&p, &v, 4).unwrap(), &v).unwrap()
        };
        let fd = (cost(theta) - cost(-theta)) / (2.0 * theta);
        assert!((fd - deriv).abs() <= 1e-7 * (1.0 + deriv.abs()), "fd {fd} adjoint {deriv}");
    }

    #[test]
    fn backward_structure_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (fam, params) in [("lq-dbc", FamilyParams::default()), ("semilinear-dbc", semilinear())] {
            let p = problem(fam, params, 15, 4, 0.0);
            for _ in 0..50 {
                let scale = 10f64.powf(rng.random_range(-2.0..2.0));
                let y = StateField::from_vec((0..15).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
                let q = StateField::from_vec((0..15).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
                let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let s = backward_structure(&p, &y, &u, &q).unwrap();
                assert!(s.monotonicity >= -1e-10 && s.coercivity >= -1e-10, "{fam}: {s:?}");
            }
        }
    }

    #[test]
    fn adjoint_converges_at_first_order_in_time() {
        let base = problem("lq-dbc", FamilyParams::default(), 11, 8, 0.0);
        let solve = |steps: usize| {
            let p = base.with_grid(TimeGrid::new(1.0, steps).unwrap());
            let u = ControlField::constant(&p, &[0.0]).unwrap();
            let traj = solve_forward(&p, &u, 0).unwrap();
            solve_adjoint_pathwise(&p, &traj, &u).unwrap().state(0).clone()
        };
        let reference = solve(2048);
        let err = |steps: usize| {
            let mut d = solve(steps);
            d.axpy(-1.0, &reference);
            norm_h(&base.mesh, &d).unwrap()
        };
        let (e1, e2, e3) = (err(16), err(32), err(64));
        let order = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;
        assert!(order > 0.85 && order < 1.2, "order {order} from {e1} {e2} {e3}");
    }

    fn ensemble(p: &ProblemSpec, u: &ControlField, n: u64) -> Vec<(u64, StateTrajectory)> {
        (0..n).map(|i| (i, solve_forward(p, u, i).unwrap())).collect()
    }

    #[test]
    fn regression_is_exact_without_noise() {
        let p = problem("lq-dbc", FamilyParams::default(), 9, 8, 0.3).deterministic();
        let u = ControlField::constant(&p, &[0.1]).unwrap();
        let paths = ensemble(&p, &u, 100);
        let exact = solve_adjoint_pathwise(&p, &paths[0].1, &u).unwrap();
        let (est, report) = solve_adjoint_regression(&p, &paths, &u, &BasisSpec::default()).unwrap();
        assert_eq!(est.len(), 100);
        assert!(report.steps.iter().all(|s| s.rank == 1));
        for a in &est {
            for n in 0..=8 {
                for i in 0..9 {
                    assert!((a.state(n)[i] - exact.state(n)[i]).abs() <= 1e-12 * (1.0 + exact.state(n)[i].abs()));
                }
            }
            for n in 0..8 {
                assert!(a.loadings(n).unwrap().iter().all(|q| q.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn regression_matches_pathwise_on_adapted_integrands() {
        let p = problem("lq-dbc", FamilyParams::default(), 9, 10, 0.5);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let paths = ensemble(&p, &u, 400);
        let (est, _) = solve_adjoint_regression(&p, &paths, &u, &BasisSpec::default()).unwrap();
        for n in [0, 4, 9] {
            // G = Y_n (adapted, not in the regressor span).
            let diffs: Vec<f64> = paths
                .iter()
                .zip(&est)
                .map(|((_, t), a)| {
                    let pw = solve_adjoint_pathwise(&p, t, &u).unwrap();
                    inner_h(&p.mesh, t.state(n), pw.state(n)).unwrap()
                        - inner_h(&p.mesh, t.state(n), a.state(n)).unwrap()
                })
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
            assert!(mean.abs() <= 3.0 * sd / (diffs.len() as f64).sqrt() + 1e-12, "step {n}: {mean} vs {sd}");
        }
    }

    #[test]
    fn regression_rejects_small_ensembles() {
        let p = problem("lq-dbc", FamilyParams::default(), 7, 4, 0.3);
        let u = ControlField::constant(&p, &[0.0]).unwrap();
        let paths = ensemble(&p, &u, 10);
        assert!(solve_adjoint_regression(&p, &paths, &u, &BasisSpec::default()).is_err());
    }
}
