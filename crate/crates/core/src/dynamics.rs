//! Pathwise time stepping of the state equation and of its linearization.
//!
//! Forward scheme (implicit drift, explicit additive noise), for
//! `n = 0, …, N−1`:
//!
//! ```text
//! M (Y_{n+1} − Y_n) = Δt A(Y_{n+1}, u_n) + M B ΔW_n
//! ```
//!
//! where `M` is the lumped H mass. The control `u_n` is held constant on
//! `[t_n, t_{n+1})`. The variational scheme is the exact linearization of the
//! forward map with respect to the control, so difference quotients of the
//! forward solution converge to it at rate O(θ).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{DualField, StateField, StateTrajectory};
use crate::operator::inner_h;
use crate::problem::ProblemSpec;

/// Residual tolerance (H-norm of the Riesz representative) of the Newton
/// solve, relative to `max(1, ‖right-hand side‖)`.
pub const NEWTON_TOLERANCE: f64 = 1e-12;
pub const NEWTON_MAX_ITERATIONS: usize = 50;
const MAX_HALVINGS: usize = 30;

/// Values on `(time step, boundary slot, component)`, stored row-major.
///
/// Used for controls, control directions and gradient densities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryArray {
    steps: usize,
    boundary: usize,
    dim: usize,
    values: Vec<f64>,
}

impl BoundaryArray {
    pub fn zeros(steps: usize, boundary: usize, dim: usize) -> Self {
        Self { steps, boundary, dim, values: vec![0.0; steps * boundary * dim] }
    }

    pub fn from_vec(steps: usize, boundary: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * boundary * dim {
            return Err(Error::LengthMismatch { expected: steps * boundary * dim, found: values.len() });
        }
        Ok(Self { steps, boundary, dim, values })
    }

    pub fn filled(steps: usize, boundary: usize, value: &[f64]) -> Self {
        let values = (0..steps * boundary).flat_map(|_| value.iter().copied()).collect();
        Self { steps, boundary, dim: value.len(), values }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// All boundary values at step `n` (length `boundary · dim`).
    pub fn step(&self, n: usize) -> &[f64] {
        let w = self.boundary * self.dim;
        &self.values[n * w..(n + 1) * w]
    }

    /// Value vector at `(n, k)` (length `dim`).
    pub fn at(&self, n: usize, k: usize) -> &[f64] {
        let i = (n * self.boundary + k) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn at_mut(&mut self, n: usize, k: usize) -> &mut [f64] {
        let i = (n * self.boundary + k) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.steps == other.steps && self.boundary == other.boundary && self.dim == other.dim
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// `self + s · other`.
    pub fn plus_scaled(&self, s: f64, other: &Self) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect(), ..self.clone() }
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus_scaled(-1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A control: a [`BoundaryArray`] whose every value lies in `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField(BoundaryArray);

impl ControlField {
    pub fn new(problem: &ProblemSpec, values: BoundaryArray) -> Result<Self> {
        if values.steps() != problem.steps()
            || values.boundary() != problem.mesh.num_boundary()
            || values.dim() != problem.control_dim()
        {
            return Err(Error::InvalidArgument(format!(
                "control shape ({}, {}, {}) does not match problem ({}, {}, {})",
                values.steps(),
                values.boundary(),
                values.dim(),
                problem.steps(),
                problem.mesh.num_boundary(),
                problem.control_dim()
            )));
        }
        let op = problem.operator();
        for n in 0..values.steps() {
            op.check_control(values.step(n))?;
        }
        Ok(Self(values))
    }

    /// The same value everywhere.
    pub fn constant(problem: &ProblemSpec, value: &[f64]) -> Result<Self> {
        Self::new(problem, BoundaryArray::filled(problem.steps(), problem.mesh.num_boundary(), value))
    }

    /// Pointwise projection of arbitrary values onto `U`.
    pub fn projected(problem: &ProblemSpec, values: &BoundaryArray) -> Result<Self> {
        let mut out = values.clone();
        let m = values.dim();
        for chunk in out.as_mut_slice().chunks_mut(m) {
            let v = chunk.to_vec();
            problem.controls.project(&v, chunk);
        }
        Self::new(problem, out)
    }

    pub fn values(&self) -> &BoundaryArray {
        &self.0
    }

    pub fn into_values(self) -> BoundaryArray {
        self.0
    }

    pub fn step(&self, n: usize) -> &[f64] {
        self.0.step(n)
    }
}

/// Newton iteration counts per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub newton_iterations: Vec<usize>,
}

/// Forward solve for noise path `path` of the problem's master seed.
pub fn solve_forward(problem: &ProblemSpec, control: &ControlField, path: u64) -> Result<StateTrajectory> {
    solve_forward_seeded(problem, control, problem.seed(), path)
}

pub fn solve_forward_seeded(
    problem: &ProblemSpec,
    control: &ControlField,
    seed: u64,
    path: u64,
) -> Result<StateTrajectory> {
    solve_forward_with_stats(problem, control, seed, path).map(|(t, _)| t)
}

pub fn solve_forward_with_stats(
    problem: &ProblemSpec,
    control: &ControlField,
    seed: u64,
    path: u64,
) -> Result<(StateTrajectory, ForwardStats)> {
    check_control_shape(problem, control.values())?;
    let mesh = &problem.mesh;
    let op = problem.operator();
    let dt = problem.dt();
    let mass = mesh.h_mass();
    let mut states = Vec::with_capacity(problem.steps() + 1);
    let mut stats = ForwardStats::default();
    states.push(problem.initial.clone());

    for n in 0..problem.steps() {
        let u = control.step(n);
        let prev = &states[n];
        let mut rhs = DualField::lift(mesh, prev);
        if !problem.noise.is_silent() {
            let inc = problem.noise.sample_increment_keyed(mesh, dt, seed, path, n as u64)?;
            rhs.axpy(1.0, &inc.to_dual(mesh));
        }
        let tol = NEWTON_TOLERANCE * rhs.h_norm(mesh).max(1.0);

        let residual = |y: &StateField| -> Result<DualField> {
            let mut r = DualField::lift(mesh, y);
            r.axpy(-dt, &op.apply_a(y, u)?);
            r.axpy(-1.0, &rhs);
            Ok(r)
        };

        let mut y = prev.clone();
        let mut r = residual(&y)?;
        let mut rn = r.h_norm(mesh);
        let mut history = vec![rn];
        let mut iters = 0;
        while rn > tol {
            if iters == NEWTON_MAX_ITERATIONS {
                return Err(Error::NewtonDivergence { step: n, dt, residuals: history });
            }
            let mut jac = op.dya_matrix(&y, u)?;
            jac.scale(-dt);
            jac.add_diagonal(mass);
            let mut delta: Vec<f64> = r.as_slice().iter().map(|v| -v).collect();
            jac.factor()?.solve_in_place(&mut delta);

            // Damping: halve until the residual decreases.
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let mut trial = y.clone();
                trial.as_mut_slice().iter_mut().zip(&delta).for_each(|(a, d)| *a += lambda * d);
                let tr = residual(&trial)?;
                let trn = tr.h_norm(mesh);
                if trn < rn || trn <= tol {
                    accepted = Some((trial, tr, trn));
                    break;
                }
                lambda *= 0.5;
            }
            let Some((ny, nr, nrn)) = accepted else {
                return Err(Error::NewtonDivergence { step: n, dt, residuals: history });
            };
            y = ny;
            r = nr;
            rn = nrn;
            history.push(rn);
            iters += 1;
        }
        if !y.is_finite() {
            return Err(Error::NonFinite { what: "state", location: format!("step {}", n + 1) });
        }
        stats.newton_iterations.push(iters);
        states.push(y);
    }
    Ok((StateTrajectory::new(problem.grid.clone(), states)?, stats))
}

pub(crate) fn check_control_shape(problem: &ProblemSpec, c: &BoundaryArray) -> Result<()> {
    if c.steps() != problem.steps() || c.boundary() != problem.mesh.num_boundary() || c.dim() != problem.control_dim() {
        return Err(Error::InvalidArgument(format!(
            "boundary array shape ({}, {}, {}) does not match problem ({}, {}, {})",
            c.steps(),
            c.boundary(),
            c.dim(),
            problem.steps(),
            problem.mesh.num_boundary(),
            problem.control_dim()
        )));
    }
    Ok(())
}

pub(crate) fn check_trajectory(problem: &ProblemSpec, traj: &StateTrajectory) -> Result<()> {
    if traj.grid() != &problem.grid {
        return Err(Error::InvalidArgument("trajectory time grid differs from the problem's".into()));
    }
    for s in traj.states() {
        s.check_len(&problem.mesh)?;
    }
    Ok(())
}

/// Linearized response `Z` to the control direction `direction`, along the
/// forward trajectory `base` computed with `control`:
///
/// ```text
/// M (Z_{n+1} − Z_n) = Δt [D_yA(Y_{n+1}, u_n) Z_{n+1} + D_uA(Y_{n+1}, u_n) w_n],  Z_0 = 0.
/// ```
///
/// `D_uA w` is the dual field of `𝒢(ȳ, u, w) = (0, −D_uγ·w)`. There is no
/// noise term.
pub fn solve_variational(
    problem: &ProblemSpec,
    base: &StateTrajectory,
    control: &ControlField,
    direction: &BoundaryArray,
) -> Result<StateTrajectory> {
    check_trajectory(problem, base)?;
    check_control_shape(problem, control.values())?;
    check_control_shape(problem, direction)?;
    let mesh = &problem.mesh;
    let op = problem.operator();
    let dt = problem.dt();
    let mut states = Vec::with_capacity(problem.steps() + 1);
    states.push(StateField::zeros(mesh.num_nodes()));
    for n in 0..problem.steps() {
        let y = base.state(n + 1);
        let u = control.step(n);
        let mut rhs = DualField::lift(mesh, &states[n]);
        rhs.axpy(dt, &op.apply_dua(y, u, direction.step(n))?);
        let mut jac = op.dya_matrix(y, u)?;
        jac.scale(-dt);
        jac.add_diagonal(mesh.h_mass());
        let mut z = rhs.into_vec();
        jac.factor()?.solve_in_place(&mut z);
        states.push(StateField::from_vec(z));
    }
    StateTrajectory::new(problem.grid.clone(), states)
}

/// Discrete cost of one path: trapezoid rule for the running cost on each
/// interval (with the control held at `u_n`) plus the terminal cost,
///
/// ```text
/// J = Σ_n Δt/2 · [L(Y_n, u_n) + L(Y_{n+1}, u_n)] + Ψ(Y_N).
/// ```
pub fn path_cost(problem: &ProblemSpec, traj: &StateTrajectory, control: &ControlField) -> Result<f64> {
    check_trajectory(problem, traj)?;
    check_control_shape(problem, control.values())?;
    let op = problem.operator();
    let dt = problem.dt();
    let running: f64 = (0..problem.steps())
        .map(|n| {
            let u = control.step(n);
            0.5 * dt * (op.running_cost(traj.state(n), u) + op.running_cost(traj.state(n + 1), u))
        })
        .sum();
    let j = running + op.terminal_cost(traj.terminal());
    if !j.is_finite() {
        return Err(Error::NonFinite { what: "cost", location: "path cost".into() });
    }
    Ok(j)
}

/// `max_n ‖(Y^θ_n − Y_n)/θ − Z_n‖_H` for each `θ`, where `Y^θ` is driven by
/// `u + θ w` on the same noise path and `Z` solves the variational scheme.
pub fn variational_defects(
    problem: &ProblemSpec,
    control: &ControlField,
    direction: &BoundaryArray,
    thetas: &[f64],
    path: u64,
) -> Result<Vec<f64>> {
    let base = solve_forward(problem, control, path)?;
    let z = solve_variational(problem, &base, control, direction)?;
    thetas
        .iter()
        .map(|&theta| {
            let shifted = ControlField::new(problem, control.values().plus_scaled(theta, direction))?;
            let yt = solve_forward(problem, &shifted, path)?;
            let mut worst: f64 = 0.0;
            for n in 0..=problem.steps() {
                let mut d = yt.state(n).clone();
                d.axpy(-1.0, base.state(n));
                d.scale(1.0 / theta);
                d.axpy(-1.0, z.state(n));
                worst = worst.max(inner_h(&problem.mesh, &d, &d)?.sqrt());
            }
            Ok(worst)
        })
        .collect()
}

/// Least squares slope of `log error` against `log parameter`.
pub fn observed_order(params: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = params.iter().map(|p| p.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `2⟨A(y, u), y⟩ ≤ K(u)` for every state `y`, with
/// `K(u) = (‖a(·, 0)‖²_{L²(O)} + ‖γ(·, 0, u)‖²_{L²(Γ)}) / (2δ)`.
///
/// Follows from strong monotonicity: `−a(ζ)·ζ ≤ −δ|ζ|² + |a(0)||ζ| ≤ |a(0)|²/(4δ)`,
/// and likewise on the boundary.
pub fn dissipation_bound(problem: &ProblemSpec, u: &[f64]) -> f64 {
    let mesh = &problem.mesh;
    let coeffs = problem.coeffs.as_ref();
    let delta = coeffs.constants().delta;
    let m = problem.control_dim();
    let interior: f64 = mesh
        .elements()
        .iter()
        .map(|e| {
            let a = coeffs.flux(e.centroid(), [0.0, 0.0]);
            e.volume() * (a[0] * a[0] + a[1] * a[1])
        })
        .sum();
    let boundary: f64 = mesh
        .boundary_nodes()
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let g = coeffs.gamma(mesh.coords()[b], 0.0, &u[k * m..(k + 1) * m]);
            mesh.boundary_mass()[k] * g * g
        })
        .sum();
    (interior + boundary) / (2.0 * delta)
}

/// Energy bounds for the implicit scheme.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyBound {
    /// Bound on `E‖Y_n‖²_H` for each grid point.
    pub mean_square: Vec<f64>,
    /// Bound on `E max_n ‖Y_n‖²_H`.
    pub expected_sup: f64,
}

/// Discrete Gronwall-type bound. Testing the scheme against `Y_{n+1}` gives
///
/// ```text
/// ‖Y_{n+1}‖² ≤ ‖Y_n‖² + Δt K(u_n) + ‖B ΔW_n‖² + 2⟨B ΔW_n, Y_n⟩,
/// ```
///
/// so `E‖Y_n‖² ≤ m_n := ‖y₀‖² + Σ_{k<n} Δt (K(u_k) + ‖B‖²_{L₂})`, and by Doob's
/// inequality for the martingale term,
/// `E max_n ‖Y_n‖² ≤ m_N + 4 (Δt ‖B‖²_{L₂} Σ_{n<N} m_n)^{1/2}`.
pub fn energy_bound(problem: &ProblemSpec, control: &ControlField) -> Result<EnergyBound> {
    check_control_shape(problem, control.values())?;
    let dt = problem.dt();
    let hs2 = problem.noise.hs_norm().powi(2);
    let mut m = vec![inner_h(&problem.mesh, &problem.initial, &problem.initial)?];
    for n in 0..problem.steps() {
        let next = m[n] + dt * (dissipation_bound(problem, control.step(n)) + hs2);
        m.push(next);
    }
    let quad: f64 = m[..problem.steps()].iter().sum();
    let expected_sup = m[problem.steps()] + 4.0 * (dt * hs2 * quad).sqrt();
    Ok(EnergyBound { mean_square: m, expected_sup })
}
