//! Hamiltonian, gradient density and the optimality checks.
//!
//! The gradient density is `g = D_uℓ̄ − P̄ · D_uγ`, the negated bracket of the
//! maximum principle, so optimality reads `g · (v − u) ≥ 0` for all `v ∈ U`.
//! On the discrete grid the derivative of the cost with respect to the
//! control value `u_{n,k}` is `Δt · M_Γ[k] · g_{n,k}`.

use serde::Serialize;

use crate::adjoint::AdjointTrajectory;
use crate::coefficients::ControlSet;
use crate::dynamics::{check_control_shape, check_trajectory, BoundaryArray, ControlField};
use crate::error::{Error, Result};
use crate::field::{StateField, StateTrajectory};
use crate::noise::NoiseSpec;
use crate::operator::SpatialOperator;
use crate::problem::ProblemSpec;

/// Residuals at or below this count as zero.
pub const RESIDUAL_ZERO: f64 = 1e-12;

/// `ℋ(y, u, p, q) = ⟨A(y, u), p⟩ + L(y, u) + Σ_k σ_k q_k`.
pub fn hamiltonian(
    op: &SpatialOperator<'_>,
    noise: &NoiseSpec,
    y: &StateField,
    u: &[f64],
    p: &StateField,
    loadings: &[f64],
) -> Result<f64> {
    let sigmas = noise.sigmas();
    if loadings.len() != sigmas.len() {
        return Err(Error::LengthMismatch { expected: sigmas.len(), found: loadings.len() });
    }
    let trace: f64 = sigmas.iter().zip(loadings).map(|(s, q)| s * q).sum();
    Ok(op.apply_a(y, u)?.pairing(p) + op.running_cost(y, u) + trace)
}

/// Pathwise gradient density
/// `g_{n,k} = ½ [D_uℓ̄(Y_n, u_n) + D_uℓ̄(Y_{n+1}, u_n)] − P_n[k] · D_uγ(Y_{n+1}, u_n)`.
pub fn gradient_density(
    problem: &ProblemSpec,
    traj: &StateTrajectory,
    control: &ControlField,
    adjoint: &AdjointTrajectory,
) -> Result<BoundaryArray> {
    check_trajectory(problem, traj)?;
    check_control_shape(problem, control.values())?;
    if adjoint.grid() != &problem.grid {
        return Err(Error::InvalidArgument("adjoint time grid differs from the problem's".into()));
    }
    let op = problem.operator();
    let mesh = &problem.mesh;
    let m = problem.control_dim();
    let nb = mesh.num_boundary();
    let mut g = BoundaryArray::zeros(problem.steps(), nb, m);
    let (mut a, mut b, mut d) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for n in 0..problem.steps() {
        let u = control.step(n);
        let p = adjoint.state(n);
        for (k, &node) in mesh.boundary_nodes().iter().enumerate() {
            op.ell_bar_du(traj.state(n), u, k, &mut a);
            op.ell_bar_du(traj.state(n + 1), u, k, &mut b);
            op.gamma_du(traj.state(n + 1), u, k, &mut d);
            for (c, out) in g.at_mut(n, k).iter_mut().enumerate() {
                *out = 0.5 * (a[c] + b[c]) - p[node] * d[c];
            }
        }
    }
    Ok(g)
}

/// Path average of densities, summed in slice order.
pub fn mean_density(fields: &[BoundaryArray]) -> Result<BoundaryArray> {
    let first = fields.first().ok_or_else(|| Error::InvalidArgument("no densities to average".into()))?;
    let mut acc = BoundaryArray::zeros(first.steps(), first.boundary(), first.dim());
    for f in fields {
        if !f.same_shape(first) {
            return Err(Error::InvalidArgument("densities of different shapes".into()));
        }
        acc.as_mut_slice().iter_mut().zip(f.as_slice()).for_each(|(a, v)| *a += v);
    }
    Ok(acc.scaled(1.0 / fields.len() as f64))
}

/// `⟨a, b⟩_W = Σ_{n,k} Δt M_Γ[k] a_{n,k} · b_{n,k}`, the inner product in which
/// the density is the gradient of the discrete cost.
pub fn weighted_inner(problem: &ProblemSpec, a: &BoundaryArray, b: &BoundaryArray) -> f64 {
    let dt = problem.dt();
    let mut s = 0.0;
    for n in 0..a.steps() {
        for (k, w) in problem.mesh.boundary_mass().iter().enumerate() {
            let dot: f64 = a.at(n, k).iter().zip(b.at(n, k)).map(|(x, y)| x * y).sum();
            s += dt * w * dot;
        }
    }
    s
}

/// A discrete point where a condition fails.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub step: usize,
    pub time: f64,
    pub boundary_slot: usize,
    pub node: usize,
    pub control: Vec<f64>,
    /// The offending vector (projected-gradient step, or cone element).
    pub direction: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    Fails,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    pub name: String,
    pub pass: bool,
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sufficiency {
    pub verdict: Verdict,
    pub sigma: f64,
    pub tolerance: f64,
    pub hypotheses: Vec<Hypothesis>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimalityReport {
    /// Projected-gradient residual, in cost units per control unit.
    pub residual: f64,
    pub step_size: f64,
    pub witness: Option<Witness>,
    pub sufficiency: Option<Sufficiency>,
    pub gradient: BoundaryArray,
}

fn witness(
    problem: &ProblemSpec,
    control: &ControlField,
    n: usize,
    k: usize,
    direction: Vec<f64>,
    value: f64,
) -> Witness {
    Witness {
        step: n,
        time: problem.grid.time(n),
        boundary_slot: k,
        node: problem.mesh.boundary_nodes()[k],
        control: control.values().at(n, k).to_vec(),
        direction,
        value,
    }
}

/// `max_{n,k} |u − Π_U(u − s g)| / s`, zero exactly at discrete points where
/// the variational inequality holds.
pub fn smp_residual(
    problem: &ProblemSpec,
    control: &ControlField,
    g: &BoundaryArray,
    step_size: f64,
) -> Result<OptimalityReport> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size {step_size} must be positive")));
    }
    check_control_shape(problem, g)?;
    let set: &ControlSet = &problem.controls;
    let m = problem.control_dim();
    let mut worst = 0.0;
    let mut at = None;
    let mut trial = vec![0.0; m];
    let mut proj = vec![0.0; m];
    for n in 0..g.steps() {
        for k in 0..g.boundary() {
            let u = control.values().at(n, k);
            let gk = g.at(n, k);
            for c in 0..m {
                trial[c] = u[c] - step_size * gk[c];
            }
            set.project(&trial, &mut proj);
            let d: Vec<f64> = u.iter().zip(&proj).map(|(a, b)| (a - b) / step_size).collect();
            let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r > worst || (r.is_nan() && at.is_none()) {
                worst = r;
                at = Some((n, k, d));
            }
        }
    }
    let witness = match at {
        Some((n, k, d)) if worst > RESIDUAL_ZERO => Some(witness(problem, control, n, k, d, worst)),
        _ => None,
    };
    Ok(OptimalityReport { residual: worst, step_size, witness, sufficiency: None, gradient: g.clone() })
}

/// Sufficiency check on an ensemble of paths with their pathwise co-states.
///
/// Uses the path-averaged boundary co-state `P̄` and density `ḡ`. The verdict
/// holds when (i) the analytic convexity flags hold for some `σ ∈ {−1, +1}`,
/// (ii) `σ P̄ ≥ −tol` at every discrete point and (iii) `−ḡ` lies in the
/// normal cone of `U` at `u` (up to `tol`). The better-satisfied `σ` branch
/// is reported. The returned residual uses step size one.
pub fn check_sufficient(
    problem: &ProblemSpec,
    ensemble: &[(StateTrajectory, AdjointTrajectory)],
    control: &ControlField,
    tol: f64,
) -> Result<OptimalityReport> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("check_sufficient needs at least one path".into()));
    }
    let densities =
        ensemble.iter().map(|(t, a)| gradient_density(problem, t, control, a)).collect::<Result<Vec<_>>>()?;
    let g = mean_density(&densities)?;
    let adjoints: Vec<&AdjointTrajectory> = ensemble.iter().map(|(_, a)| a).collect();
    let pbar = mean_boundary_costate(problem, &adjoints)?;
    check_sufficient_from_means(problem, control, &g, &pbar, tol)
}

/// Path average of the boundary co-state `P̄_n[k]` for `n < N`, laid out
/// like a scalar [`BoundaryArray`].
pub fn mean_boundary_costate(problem: &ProblemSpec, adjoints: &[&AdjointTrajectory]) -> Result<BoundaryArray> {
    if adjoints.is_empty() {
        return Err(Error::InvalidArgument("no co-states to average".into()));
    }
    let mesh = &problem.mesh;
    let mut pbar = BoundaryArray::zeros(problem.steps(), mesh.num_boundary(), 1);
    for a in adjoints {
        if a.grid() != &problem.grid {
            return Err(Error::InvalidArgument("adjoint time grid differs from the problem's".into()));
        }
        for n in 0..problem.steps() {
            for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
                pbar.at_mut(n, k)[0] += a.state(n)[b];
            }
        }
    }
    Ok(pbar.scaled(1.0 / adjoints.len() as f64))
}

/// [`check_sufficient`] given the path-averaged density `g` and boundary
/// co-state `pbar`.
pub fn check_sufficient_from_means(
    problem: &ProblemSpec,
    control: &ControlField,
    g: &BoundaryArray,
    pbar: &BoundaryArray,
    tol: f64,
) -> Result<OptimalityReport> {
    check_control_shape(problem, g)?;
    let steps = problem.steps();
    let nb = problem.mesh.num_boundary();
    if pbar.steps() != steps || pbar.boundary() != nb || pbar.dim() != 1 {
        return Err(Error::InvalidArgument("boundary co-state has the wrong shape".into()));
    }
    let mut report = smp_residual(problem, control, g, 1.0)?;
    let flags = problem.coeffs.convexity();
    let base =
        flags.flux_linear && flags.ell_convex && flags.ell_bar_convex && flags.psi_convex && flags.psi_bar_convex;

    // Normal cone condition (independent of σ).
    let mut cone_witness = None;
    'outer: for n in 0..steps {
        for k in 0..nb {
            let w: Vec<f64> = g.at(n, k).iter().map(|v| -v).collect();
            if !problem.controls.normal_cone_contains(control.values().at(n, k), &w, tol)? {
                let size = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                cone_witness = Some(witness(problem, control, n, k, w, size));
                break 'outer;
            }
        }
    }

    let branch = |sigma: f64| {
        let mut worst = f64::INFINITY;
        let mut at = None;
        for n in 0..steps {
            for k in 0..nb {
                let v = sigma * pbar.at(n, k)[0];
                if v < worst {
                    worst = v;
                    at = Some((n, k));
                }
            }
        }
        let flags_ok = base && flags.minus_sigma_gamma_convex(sigma);
        let sign_ok = worst >= -tol;
        let w = if sign_ok { None } else { at.map(|(n, k)| witness(problem, control, n, k, vec![sigma], worst)) };
        (sigma, flags_ok, sign_ok, worst, w)
    };
    let [plus, minus] = [branch(1.0), branch(-1.0)];
    // Prefer the branch whose flags hold, then whose sign condition holds,
    // then the larger worst value; ties go to σ = +1.
    let key = |b: &(f64, bool, bool, f64, Option<Witness>)| (b.1, b.2);
    let best = if key(&minus) > key(&plus) || (key(&minus) == key(&plus) && minus.3 > plus.3) { minus } else { plus };
    let (sigma, flags_ok, sign_ok, _, sign_witness) = best;

    let verdict = if !flags_ok {
        Verdict::NotApplicable
    } else if sign_ok && cone_witness.is_none() {
        Verdict::Holds
    } else {
        Verdict::Fails
    };
    let hypotheses = vec![
        Hypothesis { name: "flux_linear".into(), pass: flags.flux_linear, witness: None },
        Hypothesis {
            name: "minus_sigma_gamma_convex".into(),
            pass: flags.minus_sigma_gamma_convex(sigma),
            witness: None,
        },
        Hypothesis { name: "ell_convex".into(), pass: flags.ell_convex, witness: None },
        Hypothesis { name: "ell_bar_convex".into(), pass: flags.ell_bar_convex, witness: None },
        Hypothesis { name: "psi_convex".into(), pass: flags.psi_convex, witness: None },
        Hypothesis { name: "psi_bar_convex".into(), pass: flags.psi_bar_convex, witness: None },
        Hypothesis { name: "sigma_sign".into(), pass: sign_ok, witness: sign_witness },
        Hypothesis { name: "normal_cone".into(), pass: cone_witness.is_none(), witness: cone_witness },
    ];
    report.sufficiency = Some(Sufficiency { verdict, sigma, tolerance: tol, hypotheses });
    Ok(report)
}
