//! Coefficient families for the flux `a`, boundary reaction `γ` and the
//! running/terminal costs, plus sample-based auditing of their structural
//! hypotheses (growth bounds, derivative bounds, strong monotonicity).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Declared structural constants of a coefficient set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Constants {
    /// Strong monotonicity modulus of `a` and `γ`.
    pub delta: f64,
    /// Growth/derivative bound of `a` and `γ`.
    pub c0: f64,
    /// Growth bound of the terminal costs.
    pub c1: f64,
    /// Growth bound of the running costs.
    pub c2: f64,
}

/// Analytic structure flags used to gate the sufficiency check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvexityFlags {
    pub flux_linear: bool,
    pub gamma_affine_in_u: bool,
    /// `(ȳ, u) ↦ γ` is convex (so `−σγ` is convex for `σ = −1`).
    pub gamma_convex: bool,
    /// `(ȳ, u) ↦ γ` is concave (so `−σγ` is convex for `σ = +1`).
    pub gamma_concave: bool,
    pub ell_convex: bool,
    pub ell_bar_convex: bool,
    pub psi_convex: bool,
    pub psi_bar_convex: bool,
}

impl ConvexityFlags {
    /// Whether `(ȳ, u) ↦ −σ γ(ξ, ȳ, u)` is convex.
    pub fn minus_sigma_gamma_convex(&self, sigma: f64) -> bool {
        if sigma > 0.0 {
            self.gamma_concave
        } else {
            self.gamma_convex
        }
    }
}

/// Pointwise coefficient functions and their derivatives.
///
/// Spatial arguments are `[x, y]` with the unused component zero in 1D, and
/// gradients `ζ` follow the same convention.
pub trait Coefficients: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn control_dim(&self) -> usize;

    fn flux(&self, x: [f64; 2], zeta: [f64; 2]) -> [f64; 2];
    /// `D_ζ a(x, ζ)`, row-major: `jac[i][j] = ∂a_i/∂ζ_j`.
    fn flux_jacobian(&self, x: [f64; 2], zeta: [f64; 2]) -> [[f64; 2]; 2];

    fn gamma(&self, xi: [f64; 2], y: f64, u: &[f64]) -> f64;
    fn gamma_dy(&self, xi: [f64; 2], y: f64, u: &[f64]) -> f64;
    fn gamma_du(&self, xi: [f64; 2], y: f64, u: &[f64], out: &mut [f64]);

    fn ell(&self, x: [f64; 2], y: f64) -> f64;
    fn ell_dy(&self, x: [f64; 2], y: f64) -> f64;
    fn ell_bar(&self, xi: [f64; 2], y: f64, u: &[f64]) -> f64;
    fn ell_bar_dy(&self, xi: [f64; 2], y: f64, u: &[f64]) -> f64;
    fn ell_bar_du(&self, xi: [f64; 2], y: f64, u: &[f64], out: &mut [f64]);

    fn psi(&self, x: [f64; 2], y: f64) -> f64;
    fn psi_dy(&self, x: [f64; 2], y: f64) -> f64;
    fn psi_bar(&self, xi: [f64; 2], y: f64) -> f64;
    fn psi_bar_dy(&self, xi: [f64; 2], y: f64) -> f64;

    fn rho(&self, _x: [f64; 2]) -> f64 {
        1.0
    }
    fn rho_tilde(&self, _xi: [f64; 2]) -> f64 {
        1.0
    }

    fn constants(&self) -> Constants;
    fn convexity(&self) -> ConvexityFlags;
}

/// Quadratic tracking weights: `ℓ = ½ w (y − target)²` and likewise for the
/// other cost terms; the control penalty is `½ α |u|²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostWeights {
    pub interior_running: f64,
    pub boundary_running: f64,
    pub control: f64,
    pub interior_terminal: f64,
    pub boundary_terminal: f64,
    pub target: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            interior_running: 1.0,
            boundary_running: 1.0,
            control: 1.0,
            interior_terminal: 1.0,
            boundary_terminal: 1.0,
            target: 0.0,
        }
    }
}

impl CostWeights {
    /// All weights zero: a problem with no cost at all.
    pub fn zero() -> Self {
        Self {
            interior_running: 0.0,
            boundary_running: 0.0,
            control: 0.0,
            interior_terminal: 0.0,
            boundary_terminal: 0.0,
            target: 0.0,
        }
    }
}

/// Parameters of the built-in families.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyParams {
    /// Strength of the saturating part of the flux, `a = ζ + ε tanh(ζ)`.
    pub epsilon: f64,
    /// Strength of `κ arctan(ȳ)` in the boundary reaction.
    pub kappa: f64,
    /// Linear coefficient of `ȳ` in the boundary reaction.
    pub gamma_slope: f64,
    /// Control loading `β`; its length is the control dimension.
    pub beta: Vec<f64>,
    /// Declared monotonicity modulus; derived from the parameters if absent.
    pub delta: Option<f64>,
    pub cost: CostWeights,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self { epsilon: 0.0, kappa: 0.0, gamma_slope: 1.0, beta: vec![1.0], delta: None, cost: CostWeights::default() }
    }
}

/// `a(x, ζ) = ζ + ε tanh(ζ)` (componentwise),
/// `γ(ξ, ȳ, u) = g ȳ + κ arctan(ȳ) + β·u`, quadratic tracking costs.
#[derive(Clone, Debug)]
pub struct ParametricFamily {
    name: String,
    params: FamilyParams,
    constants: Constants,
}

impl ParametricFamily {
    pub fn params(&self) -> &FamilyParams {
        &self.params
    }
}

/// Looks up a built-in family (`lq-dbc` or `semilinear-dbc`) and returns it
/// with its default control set `U = [−1, 1]^m`.
pub fn builtin_problem(name: &str, params: FamilyParams) -> Result<(ParametricFamily, ControlSet)> {
    match name {
        "lq-dbc" => {
            if params.epsilon != 0.0 || params.kappa != 0.0 || params.gamma_slope != 1.0 {
                return Err(Error::InvalidArgument(
                    "lq-dbc fixes epsilon = 0, kappa = 0, gamma_slope = 1; use semilinear-dbc to vary them".into(),
                ));
            }
        }
        "semilinear-dbc" => {
            if params.epsilon < 0.0 || params.kappa < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "semilinear-dbc needs epsilon >= 0 and kappa >= 0, got {} and {}",
                    params.epsilon, params.kappa
                )));
            }
        }
        other => return Err(Error::UnknownFamily(other.to_string())),
    }
    if params.beta.is_empty() {
        return Err(Error::InvalidArgument("beta must have at least one component".into()));
    }
    let all = [
        params.epsilon,
        params.kappa,
        params.gamma_slope,
        params.cost.interior_running,
        params.cost.boundary_running,
        params.cost.control,
        params.cost.interior_terminal,
        params.cost.boundary_terminal,
        params.cost.target,
    ];
    if all.iter().chain(&params.beta).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("family parameters must be finite".into()));
    }

    let m = params.beta.len();
    let beta_norm = params.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    let t2 = params.cost.target.powi(2).max(1.0);
    let w = &params.cost;
    let c0 = (1.0 + params.epsilon).max(params.gamma_slope.abs() + params.kappa).max(beta_norm).max(1.0);
    let c1 = w.interior_terminal.abs().max(w.boundary_terminal.abs()).max(1.0) * t2;
    let c2 = w.interior_running.abs().max(w.boundary_running.abs()).max(w.control.abs()).max(1.0) * t2;
    let delta =
        params.delta.unwrap_or_else(|| if params.gamma_slope > 0.0 { params.gamma_slope.min(1.0) } else { 1.0 });
    let family = ParametricFamily { name: name.to_string(), params, constants: Constants { delta, c0, c1, c2 } };
    Ok((family, ControlSet::new(vec![-1.0; m], vec![1.0; m])?))
}

fn sech2(t: f64) -> f64 {
    let c = t.cosh();
    if c.is_finite() {
        1.0 / (c * c)
    } else {
        0.0
    }
}

impl Coefficients for ParametricFamily {
    fn name(&self) -> &str {
        &self.name
    }

    fn control_dim(&self) -> usize {
        self.params.beta.len()
    }

    fn flux(&self, _x: [f64; 2], z: [f64; 2]) -> [f64; 2] {
        let e = self.params.epsilon;
        [z[0] + e * z[0].tanh(), z[1] + e * z[1].tanh()]
    }

    fn flux_jacobian(&self, _x: [f64; 2], z: [f64; 2]) -> [[f64; 2]; 2] {
        let e = self.params.epsilon;
        [[1.0 + e * sech2(z[0]), 0.0], [0.0, 1.0 + e * sech2(z[1])]]
    }

    fn gamma(&self, _xi: [f64; 2], y: f64, u: &[f64]) -> f64 {
        let p = &self.params;
        let bu: f64 = p.beta.iter().zip(u).map(|(b, v)| b * v).sum();
        p.gamma_slope * y + p.kappa * y.atan() + bu
    }

    fn gamma_dy(&self, _xi: [f64; 2], y: f64, _u: &[f64]) -> f64 {
        self.params.gamma_slope + self.params.kappa / (1.0 + y * y)
    }

    fn gamma_du(&self, _xi: [f64; 2], _y: f64, _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.params.beta);
    }

    fn ell(&self, _x: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        0.5 * c.interior_running * (y - c.target).powi(2)
    }

    fn ell_dy(&self, _x: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        c.interior_running * (y - c.target)
    }

    fn ell_bar(&self, _xi: [f64; 2], y: f64, u: &[f64]) -> f64 {
        let c = &self.params.cost;
        let u2: f64 = u.iter().map(|v| v * v).sum();
        0.5 * c.boundary_running * (y - c.target).powi(2) + 0.5 * c.control * u2
    }

    fn ell_bar_dy(&self, _xi: [f64; 2], y: f64, _u: &[f64]) -> f64 {
        let c = &self.params.cost;
        c.boundary_running * (y - c.target)
    }

    fn ell_bar_du(&self, _xi: [f64; 2], _y: f64, u: &[f64], out: &mut [f64]) {
        let alpha = self.params.cost.control;
        for (o, v) in out.iter_mut().zip(u) {
            *o = alpha * v;
        }
    }

    fn psi(&self, _x: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        0.5 * c.interior_terminal * (y - c.target).powi(2)
    }

    fn psi_dy(&self, _x: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        c.interior_terminal * (y - c.target)
    }

    fn psi_bar(&self, _xi: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        0.5 * c.boundary_terminal * (y - c.target).powi(2)
    }

    fn psi_bar_dy(&self, _xi: [f64; 2], y: f64) -> f64 {
        let c = &self.params.cost;
        c.boundary_terminal * (y - c.target)
    }

    fn constants(&self) -> Constants {
        self.constants
    }

    fn convexity(&self) -> ConvexityFlags {
        let p = &self.params;
        let c = &p.cost;
        // arctan is neither convex nor concave on ℝ.
        let gamma_affine = p.kappa == 0.0;
        ConvexityFlags {
            flux_linear: p.epsilon == 0.0,
            gamma_affine_in_u: true,
            gamma_convex: gamma_affine,
            gamma_concave: gamma_affine,
            ell_convex: c.interior_running >= 0.0,
            ell_bar_convex: c.boundary_running >= 0.0 && c.control >= 0.0,
            psi_convex: c.interior_terminal >= 0.0,
            psi_bar_convex: c.boundary_terminal >= 0.0,
        }
    }
}

/// Axis-aligned box `U = Π [lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ControlSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(format!("control bounds have lengths {} and {}", lo.len(), hi.len())));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(Error::InvalidArgument(format!("control bound {i}: lower {l} exceeds upper {h}")));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol)
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = v[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn project_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.project(v, &mut out);
        out
    }

    /// Whether `w ∈ N_U(u)` up to `tol`, i.e. `w·(v − u) ≤ tol` for all
    /// `v ∈ U`. For a box this reduces to sign conditions per component.
    pub fn normal_cone_contains(&self, u: &[f64], w: &[f64], tol: f64) -> Result<bool> {
        if !self.contains(u, tol) {
            return Err(Error::InvalidArgument(format!("point {u:?} is not in U")));
        }
        Ok(u.iter().zip(w).enumerate().all(|(i, (&ui, &wi))| {
            let below_top = ui < self.hi[i] - tol;
            let above_bottom = ui > self.lo[i] + tol;
            (!below_top || wi <= tol) && (!above_bottom || wi >= -tol)
        }))
    }

    /// Vertices of the box (each component at one of its bounds).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| (0..m).map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] }).collect())
            .collect()
    }
}

/// Worst observed margin of one hypothesis over the samples.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    /// Minimum over samples of `(rhs − lhs) / (1 + |rhs|)`; non-negative
    /// means the inequality held at every sample.
    pub worst_margin: f64,
    pub worst_sample: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub family: String,
    pub samples: usize,
    pub constants: Constants,
    pub checks: Vec<HypothesisCheck>,
    pub pass: bool,
}

impl AssumptionReport {
    pub fn first_failure(&self) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// Margins at or above this value count as satisfied.
pub const MARGIN_TOLERANCE: f64 = -1e-10;

struct Tracker {
    checks: Vec<HypothesisCheck>,
}

impl Tracker {
    fn record(&mut self, name: &str, lhs: f64, rhs: f64, sample: impl FnOnce() -> String) {
        let margin =
            if lhs.is_finite() && rhs.is_finite() { (rhs - lhs) / (1.0 + rhs.abs()) } else { f64::NEG_INFINITY };
        let check = match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => c,
            None => {
                self.checks.push(HypothesisCheck {
                    name: name.to_string(),
                    worst_margin: f64::INFINITY,
                    worst_sample: String::new(),
                    pass: true,
                });
                self.checks.last_mut().unwrap()
            }
        };
        if margin < check.worst_margin || (margin.is_nan() && check.pass) {
            check.worst_margin = margin;
            check.worst_sample = sample();
        }
        check.pass = check.worst_margin >= MARGIN_TOLERANCE;
    }
}

fn spectral_norm(j: [[f64; 2]; 2], dim: usize) -> f64 {
    if dim == 1 {
        return j[0][0].abs();
    }
    // Largest eigenvalue of JᵀJ.
    let a = j[0][0] * j[0][0] + j[1][0] * j[1][0];
    let b = j[0][0] * j[0][1] + j[1][0] * j[1][1];
    let d = j[0][1] * j[0][1] + j[1][1] * j[1][1];
    let mean = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mean + disc).sqrt()
}

fn draw_scalar(rng: &mut impl Rng) -> f64 {
    let scale = 10f64.powf(rng.random_range(-2.0..3.0));
    scale * rng.random_range(-1.0..1.0)
}

/// Audits the growth, derivative and monotonicity hypotheses on random
/// samples. Points are drawn from the unit box; state and gradient values
/// span five orders of magnitude; controls are drawn from `u_set` (or from a
/// symmetric range when it is unbounded).
pub fn validate_assumptions(
    coeffs: &dyn Coefficients,
    u_set: &ControlSet,
    dim: usize,
    rng: &mut impl Rng,
    n_samples: usize,
) -> Result<AssumptionReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if u_set.dim() != coeffs.control_dim() {
        return Err(Error::InvalidArgument(format!(
            "control set dimension {} differs from coefficient control dimension {}",
            u_set.dim(),
            coeffs.control_dim()
        )));
    }
    let k = coeffs.constants();
    let m = coeffs.control_dim();
    let mut t = Tracker { checks: Vec::new() };
    let positive = [k.delta, k.c0, k.c1, k.c2].iter().cloned().fold(f64::INFINITY, f64::min);
    t.record("constants.positive", 0.0, positive, || format!("{k:?}"));

    let mut du = vec![0.0; m];
    for _ in 0..n_samples {
        let mut x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let mut zeta = [draw_scalar(rng), draw_scalar(rng)];
        let mut eta = [draw_scalar(rng), draw_scalar(rng)];
        if dim == 1 {
            x[1] = 0.0;
            zeta[1] = 0.0;
            eta[1] = 0.0;
        }
        let y = draw_scalar(rng);
        let y2 = draw_scalar(rng);
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let (l, h) = (u_set.lower()[i], u_set.upper()[i]);
                if l.is_finite() && h.is_finite() {
                    if l == h {
                        l
                    } else {
                        rng.random_range(l..=h)
                    }
                } else {
                    draw_scalar(rng).clamp(l, h)
                }
            })
            .collect();
        let unorm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = coeffs.rho(x);
        let rho_t = coeffs.rho_tilde(x);

        // (A1), (A2)
        let a = coeffs.flux(x, zeta);
        let an = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let zn = (zeta[0] * zeta[0] + zeta[1] * zeta[1]).sqrt();
        t.record("A1.flux_growth", an, k.c0 * (rho + zn), || format!("x={x:?} zeta={zeta:?}"));
        let jac = coeffs.flux_jacobian(x, zeta);
        t.record("A1.flux_jacobian", spectral_norm(jac, dim), k.c0, || format!("x={x:?} zeta={zeta:?}"));
        let b = coeffs.flux(x, eta);
        let d = [zeta[0] - eta[0], zeta[1] - eta[1]];
        let lhs = (a[0] - b[0]) * d[0] + (a[1] - b[1]) * d[1];
        let d2 = d[0] * d[0] + d[1] * d[1];
        t.record("A2.flux_monotone", k.delta * d2, lhs, || format!("x={x:?} zeta={zeta:?} eta={eta:?}"));

        // (C1), (C2)
        let g = coeffs.gamma(x, y, &u);
        t.record("C1.gamma_growth", g.abs(), k.c0 * (rho_t + y.abs() + unorm), || format!("xi={x:?} y={y} u={u:?}"));
        t.record("C1.gamma_dy", coeffs.gamma_dy(x, y, &u).abs(), k.c0, || format!("xi={x:?} y={y} u={u:?}"));
        coeffs.gamma_du(x, y, &u, &mut du);
        let dun = du.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.record("C1.gamma_du", dun, k.c0 * (rho_t + y.abs()), || format!("xi={x:?} y={y} u={u:?}"));
        let g2 = coeffs.gamma(x, y2, &u);
        t.record("C2.gamma_monotone", k.delta * (y - y2).powi(2), (g - g2) * (y - y2), || {
            format!("xi={x:?} y={y} y'={y2} u={u:?}")
        });

        // (F1)
        t.record("F1.psi_growth", coeffs.psi(x, y).abs(), k.c1 * (rho * rho + y * y), || format!("x={x:?} y={y}"));
        t.record("F1.psi_derivative", coeffs.psi_dy(x, y).abs(), k.c1 * (rho + y.abs()), || format!("x={x:?} y={y}"));
        t.record("F1.psi_bar_growth", coeffs.psi_bar(x, y).abs(), k.c1 * (rho_t * rho_t + y * y), || {
            format!("xi={x:?} y={y}")
        });
        t.record("F1.psi_bar_derivative", coeffs.psi_bar_dy(x, y).abs(), k.c1 * (rho_t + y.abs()), || {
            format!("xi={x:?} y={y}")
        });

        // (L1)
        t.record("L1.ell_growth", coeffs.ell(x, y).abs(), k.c2 * (rho * rho + y * y), || format!("x={x:?} y={y}"));
        t.record("L1.ell_derivative", coeffs.ell_dy(x, y).abs(), k.c2 * (rho + y.abs()), || format!("x={x:?} y={y}"));
        t.record(
            "L1.ell_bar_growth",
            coeffs.ell_bar(x, y, &u).abs(),
            k.c2 * (rho_t * rho_t + y * y + unorm * unorm),
            || format!("xi={x:?} y={y} u={u:?}"),
        );
        t.record("L1.ell_bar_dy", coeffs.ell_bar_dy(x, y, &u).abs(), k.c2 * (rho_t + y.abs() + unorm), || {
            format!("xi={x:?} y={y} u={u:?}")
        });
        coeffs.ell_bar_du(x, y, &u, &mut du);
        let dln = du.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.record("L1.ell_bar_du", dln, k.c2 * (rho_t + y.abs() + unorm), || format!("xi={x:?} y={y} u={u:?}"));
    }

    let pass = t.checks.iter().all(|c| c.pass);
    Ok(AssumptionReport { family: coeffs.name().to_string(), samples: n_samples, constants: k, checks: t.checks, pass })
}

/// [`validate_assumptions`] driven by a ChaCha8 stream seeded with `seed`.
pub fn validate_assumptions_seeded(
    coeffs: &dyn Coefficients,
    u_set: &ControlSet,
    dim: usize,
    seed: u64,
    n_samples: usize,
) -> Result<AssumptionReport> {
    validate_assumptions(coeffs, u_set, dim, &mut ChaCha8Rng::seed_from_u64(seed), n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    type Probe<'a> = Box<dyn Fn(f64) -> f64 + 'a>;

    fn lq() -> ParametricFamily {
        builtin_problem("lq-dbc", FamilyParams::default()).unwrap().0
    }

    fn semilinear(epsilon: f64, kappa: f64) -> ParametricFamily {
        let params = FamilyParams { epsilon, kappa, ..FamilyParams::default() };
        builtin_problem("semilinear-dbc", params).unwrap().0
    }

    #[test]
    fn lq_family_passes_validation() {
        let fam = lq();
        let (_, u) = builtin_problem("lq-dbc", FamilyParams::default()).unwrap();
        for dim in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let report = validate_assumptions(&fam, &u, dim, &mut rng, 500).unwrap();
            assert!(report.pass, "{:#?}", report.first_failure());
            let mono = report.checks.iter().find(|c| c.name == "A2.flux_monotone").unwrap();
            // a(ζ) = ζ with δ = 1: margin is exactly zero.
            assert!(mono.worst_margin.abs() < 1e-12);
        }
    }

    #[test]
    fn anti_monotone_gamma_fails_c2() {
        let params = FamilyParams { gamma_slope: -1.0, ..FamilyParams::default() };
        let (fam, u) = builtin_problem("semilinear-dbc", params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = validate_assumptions(&fam, &u, 1, &mut rng, 200).unwrap();
        assert!(!report.pass);
        assert_eq!(report.first_failure().unwrap().name, "C2.gamma_monotone");
    }

    #[test]
    fn semilinear_family_passes_validation() {
        let fam = semilinear(0.5, 0.8);
        let u = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let report = validate_assumptions(&fam, &u, 2, &mut rng, 1000).unwrap();
        assert!(report.pass, "{:#?}", report.first_failure());
    }

    #[test]
    fn quadratic_terminal_cost_within_f1_bounds() {
        // ψ = ½y² with c₁ ≥ 1 and ρ ≡ 1.
        let fam = lq();
        assert!(fam.constants().c1 >= 1.0);
        let u = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let report = validate_assumptions(&fam, &u, 1, &mut rng, 300).unwrap();
        for c in report.checks.iter().filter(|c| c.name.starts_with("F1")) {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn semilinear_degenerates_to_lq() {
        let a = lq();
        let b = semilinear(0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let z = [draw_scalar(&mut rng), draw_scalar(&mut rng)];
            let y = draw_scalar(&mut rng);
            let u = [rng.random_range(-1.0..1.0)];
            assert_eq!(a.flux(x, z), b.flux(x, z));
            assert_eq!(a.flux_jacobian(x, z), b.flux_jacobian(x, z));
            assert_eq!(a.gamma(x, y, &u), b.gamma(x, y, &u));
            assert_eq!(a.gamma_dy(x, y, &u), b.gamma_dy(x, y, &u));
            assert_eq!(a.ell_bar(x, y, &u), b.ell_bar(x, y, &u));
            assert_eq!(a.psi(x, y), b.psi(x, y));
        }
    }

    #[test]
    fn semilinear_jacobian_eigenvalues_bounded() {
        let fam = semilinear(0.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let z = [draw_scalar(&mut rng), draw_scalar(&mut rng)];
            let j = fam.flux_jacobian([0.0; 2], z);
            for ev in [j[0][0], j[1][1]] {
                assert!((1.0..=1.5).contains(&ev), "{ev}");
            }
            assert_eq!(j[0][1], 0.0);
        }
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(matches!(builtin_problem("heat", FamilyParams::default()), Err(Error::UnknownFamily(_))));
    }

    /// Central differences at ε ∈ {1e-3, 1e-4} must show second-order
    /// convergence of every declared derivative.
    #[test]
    fn derivatives_match_central_differences() {
        let fam = semilinear(0.7, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cd = |f: &dyn Fn(f64) -> f64, v: f64, h: f64| (f(v + h) - f(v - h)) / (2.0 * h);
        let mut min_order = f64::INFINITY;
        for _ in 0..50 {
            let x = [0.3, 0.4];
            let y: f64 = rng.random_range(-2.0..2.0);
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let u = [rng.random_range(-1.0..1.0)];
            let mut buf = [0.0];
            let analytic: Vec<(f64, Probe, f64)> = vec![
                (fam.gamma_dy(x, y, &u), Box::new(|s| fam.gamma(x, s, &u)), y),
                (
                    {
                        fam.gamma_du(x, y, &u, &mut buf);
                        buf[0]
                    },
                    Box::new(|s| fam.gamma(x, y, &[s])),
                    u[0],
                ),
                (fam.flux_jacobian(x, z)[0][0], Box::new(|s| fam.flux(x, [s, z[1]])[0]), z[0]),
                (fam.flux_jacobian(x, z)[1][1], Box::new(|s| fam.flux(x, [z[0], s])[1]), z[1]),
                (fam.ell_dy(x, y), Box::new(|s| fam.ell(x, s)), y),
                (fam.ell_bar_dy(x, y, &u), Box::new(|s| fam.ell_bar(x, s, &u)), y),
                (
                    {
                        fam.ell_bar_du(x, y, &u, &mut buf);
                        buf[0]
                    },
                    Box::new(|s| fam.ell_bar(x, y, &[s])),
                    u[0],
                ),
                (fam.psi_dy(x, y), Box::new(|s| fam.psi(x, s)), y),
                (fam.psi_bar_dy(x, y), Box::new(|s| fam.psi_bar(x, s)), y),
            ];
            for (d, f, v) in &analytic {
                let e1 = (cd(f.as_ref(), *v, 1e-3) - d).abs();
                let e2 = (cd(f.as_ref(), *v, 1e-4) - d).abs();
                assert!(e2 < 1e-7, "derivative mismatch {e2}");
                if e1 > 1e-11 {
                    min_order = min_order.min((e1 / e2).log10());
                }
            }
        }
        assert!(min_order >= 1.9, "observed order {min_order}");
    }

    #[test]
    fn projection_examples() {
        let u = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(u.project_vec(&[1.5]), vec![1.0]);
        assert_eq!(u.project_vec(&[0.25]), vec![0.25]);
        assert_eq!(u.project_vec(&[-7.0]), vec![-1.0]);
    }

    #[test]
    fn normal_cone_examples() {
        let u = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        assert!(u.normal_cone_contains(&[1.0], &[0.3], 1e-12).unwrap());
        assert!(!u.normal_cone_contains(&[0.0], &[0.3], 1e-12).unwrap());
        assert!(u.normal_cone_contains(&[0.0], &[0.0], 1e-12).unwrap());
        assert!(u.normal_cone_contains(&[-1.0], &[-2.0], 1e-12).unwrap());
        assert!(!u.normal_cone_contains(&[-1.0], &[2.0], 1e-12).unwrap());
        assert!(u.normal_cone_contains(&[2.0], &[0.0], 1e-12).is_err());
    }

    #[test]
    fn invalid_box_is_rejected() {
        assert!(ControlSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(ControlSet::new(vec![0.0, 0.0], vec![1.0]).is_err());
        let unb = ControlSet::new(vec![f64::NEG_INFINITY], vec![1.0]).unwrap();
        assert!(!unb.is_bounded());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_idempotent_and_nonexpansive(
                v in prop::collection::vec(-10.0f64..10.0, 3),
                w in prop::collection::vec(-10.0f64..10.0, 3),
            ) {
                let u = ControlSet::new(vec![-1.0, 0.0, -2.0], vec![1.0, 0.5, 3.0]).unwrap();
                let pv = u.project_vec(&v);
                prop_assert_eq!(u.project_vec(&pv), pv.clone());
                let pw = u.project_vec(&w);
                let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                prop_assert!(d(&pv, &pw) <= d(&v, &w) + 1e-15);
            }

            #[test]
            fn normal_cone_matches_vertex_definition(
                u in prop::collection::vec(-1.0f64..1.0, 2),
                w in prop::collection::vec(-1.0f64..1.0, 2),
                snap in prop::collection::vec(0u8..3, 2),
            ) {
                let set = ControlSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
                let u: Vec<f64> = u.iter().zip(&snap).map(|(&v, &s)| match s { 0 => -1.0, 1 => 1.0, _ => v }).collect();
                let by_vertices = set
                    .vertices()
                    .iter()
                    .all(|v| v.iter().zip(&u).zip(&w).map(|((a, b), c)| c * (a - b)).sum::<f64>() <= 1e-12);
                prop_assert_eq!(set.normal_cone_contains(&u, &w, 1e-12).unwrap(), by_vertices);
            }
        }
    }
}
