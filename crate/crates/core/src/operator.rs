//! The nonlinear operator `A(y, u)` in weak form, its state derivative and
//! the transpose of that derivative, together with the H and V norms and the
//! cost functionals `L` and `Ψ`.
//!
//! All operators return [`DualField`]s: coefficients of the functional
//! `z ↦ ⟨A(y, u), z⟩`, namely
//!
//! ```text
//! ⟨A(y, u), z⟩ = −∫_O a(x, ∇y)·∇z dx − ∫_Γ γ(ξ, ȳ, u) z̄ dξ
//! ```
//!
//! with the flux evaluated at element centroids on the element-constant P1
//! gradient, and the boundary integral computed with lumped boundary weights.
//! The normal-flux term of the strong form never appears: it is absorbed by
//! integration by parts.

use crate::banded::BandedMatrix;
use crate::coefficients::{Coefficients, ControlSet};
use crate::error::{Error, Result};
use crate::field::{DualField, StateField};
use crate::mesh::Mesh;

/// Controls outside `U` by more than this are rejected.
pub const CONTROL_TOLERANCE: f64 = 1e-12;

/// Bundles the mesh, coefficients and control set needed to evaluate `A`.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOperator<'a> {
    pub mesh: &'a Mesh,
    pub coeffs: &'a dyn Coefficients,
    pub controls: &'a ControlSet,
}

impl<'a> SpatialOperator<'a> {
    pub fn new(mesh: &'a Mesh, coeffs: &'a dyn Coefficients, controls: &'a ControlSet) -> Self {
        Self { mesh, coeffs, controls }
    }

    fn m(&self) -> usize {
        self.coeffs.control_dim()
    }

    /// Boundary control values for boundary slot `k`.
    fn control_at<'u>(&self, u: &'u [f64], k: usize) -> &'u [f64] {
        let m = self.m();
        &u[k * m..(k + 1) * m]
    }

    pub fn check_control(&self, u: &[f64]) -> Result<()> {
        let m = self.m();
        let nb = self.mesh.num_boundary();
        if u.len() != nb * m {
            return Err(Error::LengthMismatch { expected: nb * m, found: u.len() });
        }
        for k in 0..nb {
            for c in 0..m {
                let v = u[k * m + c];
                let (lo, hi) = (self.controls.lower()[c], self.controls.upper()[c]);
                if !(v >= lo - CONTROL_TOLERANCE && v <= hi + CONTROL_TOLERANCE) {
                    return Err(Error::ControlOutsideU { node: k, component: c, value: v, lo, hi });
                }
            }
        }
        Ok(())
    }

    fn check_inputs(&self, fields: &[&StateField], u: &[f64]) -> Result<()> {
        for f in fields {
            f.check_len(self.mesh)?;
        }
        self.check_control(u)
    }

    /// `⟨A(y, u), ·⟩` as a dual field.
    pub fn apply_a(&self, y: &StateField, u: &[f64]) -> Result<DualField> {
        self.check_inputs(&[y], u)?;
        let mesh = self.mesh;
        let mut out = DualField::zeros(mesh.num_nodes());
        for (ei, e) in mesh.elements().iter().enumerate() {
            let flux = self.coeffs.flux(e.centroid(), e.gradient(y.as_slice()));
            if !(flux[0].is_finite() && flux[1].is_finite()) {
                return Err(Error::NonFinite { what: "flux a(x, ∇y)", location: format!("element {ei}") });
            }
            for (&node, g) in e.nodes().iter().zip(e.basis_gradients()) {
                out[node] -= e.volume() * (flux[0] * g[0] + flux[1] * g[1]);
            }
        }
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            let xi = mesh.coords()[b];
            let g = self.coeffs.gamma(xi, y[b], self.control_at(u, k));
            if !g.is_finite() {
                return Err(Error::NonFinite { what: "boundary reaction γ", location: format!("boundary node {b}") });
            }
            out[b] -= mesh.boundary_mass()[k] * g;
        }
        Ok(out)
    }

    fn apply_linearized(&self, y: &StateField, u: &[f64], p: &StateField, transpose: bool) -> Result<DualField> {
        self.check_inputs(&[y, p], u)?;
        let mesh = self.mesh;
        let mut out = DualField::zeros(mesh.num_nodes());
        for (ei, e) in mesh.elements().iter().enumerate() {
            let jac = self.coeffs.flux_jacobian(e.centroid(), e.gradient(y.as_slice()));
            let gp = e.gradient(p.as_slice());
            let flux = if transpose {
                [jac[0][0] * gp[0] + jac[1][0] * gp[1], jac[0][1] * gp[0] + jac[1][1] * gp[1]]
            } else {
                [jac[0][0] * gp[0] + jac[0][1] * gp[1], jac[1][0] * gp[0] + jac[1][1] * gp[1]]
            };
            if !(flux[0].is_finite() && flux[1].is_finite()) {
                return Err(Error::NonFinite { what: "flux Jacobian D_ζa", location: format!("element {ei}") });
            }
            for (&node, g) in e.nodes().iter().zip(e.basis_gradients()) {
                out[node] -= e.volume() * (flux[0] * g[0] + flux[1] * g[1]);
            }
        }
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            let xi = mesh.coords()[b];
            let dg = self.coeffs.gamma_dy(xi, y[b], self.control_at(u, k));
            if !dg.is_finite() {
                return Err(Error::NonFinite { what: "D_ȳγ", location: format!("boundary node {b}") });
            }
            out[b] -= mesh.boundary_mass()[k] * dg * p[b];
        }
        Ok(out)
    }

    /// `D_yA(y, u) p`.
    pub fn apply_dya(&self, y: &StateField, u: &[f64], p: &StateField) -> Result<DualField> {
        self.apply_linearized(y, u, p, false)
    }

    /// `(D_yA(y, u))* p`, built with the transpose of `D_ζa`.
    pub fn apply_dya_adjoint(&self, y: &StateField, u: &[f64], p: &StateField) -> Result<DualField> {
        self.apply_linearized(y, u, p, true)
    }

    /// Matrix of `D_yA(y, u)` on the nodal basis: `J[i][j] = ⟨D_yA φ_j, φ_i⟩`.
    pub fn dya_matrix(&self, y: &StateField, u: &[f64]) -> Result<BandedMatrix> {
        self.check_inputs(&[y], u)?;
        let mesh = self.mesh;
        let mut mat = BandedMatrix::zeros(mesh.num_nodes(), mesh.bandwidth());
        for (ei, e) in mesh.elements().iter().enumerate() {
            let jac = self.coeffs.flux_jacobian(e.centroid(), e.gradient(y.as_slice()));
            if jac.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "flux Jacobian D_ζa", location: format!("element {ei}") });
            }
            let grads = e.basis_gradients();
            for (a, &i) in e.nodes().iter().enumerate() {
                for (b, &j) in e.nodes().iter().enumerate() {
                    let (gi, gj) = (grads[a], grads[b]);
                    let dg = [jac[0][0] * gj[0] + jac[0][1] * gj[1], jac[1][0] * gj[0] + jac[1][1] * gj[1]];
                    mat.add(i, j, -e.volume() * (gi[0] * dg[0] + gi[1] * dg[1]));
                }
            }
        }
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            let dg = self.coeffs.gamma_dy(mesh.coords()[b], y[b], self.control_at(u, k));
            if !dg.is_finite() {
                return Err(Error::NonFinite { what: "D_ȳγ", location: format!("boundary node {b}") });
            }
            mat.add(b, b, -mesh.boundary_mass()[k] * dg);
        }
        Ok(mat)
    }

    /// `D_uA(y, u) w` for a boundary control direction `w` (length `nb·m`):
    /// the dual field of `𝒢(ȳ, u, w) = (0, −D_uγ·w)`.
    pub fn apply_dua(&self, y: &StateField, u: &[f64], w: &[f64]) -> Result<DualField> {
        self.check_inputs(&[y], u)?;
        let mesh = self.mesh;
        let m = self.m();
        let mut out = DualField::zeros(mesh.num_nodes());
        let mut du = vec![0.0; m];
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            self.coeffs.gamma_du(mesh.coords()[b], y[b], self.control_at(u, k), &mut du);
            let dw: f64 = du.iter().zip(&w[k * m..(k + 1) * m]).map(|(a, c)| a * c).sum();
            out[b] -= mesh.boundary_mass()[k] * dw;
        }
        Ok(out)
    }

    /// `L(y, u) = ∫_O ℓ(x, y) + ∫_Γ ℓ̄(ξ, ȳ, u)` with lumped quadrature.
    pub fn running_cost(&self, y: &StateField, u: &[f64]) -> f64 {
        let mesh = self.mesh;
        let interior: f64 = mesh
            .coords()
            .iter()
            .zip(mesh.interior_mass())
            .enumerate()
            .map(|(i, (&x, &w))| w * self.coeffs.ell(x, y[i]))
            .sum();
        let boundary: f64 = mesh
            .boundary_nodes()
            .iter()
            .enumerate()
            .map(|(k, &b)| mesh.boundary_mass()[k] * self.coeffs.ell_bar(mesh.coords()[b], y[b], self.control_at(u, k)))
            .sum();
        interior + boundary
    }

    /// `D_yL(y, u)` as a dual field (lumped-mass weighted pointwise derivatives).
    pub fn running_cost_dy(&self, y: &StateField, u: &[f64]) -> DualField {
        let mesh = self.mesh;
        let mut out = DualField::zeros(mesh.num_nodes());
        for (i, (&x, &w)) in mesh.coords().iter().zip(mesh.interior_mass()).enumerate() {
            out[i] = w * self.coeffs.ell_dy(x, y[i]);
        }
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            out[b] += mesh.boundary_mass()[k] * self.coeffs.ell_bar_dy(mesh.coords()[b], y[b], self.control_at(u, k));
        }
        out
    }

    /// Pointwise `D_uℓ̄` at boundary slot `k`.
    pub fn ell_bar_du(&self, y: &StateField, u: &[f64], k: usize, out: &mut [f64]) {
        let b = self.mesh.boundary_nodes()[k];
        self.coeffs.ell_bar_du(self.mesh.coords()[b], y[b], self.control_at(u, k), out);
    }

    /// Pointwise `D_uγ` at boundary slot `k`.
    pub fn gamma_du(&self, y: &StateField, u: &[f64], k: usize, out: &mut [f64]) {
        let b = self.mesh.boundary_nodes()[k];
        self.coeffs.gamma_du(self.mesh.coords()[b], y[b], self.control_at(u, k), out);
    }

    /// `Ψ(y) = ∫_O ψ(x, y) + ∫_Γ ψ̄(ξ, ȳ)`.
    pub fn terminal_cost(&self, y: &StateField) -> f64 {
        let mesh = self.mesh;
        let interior: f64 = mesh
            .coords()
            .iter()
            .zip(mesh.interior_mass())
            .enumerate()
            .map(|(i, (&x, &w))| w * self.coeffs.psi(x, y[i]))
            .sum();
        let boundary: f64 = mesh
            .boundary_nodes()
            .iter()
            .enumerate()
            .map(|(k, &b)| mesh.boundary_mass()[k] * self.coeffs.psi_bar(mesh.coords()[b], y[b]))
            .sum();
        interior + boundary
    }

    /// `D_yΨ(y)` as a dual field.
    pub fn terminal_cost_dy(&self, y: &StateField) -> DualField {
        let mesh = self.mesh;
        let mut out = DualField::zeros(mesh.num_nodes());
        for (i, (&x, &w)) in mesh.coords().iter().zip(mesh.interior_mass()).enumerate() {
            out[i] = w * self.coeffs.psi_dy(x, y[i]);
        }
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            out[b] += mesh.boundary_mass()[k] * self.coeffs.psi_bar_dy(mesh.coords()[b], y[b]);
        }
        out
    }
}

/// `⟨f, g⟩_H = Σ M_O f g + Σ M_Γ f̄ ḡ`.
pub fn inner_h(mesh: &Mesh, f: &StateField, g: &StateField) -> Result<f64> {
    f.check_len(mesh)?;
    g.check_len(mesh)?;
    Ok(mesh.h_mass().iter().zip(f.as_slice().iter().zip(g.as_slice())).map(|(m, (a, b))| m * a * b).sum())
}

pub fn norm_h(mesh: &Mesh, f: &StateField) -> Result<f64> {
    Ok(inner_h(mesh, f, f)?.sqrt())
}

/// `‖∇f‖²_{L²(O)}` for the P1 interpolant.
pub fn gradient_norm_sq(mesh: &Mesh, f: &StateField) -> Result<f64> {
    f.check_len(mesh)?;
    Ok(mesh
        .elements()
        .iter()
        .map(|e| {
            let g = e.gradient(f.as_slice());
            e.volume() * (g[0] * g[0] + g[1] * g[1])
        })
        .sum())
}

/// `‖f̄‖²_{L²(Γ)}`.
pub fn boundary_norm_sq(mesh: &Mesh, f: &StateField) -> Result<f64> {
    f.check_len(mesh)?;
    Ok(mesh.boundary_nodes().iter().zip(mesh.boundary_mass()).map(|(&b, &w)| w * f[b] * f[b]).sum())
}

/// `‖f‖_V = ‖∇f‖_{L²(O)} + ‖f̄‖_{L²(Γ)}`.
pub fn norm_v(mesh: &Mesh, f: &StateField) -> Result<f64> {
    Ok(gradient_norm_sq(mesh, f)?.sqrt() + boundary_norm_sq(mesh, f)?.sqrt())
}

/// Trace: values at boundary nodes in boundary-list order.
pub fn trace_restrict(mesh: &Mesh, f: &StateField) -> Result<Vec<f64>> {
    f.check_len(mesh)?;
    Ok(f.boundary_values(mesh))
}

/// Extension by zero of boundary values to a nodal field.
pub fn extend_by_zero(mesh: &Mesh, boundary: &[f64]) -> StateField {
    let mut f = StateField::zeros(mesh.num_nodes());
    for (&b, &v) in mesh.boundary_nodes().iter().zip(boundary) {
        f[b] = v;
    }
    f
}
