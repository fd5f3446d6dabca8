use std::sync::Arc;

use crate::coefficients::{Coefficients, ControlSet};
use crate::error::{Error, Result};
use crate::field::{StateField, TimeGrid};
use crate::mesh::Mesh;
use crate::noise::NoiseSpec;
use crate::operator::SpatialOperator;

/// Everything needed to simulate and evaluate the controlled system.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub mesh: Mesh,
    pub coeffs: Arc<dyn Coefficients>,
    pub controls: ControlSet,
    pub noise: NoiseSpec,
    pub grid: TimeGrid,
    pub initial: StateField,
}

impl ProblemSpec {
    pub fn new(
        mesh: Mesh,
        coeffs: Arc<dyn Coefficients>,
        controls: ControlSet,
        noise: NoiseSpec,
        grid: TimeGrid,
        initial: StateField,
    ) -> Result<Self> {
        initial.check_len(&mesh)?;
        if !initial.is_finite() {
            return Err(Error::InvalidArgument("initial state has non-finite entries".into()));
        }
        if controls.dim() != coeffs.control_dim() {
            return Err(Error::InvalidArgument(format!(
                "control set has dimension {} but the coefficients expect {}",
                controls.dim(),
                coeffs.control_dim()
            )));
        }
        for m in noise.interior_modes() {
            if m.shape.len() != mesh.num_nodes() {
                return Err(Error::LengthMismatch { expected: mesh.num_nodes(), found: m.shape.len() });
            }
        }
        for m in noise.boundary_modes() {
            if m.shape.len() != mesh.num_boundary() {
                return Err(Error::LengthMismatch { expected: mesh.num_boundary(), found: m.shape.len() });
            }
        }
        Ok(Self { mesh, coeffs, controls, noise, grid, initial })
    }

    pub fn operator(&self) -> SpatialOperator<'_> {
        SpatialOperator::new(&self.mesh, self.coeffs.as_ref(), &self.controls)
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim()
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed()
    }

    /// Copy with the noise switched off (same modes, zero amplitudes).
    pub fn deterministic(&self) -> Self {
        Self { noise: self.noise.silenced(), ..self.clone() }
    }

    pub fn with_initial(&self, initial: StateField) -> Result<Self> {
        initial.check_len(&self.mesh)?;
        Ok(Self { initial, ..self.clone() })
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Self {
        Self { grid, ..self.clone() }
    }
}
