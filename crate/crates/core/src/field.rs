//! Nodal fields on a [`Mesh`].
//!
//! A [`StateField`] stores one value per node; its boundary component is the
//! restriction to boundary nodes, so the pair `(y, ȳ)` is trace compatible by
//! construction. A [`DualField`] stores the coefficients of a functional
//! through its action on the nodal basis: `pairing(d, z) = Σ_i d_i z_i`.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Clone, Debug, PartialEq)]
pub struct StateField(Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct DualField(Vec<f64>);

macro_rules! nodal_vector {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }

            pub fn from_vec(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn scale(&mut self, s: f64) {
                self.0.iter_mut().for_each(|v| *v *= s);
            }

            /// `self += s * other`
            pub fn axpy(&mut self, s: f64, other: &Self) {
                for (a, b) in self.0.iter_mut().zip(&other.0) {
                    *a += s * b;
                }
            }

            pub fn check_len(&self, mesh: &Mesh) -> Result<()> {
                if self.0.len() != mesh.num_nodes() {
                    return Err(Error::LengthMismatch { expected: mesh.num_nodes(), found: self.0.len() });
                }
                Ok(())
            }
        }

        impl Index<usize> for $ty {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl IndexMut<usize> for $ty {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.0[i]
            }
        }
    };
}

nodal_vector!(StateField);
nodal_vector!(DualField);

impl StateField {
    pub fn constant(mesh: &Mesh, c: f64) -> Self {
        Self(vec![c; mesh.num_nodes()])
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self(mesh.coords().iter().map(|&x| f(x)).collect())
    }

    /// Boundary component ȳ, ordered like [`Mesh::boundary_nodes`].
    pub fn boundary_values(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.boundary_nodes().iter().map(|&b| self.0[b]).collect()
    }

    /// Riesz representative of a dual field with respect to the lumped
    /// H-inner product.
    pub fn riesz(mesh: &Mesh, d: &DualField) -> Self {
        Self(d.0.iter().zip(mesh.h_mass()).map(|(v, m)| v / m).collect())
    }
}

impl DualField {
    /// `pairing(d, z) = Σ_i d_i z_i`, the V*–V duality on nodal coefficients.
    pub fn pairing(&self, z: &StateField) -> f64 {
        self.0.iter().zip(&z.0).map(|(a, b)| a * b).sum()
    }

    /// H-lift of a state field: the functional `z ↦ ⟨f, z⟩_H`.
    pub fn lift(mesh: &Mesh, f: &StateField) -> Self {
        Self(f.0.iter().zip(mesh.h_mass()).map(|(v, m)| v * m).collect())
    }

    /// Norm of the Riesz representative in H.
    pub fn h_norm(&self, mesh: &Mesh) -> f64 {
        self.0.iter().zip(mesh.h_mass()).map(|(v, m)| v * v / m).sum::<f64>().sqrt()
    }
}

/// Uniform time grid `t_n = n T / N`, `n = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
        }
        if steps < 1 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }
}

/// Time-indexed state fields `Y_0, …, Y_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    grid: TimeGrid,
    states: Vec<StateField>,
}

impl StateTrajectory {
    pub fn new(grid: TimeGrid, states: Vec<StateField>) -> Result<Self> {
        if states.len() != grid.steps() + 1 {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} states for {} steps",
                states.len(),
                grid.steps()
            )));
        }
        Ok(Self { grid, states })
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
        self.states.last().expect("trajectory is never empty")
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(StateField::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Domain;

    #[test]
    fn riesz_inverts_lift() {
        let mesh = Mesh::build(&Domain::Interval { lo: 0.0, hi: 2.0 }, &[6]).unwrap();
        let f = StateField::from_fn(&mesh, |x| x[0].sin());
        let back = StateField::riesz(&mesh, &DualField::lift(&mesh, &f));
        for i in 0..f.len() {
            assert!((back[i] - f[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn time_grid_rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
        assert!((g.dt() - 1.0 / 3.0).abs() < 1e-16);
    }
}
