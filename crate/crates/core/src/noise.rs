//! Truncated Karhunen–Loève noise `B dW` with block-diagonal `B = diag(b, b̃)`.
//!
//! Interior modes act on the L²(O) component only, boundary modes on the
//! L²(Γ) component only. Standard normals come from a ChaCha8 stream keyed
//! by `(seed, path)` and positioned at a per-step block, so the draw for a
//! given `(seed, path, step, mode)` never depends on call order or on how
//! paths are distributed over workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::DualField;
use crate::mesh::Mesh;

/// One noise mode: amplitude and spatial pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub sigma: f64,
    pub shape: Vec<f64>,
}

/// Amplitudes `σ_k = σ₀ k^{-decay}`, `k = 1, 2, …`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub sigma0: f64,
    pub boundary_sigma0: f64,
    pub decay: f64,
}

impl Spectrum {
    pub fn interior(&self, k: usize) -> f64 {
        self.sigma0 * ((k + 1) as f64).powf(-self.decay)
    }

    pub fn boundary(&self, k: usize) -> f64 {
        self.boundary_sigma0 * ((k + 1) as f64).powf(-self.decay)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    interior: Vec<Mode>,
    boundary: Vec<Mode>,
    seed: u64,
}

/// Nodal increment of `B ΔW`: an interior field on all nodes and a boundary
/// field on boundary slots.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrement {
    pub interior: Vec<f64>,
    pub boundary: Vec<f64>,
}

impl NoiseIncrement {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self { interior: vec![0.0; mesh.num_nodes()], boundary: vec![0.0; mesh.num_boundary()] }
    }

    /// The functional `z ↦ ⟨B ΔW, z⟩_H` on nodal coefficients.
    pub fn to_dual(&self, mesh: &Mesh) -> DualField {
        let mut d: Vec<f64> = self.interior.iter().zip(mesh.interior_mass()).map(|(w, m)| w * m).collect();
        for (k, &b) in mesh.boundary_nodes().iter().enumerate() {
            d[b] += mesh.boundary_mass()[k] * self.boundary[k];
        }
        DualField::from_vec(d)
    }

    /// `‖B ΔW‖²_H`.
    pub fn h_norm_sq(&self, mesh: &Mesh) -> f64 {
        let i: f64 = self.interior.iter().zip(mesh.interior_mass()).map(|(w, m)| m * w * w).sum();
        let b: f64 = self.boundary.iter().zip(mesh.boundary_mass()).map(|(w, m)| m * w * w).sum();
        i + b
    }
}

impl NoiseSpec {
    pub fn new(interior: Vec<Mode>, boundary: Vec<Mode>, seed: u64) -> Self {
        Self { interior, boundary, seed }
    }

    /// No modes at all.
    pub fn none(seed: u64) -> Self {
        Self::new(Vec::new(), Vec::new(), seed)
    }

    /// Default cosine/Fourier patterns, orthonormalized in the lumped inner
    /// products. When more modes are requested than the discrete space can
    /// hold (e.g. the two-point boundary of an interval) the patterns repeat
    /// cyclically, each repeat driven by its own Brownian motion.
    pub fn with_default_modes(
        mesh: &Mesh,
        spectrum: Spectrum,
        k_interior: usize,
        k_boundary: usize,
        seed: u64,
    ) -> Self {
        let ishapes = orthonormal_patterns(mesh.interior_mass(), interior_candidates(mesh), k_interior);
        let bshapes = orthonormal_patterns(mesh.boundary_mass(), boundary_candidates(mesh), k_boundary);
        let interior = (0..k_interior)
            .map(|k| Mode { sigma: spectrum.interior(k), shape: ishapes[k % ishapes.len()].clone() })
            .collect();
        let boundary = (0..k_boundary)
            .map(|k| Mode { sigma: spectrum.boundary(k), shape: bshapes[k % bshapes.len()].clone() })
            .collect();
        Self { interior, boundary, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Same modes with every amplitude set to zero.
    pub fn silenced(&self) -> Self {
        let mut s = self.clone();
        s.interior.iter_mut().chain(s.boundary.iter_mut()).for_each(|m| m.sigma = 0.0);
        s
    }

    pub fn interior_modes(&self) -> &[Mode] {
        &self.interior
    }

    pub fn boundary_modes(&self) -> &[Mode] {
        &self.boundary
    }

    pub fn num_modes(&self) -> usize {
        self.interior.len() + self.boundary.len()
    }

    /// Amplitudes in mode order (interior first, then boundary).
    pub fn sigmas(&self) -> Vec<f64> {
        self.interior.iter().chain(&self.boundary).map(|m| m.sigma).collect()
    }

    pub fn is_silent(&self) -> bool {
        self.interior.iter().chain(&self.boundary).all(|m| m.sigma == 0.0)
    }

    /// `‖B‖_{L₂(H)} = (Σ σ_k² + Σ σ̃_k²)^{1/2}`.
    pub fn hs_norm(&self) -> f64 {
        self.interior.iter().chain(&self.boundary).map(|m| m.sigma * m.sigma).sum::<f64>().sqrt()
    }

    /// Largest single amplitude; bounds the operator norm of `B`.
    pub fn max_sigma(&self) -> f64 {
        self.interior.iter().chain(&self.boundary).map(|m| m.sigma.abs()).fold(0.0, f64::max)
    }

    /// Standard normals `ξ_k` for every mode at `(path, step)`.
    pub fn standard_normals(&self, path: u64, step: u64) -> Vec<f64> {
        self.standard_normals_keyed(self.seed, path, step)
    }

    /// As [`standard_normals`](Self::standard_normals) with an explicit seed.
    pub fn standard_normals_keyed(&self, seed: u64, path: u64, step: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        rng.set_word_pos(u128::from(step) << 32);
        (0..self.num_modes()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `B ΔW` over one step of length `dt`.
    pub fn sample_increment(&self, mesh: &Mesh, dt: f64, path: u64, step: u64) -> Result<NoiseIncrement> {
        self.sample_increment_keyed(mesh, dt, self.seed, path, step)
    }

    /// As [`sample_increment`](Self::sample_increment) with an explicit seed.
    pub fn sample_increment_keyed(
        &self,
        mesh: &Mesh,
        dt: f64,
        seed: u64,
        path: u64,
        step: u64,
    ) -> Result<NoiseIncrement> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("noise step dt = {dt} must be positive")));
        }
        let mut inc = NoiseIncrement::zeros(mesh);
        if self.is_silent() {
            return Ok(inc);
        }
        let xi = self.standard_normals_keyed(seed, path, step);
        let sdt = dt.sqrt();
        for (mode, z) in self.interior.iter().zip(&xi) {
            let c = mode.sigma * sdt * z;
            for (w, g) in inc.interior.iter_mut().zip(&mode.shape) {
                *w += c * g;
            }
        }
        for (mode, z) in self.boundary.iter().zip(&xi[self.interior.len()..]) {
            let c = mode.sigma * sdt * z;
            for (w, g) in inc.boundary.iter_mut().zip(&mode.shape) {
                *w += c * g;
            }
        }
        Ok(inc)
    }

    /// `⟨f, e_k⟩_H` for every mode pattern `e_k` (interior patterns live in
    /// `L²(O)`, boundary patterns in `L²(Γ)`).
    pub fn mode_pairings(&self, mesh: &Mesh, f: &[f64]) -> Vec<f64> {
        let interior = self
            .interior
            .iter()
            .map(|m| m.shape.iter().zip(f).zip(mesh.interior_mass()).map(|((g, v), w)| w * g * v).sum::<f64>());
        let boundary = self.boundary.iter().map(|m| {
            m.shape
                .iter()
                .zip(mesh.boundary_nodes())
                .zip(mesh.boundary_mass())
                .map(|((g, &b), w)| w * g * f[b])
                .sum::<f64>()
        });
        interior.chain(boundary).collect()
    }

    /// Largest deviation from orthonormality among the distinct leading
    /// patterns of each block (in the lumped L²(O) and L²(Γ) products).
    pub fn orthonormality_defect(&self, mesh: &Mesh) -> f64 {
        let defect = |modes: &[Mode], w: &[f64]| {
            let distinct: Vec<&Vec<f64>> = {
                let mut out: Vec<&Vec<f64>> = Vec::new();
                for m in modes {
                    if out.contains(&&m.shape) {
                        break;
                    }
                    out.push(&m.shape);
                }
                out
            };
            let mut worst: f64 = 0.0;
            for (i, a) in distinct.iter().enumerate() {
                for (j, b) in distinct.iter().enumerate() {
                    let ip: f64 = a.iter().zip(b.iter()).zip(w).map(|((x, y), m)| m * x * y).sum();
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((ip - target).abs());
                }
            }
            worst
        };
        defect(&self.interior, mesh.interior_mass()).max(defect(&self.boundary, mesh.boundary_mass()))
    }
}

fn interior_candidates(mesh: &Mesh) -> Vec<Vec<f64>> {
    let (lo, hi) = bounding_box(mesh);
    let s = |x: [f64; 2], a: usize| (x[a] - lo[a]) / (hi[a] - lo[a]).max(f64::MIN_POSITIVE);
    let n = mesh.num_nodes();
    let mut out = Vec::new();
    if mesh.dim() == 1 {
        for k in 0..n {
            out.push(mesh.coords().iter().map(|&x| (k as f64 * std::f64::consts::PI * s(x, 0)).cos()).collect());
        }
    } else {
        let (nx, ny) = (mesh.resolution()[0], mesh.resolution()[1]);
        let mut pairs: Vec<(usize, usize)> = (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).collect();
        pairs.sort_by_key(|&(i, j)| (i + j, j));
        for (i, j) in pairs {
            out.push(
                mesh.coords()
                    .iter()
                    .map(|&x| {
                        (i as f64 * std::f64::consts::PI * s(x, 0)).cos()
                            * (j as f64 * std::f64::consts::PI * s(x, 1)).cos()
                    })
                    .collect(),
            );
        }
    }
    out
}

fn boundary_candidates(mesh: &Mesh) -> Vec<Vec<f64>> {
    let nb = mesh.num_boundary();
    let arc = mesh.boundary_arc();
    if mesh.dim() == 1 {
        return vec![vec![1.0, 1.0], vec![1.0, -1.0]];
    }
    let perimeter: f64 = mesh.boundary_mass().iter().sum();
    let mut out = vec![vec![1.0; nb]];
    for k in 1..=nb / 2 {
        let w = 2.0 * std::f64::consts::PI * k as f64 / perimeter;
        out.push(arc.iter().map(|s| (w * s).cos()).collect());
        out.push(arc.iter().map(|s| (w * s).sin()).collect());
    }
    out
}

fn bounding_box(mesh: &Mesh) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for x in mesh.coords() {
        for a in 0..2 {
            lo[a] = lo[a].min(x[a]);
            hi[a] = hi[a].max(x[a]);
        }
    }
    (lo, hi)
}

/// Modified Gram–Schmidt (two passes) in the weighted product; linearly
/// dependent candidates are skipped. Returns at most `want` patterns.
fn orthonormal_patterns(weights: &[f64], candidates: Vec<Vec<f64>>, want: usize) -> Vec<Vec<f64>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(weights).map(|((x, y), w)| w * x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in candidates {
        if basis.len() >= want.max(1) {
            break;
        }
        let n0 = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 * n0.max(1e-300) {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    basis
}
