//! Structured P1 meshes on intervals and axis-aligned rectangles.
//!
//! Nodes are numbered row-major (`j * nx + i`), so every element couples
//! nodes whose indices differ by at most `nx + 1`. The operator matrices are
//! therefore banded, which the time steppers exploit.
//!
//! Mass is lumped: each element hands `volume / (dim + 1)` to each of its
//! vertices, and each boundary facet hands half its length to each endpoint.
//! In 1D the boundary is the two endpoints carrying unit counting measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the spatial domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    Rectangle { lo: [f64; 2], hi: [f64; 2] },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Rectangle { .. } => 2,
        }
    }

    /// Lower corner, `[lo, 0]` for an interval.
    pub fn lower(&self) -> [f64; 2] {
        match *self {
            Domain::Interval { lo, .. } => [lo, 0.0],
            Domain::Rectangle { lo, .. } => lo,
        }
    }

    /// Upper corner, `[hi, 0]` for an interval.
    pub fn upper(&self) -> [f64; 2] {
        match *self {
            Domain::Interval { hi, .. } => [hi, 0.0],
            Domain::Rectangle { hi, .. } => hi,
        }
    }

    /// Lebesgue measure of the domain.
    pub fn volume(&self) -> f64 {
        match *self {
            Domain::Interval { lo, hi } => hi - lo,
            Domain::Rectangle { lo, hi } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
        }
    }

    /// Surface measure of the boundary (counting measure in 1D).
    pub fn boundary_measure(&self) -> f64 {
        match *self {
            Domain::Interval { .. } => 2.0,
            Domain::Rectangle { lo, hi } => 2.0 * ((hi[0] - lo[0]) + (hi[1] - lo[1])),
        }
    }
}

/// Quadrature used for element integrals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureRule {
    /// Vertex (trapezoid) rule for mass terms, one-point centroid rule for
    /// flux terms with the element-constant P1 gradient.
    VertexLumped,
}

/// A simplex with precomputed P1 basis gradients.
#[derive(Clone, Debug)]
pub struct Element {
    nodes: [usize; 3],
    len: usize,
    volume: f64,
    centroid: [f64; 2],
    /// Gradient of each local basis function (only `dim` components used).
    grads: [[f64; 2]; 3],
}

impl Element {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes[..self.len]
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn centroid(&self) -> [f64; 2] {
        self.centroid
    }

    pub fn basis_gradients(&self) -> &[[f64; 2]] {
        &self.grads[..self.len]
    }

    /// Element-constant gradient of a nodal field.
    pub fn gradient(&self, values: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (&node, grad) in self.nodes().iter().zip(self.basis_gradients()) {
            g[0] += values[node] * grad[0];
            g[1] += values[node] * grad[1];
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    domain: Domain,
    resolution: Vec<usize>,
    coords: Vec<[f64; 2]>,
    elements: Vec<Element>,
    boundary_nodes: Vec<usize>,
    boundary_slot: Vec<Option<usize>>,
    normals: Vec<[f64; 2]>,
    /// Arc-length coordinate of each boundary node along the boundary loop.
    boundary_arc: Vec<f64>,
    interior_mass: Vec<f64>,
    boundary_mass: Vec<f64>,
    h_mass: Vec<f64>,
    bandwidth: usize,
    quadrature: QuadratureRule,
}

impl Mesh {
    /// Builds a structured mesh with `resolution[k]` nodes along axis `k`.
    pub fn build(domain: &Domain, resolution: &[usize]) -> Result<Self> {
        match *domain {
            Domain::Interval { lo, hi } => {
                let n = match resolution {
                    [n] => *n,
                    _ => {
                        return Err(Error::Geometry(format!(
                            "interval needs one resolution entry, got {}",
                            resolution.len()
                        )))
                    }
                };
                check_axis("interval", lo, hi, n)?;
                Ok(Self::build_interval(domain.clone(), lo, hi, n))
            }
            Domain::Rectangle { lo, hi } => {
                let (nx, ny) = match resolution {
                    [nx, ny] => (*nx, *ny),
                    [n] => (*n, *n),
                    _ => {
                        return Err(Error::Geometry(format!(
                            "rectangle needs one or two resolution entries, got {}",
                            resolution.len()
                        )))
                    }
                };
                check_axis("rectangle x-side", lo[0], hi[0], nx)?;
                check_axis("rectangle y-side", lo[1], hi[1], ny)?;
                Ok(Self::build_rectangle(domain.clone(), lo, hi, nx, ny))
            }
        }
    }

    fn build_interval(domain: Domain, lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let x = if i == n - 1 { hi } else { lo + i as f64 * h };
                [x, 0.0]
            })
            .collect();
        let mut interior_mass = vec![0.0; n];
        let mut elements = Vec::with_capacity(n - 1);
        for e in 0..n - 1 {
            let len = coords[e + 1][0] - coords[e][0];
            interior_mass[e] += 0.5 * len;
            interior_mass[e + 1] += 0.5 * len;
            elements.push(Element {
                nodes: [e, e + 1, usize::MAX],
                len: 2,
                volume: len,
                centroid: [0.5 * (coords[e][0] + coords[e + 1][0]), 0.0],
                grads: [[-1.0 / len, 0.0], [1.0 / len, 0.0], [0.0; 2]],
            });
        }
        let boundary_nodes = vec![0, n - 1];
        let mut boundary_slot = vec![None; n];
        boundary_slot[0] = Some(0);
        boundary_slot[n - 1] = Some(1);
        let mut mesh = Mesh {
            domain,
            resolution: vec![n],
            coords,
            elements,
            boundary_nodes,
            boundary_slot,
            normals: vec![[-1.0, 0.0], [1.0, 0.0]],
            boundary_arc: vec![0.0, 1.0],
            interior_mass,
            boundary_mass: vec![1.0, 1.0],
            h_mass: Vec::new(),
            bandwidth: 1,
            quadrature: QuadratureRule::VertexLumped,
        };
        mesh.finish();
        mesh
    }

    fn build_rectangle(domain: Domain, lo: [f64; 2], hi: [f64; 2], nx: usize, ny: usize) -> Self {
        let hx = (hi[0] - lo[0]) / (nx - 1) as f64;
        let hy = (hi[1] - lo[1]) / (ny - 1) as f64;
        let axis = |lo: f64, hi: f64, h: f64, n: usize, i: usize| {
            if i == n - 1 {
                hi
            } else {
                lo + i as f64 * h
            }
        };
        let id = |i: usize, j: usize| j * nx + i;
        let mut coords = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                coords.push([axis(lo[0], hi[0], hx, nx, i), axis(lo[1], hi[1], hy, ny, j)]);
            }
        }

        let mut elements = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        let mut interior_mass = vec![0.0; nx * ny];
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let tris = [[id(i, j), id(i + 1, j), id(i + 1, j + 1)], [id(i, j), id(i + 1, j + 1), id(i, j + 1)]];
                for tri in tris {
                    let el = triangle(&coords, tri);
                    for &v in &tri {
                        interior_mass[v] += el.volume / 3.0;
                    }
                    elements.push(el);
                }
            }
        }

        // Counter-clockwise boundary loop starting at the lower-left corner.
        let mut loop_nodes = Vec::with_capacity(2 * (nx + ny) - 4);
        for i in 0..nx {
            loop_nodes.push(id(i, 0));
        }
        for j in 1..ny {
            loop_nodes.push(id(nx - 1, j));
        }
        for i in (0..nx - 1).rev() {
            loop_nodes.push(id(i, ny - 1));
        }
        for j in (1..ny - 1).rev() {
            loop_nodes.push(id(0, j));
        }

        let nb = loop_nodes.len();
        let mut boundary_mass = vec![0.0; nb];
        let mut boundary_arc = vec![0.0; nb];
        let mut normal_acc = vec![[0.0f64; 2]; nb];
        let mut arc = 0.0;
        for k in 0..nb {
            let a = coords[loop_nodes[k]];
            let b = coords[loop_nodes[(k + 1) % nb]];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            boundary_mass[k] += 0.5 * len;
            boundary_mass[(k + 1) % nb] += 0.5 * len;
            boundary_arc[k] = arc;
            arc += len;
            // Outward normal of a counter-clockwise edge is (dy, -dx)/len.
            let n = [dy / len, -dx / len];
            for slot in [k, (k + 1) % nb] {
                normal_acc[slot][0] += n[0];
                normal_acc[slot][1] += n[1];
            }
        }
        let normals = normal_acc
            .into_iter()
            .map(|n| {
                let r = (n[0] * n[0] + n[1] * n[1]).sqrt();
                [n[0] / r, n[1] / r]
            })
            .collect();

        let mut boundary_slot = vec![None; nx * ny];
        for (k, &node) in loop_nodes.iter().enumerate() {
            boundary_slot[node] = Some(k);
        }

        let mut mesh = Mesh {
            domain,
            resolution: vec![nx, ny],
            coords,
            elements,
            boundary_nodes: loop_nodes,
            boundary_slot,
            normals,
            boundary_arc,
            interior_mass,
            boundary_mass,
            h_mass: Vec::new(),
            bandwidth: nx + 1,
            quadrature: QuadratureRule::VertexLumped,
        };
        mesh.finish();
        mesh
    }

    fn finish(&mut self) {
        let mut h_mass = self.interior_mass.clone();
        for (k, &node) in self.boundary_nodes.iter().enumerate() {
            h_mass[node] += self.boundary_mass[k];
        }
        self.h_mass = h_mass;
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_boundary(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    /// Position of `node` in the boundary list, if it is a boundary node.
    pub fn boundary_slot(&self, node: usize) -> Option<usize> {
        self.boundary_slot[node]
    }

    pub fn normals(&self) -> &[[f64; 2]] {
        &self.normals
    }

    pub fn boundary_arc(&self) -> &[f64] {
        &self.boundary_arc
    }

    /// Lumped L²(O) weights, one per node.
    pub fn interior_mass(&self) -> &[f64] {
        &self.interior_mass
    }

    /// Lumped L²(Γ) weights, one per boundary node.
    pub fn boundary_mass(&self) -> &[f64] {
        &self.boundary_mass
    }

    /// Diagonal of the lumped H = L²(O) × L²(Γ) mass matrix on nodal fields.
    pub fn h_mass(&self) -> &[f64] {
        &self.h_mass
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn quadrature(&self) -> QuadratureRule {
        self.quadrature
    }

    /// Structural self-check of every mesh invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        for &b in &self.boundary_nodes {
            if b >= n || seen[b] {
                return Err(Error::Geometry(format!("bad or duplicate boundary node {b}")));
            }
            seen[b] = true;
        }
        if self.dim() == 1 && self.boundary_nodes.len() != 2 {
            return Err(Error::Geometry("1D mesh must have two boundary nodes".into()));
        }
        if self.elements.iter().any(|e| e.volume <= 0.0) {
            return Err(Error::Geometry("non-positive element volume".into()));
        }
        if self.interior_mass.iter().chain(&self.boundary_mass).any(|&m| m <= 0.0) {
            return Err(Error::Geometry("non-positive mass weight".into()));
        }
        for nu in &self.normals {
            if ((nu[0] * nu[0] + nu[1] * nu[1]).sqrt() - 1.0).abs() > 1e-12 {
                return Err(Error::Geometry(format!("normal {nu:?} is not unit")));
            }
        }
        Ok(())
    }
}

fn check_axis(what: &str, lo: f64, hi: f64, n: usize) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || hi - lo <= 0.0 {
        return Err(Error::Geometry(format!("{what} [{lo}, {hi}] has non-positive length")));
    }
    if n < 3 {
        return Err(Error::Geometry(format!("{what} resolution {n} is below the minimum of 3 nodes")));
    }
    Ok(())
}

fn triangle(coords: &[[f64; 2]], tri: [usize; 3]) -> Element {
    let [p0, p1, p2] = tri.map(|v| coords[v]);
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    // Barycentric gradients: rotate the opposite edge by 90 degrees.
    let grad = |a: [f64; 2], b: [f64; 2]| [(a[1] - b[1]) / det, (b[0] - a[0]) / det];
    Element {
        nodes: tri,
        len: 3,
        volume: 0.5 * det.abs(),
        centroid: [(p0[0] + p1[0] + p2[0]) / 3.0, (p0[1] + p1[1] + p2[1]) / 3.0],
        grads: [grad(p1, p2), grad(p2, p0), grad(p0, p1)],
    }
}
