//! Public-API pipeline on the unit square with a two-component control.

use std::sync::Arc;

use smp_core::adjoint::{duality_check, solve_adjoint_pathwise};
use smp_core::coefficients::{builtin_problem, FamilyParams};
use smp_core::dynamics::{solve_forward, solve_variational, BoundaryArray, ControlField};
use smp_core::field::{StateField, TimeGrid};
use smp_core::mesh::{Domain, Mesh};
use smp_core::noise::{NoiseSpec, Spectrum};
use smp_core::optimize::{gradient_check, run_optimizer, sample_coordinates, OptimizerOptions};
use smp_core::problem::ProblemSpec;

fn square_problem(sigma: f64) -> ProblemSpec {
    let mesh = Mesh::build(&Domain::Rectangle { lo: [0.0, 0.0], hi: [1.0, 1.0] }, &[6, 5]).unwrap();
    let params = FamilyParams { epsilon: 0.4, kappa: 0.3, beta: vec![1.0, 0.5], ..FamilyParams::default() };
    let (family, controls) = builtin_problem("semilinear-dbc", params).unwrap();
    let spectrum = Spectrum { sigma0: sigma, boundary_sigma0: sigma, decay: 1.0 };
    let noise = NoiseSpec::with_default_modes(&mesh, spectrum, 3, 3, 21);
    let initial = StateField::from_fn(&mesh, |x| (std::f64::consts::PI * x[0]).sin() + 0.5 * x[1]);
    let grid = TimeGrid::new(0.5, 12).unwrap();
    ProblemSpec::new(mesh, Arc::new(family), controls, noise, grid, initial).unwrap()
}

fn wavy_control(p: &ProblemSpec) -> ControlField {
    let mut v = BoundaryArray::zeros(p.steps(), p.mesh.num_boundary(), p.control_dim());
    for n in 0..p.steps() {
        for k in 0..p.mesh.num_boundary() {
            let c = v.at_mut(n, k);
            c[0] = 0.4 * ((n + k) as f64).sin();
            c[1] = -0.3 * ((2 * n + k) as f64).cos();
        }
    }
    ControlField::new(p, v).unwrap()
}

#[test]
fn duality_holds_per_path_on_the_square() {
    let p = square_problem(0.2);
    let u = wavy_control(&p);
    let mut w = BoundaryArray::zeros(p.steps(), p.mesh.num_boundary(), p.control_dim());
    for (i, v) in w.as_mut_slice().iter_mut().enumerate() {
        *v = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
    }
    for path in 0..5 {
        let y = solve_forward(&p, &u, path).unwrap();
        let adj = solve_adjoint_pathwise(&p, &y, &u).unwrap();
        let z = solve_variational(&p, &y, &u, &w).unwrap();
        let d = duality_check(&p, &y, &u, &adj, &w, &z).unwrap();
        assert!(d.relative_residual() < 1e-11, "path {path}: {d:?}");
    }
}

/// With common random numbers the finite difference of the sample-average
/// cost is a finite difference of a smooth function, so the agreement is
/// tight even with noise on.
#[test]
fn ensemble_gradient_matches_common_random_number_differences() {
    let p = square_problem(0.2);
    let u = wavy_control(&p);
    let coords = sample_coordinates(&p, 12, 2);
    let rows = gradient_check(&p, &u, &coords, 1e-5, 8, 17).unwrap();
    for r in &rows {
        assert!(r.relative_error < 1e-5, "{r:?}");
    }
}

#[test]
fn optimizer_never_increases_the_cost() {
    let p = square_problem(0.0);
    let u0 = ControlField::constant(&p, &[0.0, 0.0]).unwrap();
    let opts = OptimizerOptions { max_iterations: 15, ..OptimizerOptions::default() };
    let out = run_optimizer(&p, &u0, &opts).unwrap();
    let costs: Vec<f64> = out.history.records.iter().map(|r| r.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
    assert!(costs.last().unwrap() < &costs[0]);
    assert!(out.history.records.last().unwrap().residual < out.history.records[0].residual);
}
