//! End-to-end acceptance criteria. Each criterion prints one `PASS`/`FAIL`
//! line (written straight to stderr so it shows without `--nocapture`); the
//! test fails if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smp_core::adjoint::{backward_structure, duality_check, solve_adjoint_pathwise};
use smp_core::dynamics::{
    energy_bound, observed_order, path_cost, solve_forward, solve_variational, variational_defects, BoundaryArray,
    ControlField,
};
use smp_core::field::StateField;
use smp_core::operator::inner_h;
use smp_core::optimize::{
    evaluate_ensemble, gradient_check, run_optimizer, sample_coordinates, OptimizerOptions, Status,
};
use smp_core::problem::ProblemSpec;
use smp_core::smp::{check_sufficient_from_means, Verdict};
use smpctl::config::{build, Config, Setup};

fn setup(toml: &str) -> Setup {
    let s = build(Config::parse(toml).expect("config parses"), None).expect("config builds");
    assert!(s.assumptions.pass, "{:?}", s.assumptions.first_failure());
    s
}

fn interval(nodes: usize, steps: usize, family: &str, extra: &str) -> String {
    format!(
        r#"
[domain]
kind = "interval"
lower = [0.0]
upper = [1.0]
resolution = [{nodes}]
initial = {{ kind = "sine", value = 1.0 }}

[time]
horizon = 1.0
steps = {steps}

[coefficients]
family = "{family}"
{extra}
"#
    )
}

fn random_direction(p: &ProblemSpec, rng: &mut ChaCha8Rng) -> BoundaryArray {
    let mut w = BoundaryArray::zeros(p.steps(), p.mesh.num_boundary(), p.control_dim());
    for v in w.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    w
}

fn random_field(p: &ProblemSpec, rng: &mut ChaCha8Rng, scale: f64) -> StateField {
    StateField::from_vec((0..p.mesh.num_nodes()).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    let line = format!(
        "{} [{id}] {name}: {} ({:.2}s, budget {}s)\n",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

/// Per-path duality residual for 100 noisy lq paths.
fn duality() -> Outcome {
    let s = setup(&interval(21, 50, "lq-dbc", "[noise]\ninterior_modes = 4\nboundary_modes = 4"));
    let p = &s.problem;
    let u = &s.initial_control;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for path in 0..100 {
        let w = random_direction(p, &mut rng);
        let y = solve_forward(p, u, path).unwrap();
        let adj = solve_adjoint_pathwise(p, &y, u).unwrap();
        let z = solve_variational(p, &y, u, &w).unwrap();
        worst = worst.max(duality_check(p, &y, u, &adj, &w, &z).unwrap().relative_residual());
    }
    Outcome { pass: worst <= 1e-10, detail: format!("max relative residual {worst:.2e} over 100 paths (bound 1e-10)") }
}

/// Adjoint gradient against central differences of the cost.
fn gradient_oracle() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let mut interior_control = |family: &str, extra: &str| {
        let s = setup(&interval(21, 50, family, &format!("{extra}\n[noise]\nenabled = false")));
        let p = &s.problem;
        let u = ControlField::constant(p, &[0.2]).unwrap();
        let coords = sample_coordinates(p, 20, 5);
        let rows = gradient_check(p, &u, &coords, 1e-5, 1, 0).unwrap();
        let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
        pass &= worst <= 1e-3;
        details.push(format!("{family} max rel err {worst:.2e}"));
    };
    interior_control("lq-dbc", "");
    interior_control("semilinear-dbc", "epsilon = 0.5\nkappa = 0.5");

    let s = setup(&interval(21, 50, "lq-dbc", ""));
    let p = &s.problem;
    let u = ControlField::constant(p, &[0.2]).unwrap();
    let coords = sample_coordinates(p, 20, 6);
    let rows = gradient_check(p, &u, &coords, 1e-5, 2000, 9).unwrap();
    let overlapping = rows.iter().filter(|r| r.intervals_overlap()).count();
    pass &= overlapping == rows.len();
    details.push(format!("stochastic 2000 paths: {overlapping}/{} intervals overlap", rows.len()));
    Outcome { pass, detail: details.join("; ") }
}

/// Order of the difference-quotient defect in the perturbation size.
fn variational_order() -> Outcome {
    let s = setup(&interval(21, 50, "semilinear-dbc", "epsilon = 0.5\nkappa = 0.5"));
    let p = &s.problem;
    let u = ControlField::constant(p, &[0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_direction(p, &mut rng).scaled(0.5);
    let thetas = [1e-1, 1e-2, 1e-3];
    let errors = variational_defects(p, &u, &w, &thetas, 0).unwrap();
    let order = observed_order(&thetas, &errors);
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    Outcome {
        pass: order >= 0.9,
        detail: format!("defects [{}], observed order {order:.3} (need 0.9)", shown.join(", ")),
    }
}

/// Monotonicity and coercivity of the backward operator on random pairs.
fn structure() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (family, extra) in [("lq-dbc", ""), ("semilinear-dbc", "epsilon = 0.5\nkappa = 0.5")] {
        let s = setup(&interval(21, 10, family, extra));
        let p = &s.problem;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut mono, mut coer) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..100 {
            let y = random_field(p, &mut rng, 2.0);
            let q = random_field(p, &mut rng, 2.0);
            let u: Vec<f64> =
                (0..p.mesh.num_boundary() * p.control_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = backward_structure(p, &y, &u, &q).unwrap();
            mono = mono.min(b.monotonicity);
            coer = coer.min(b.coercivity);
        }
        pass &= mono >= -1e-10 && coer >= -1e-10;
        details.push(format!("{family} min margins {mono:.2e} / {coer:.2e}"));
    }
    Outcome { pass, detail: details.join("; ") }
}

/// Projected gradient on finite-difference gradients, without the adjoint.
fn brute_force(p: &ProblemSpec, u0: &ControlField) -> f64 {
    let cost = |v: &BoundaryArray| {
        let u = ControlField::new(p, v.clone()).unwrap();
        path_cost(p, &solve_forward(p, &u, 0).unwrap(), &u).unwrap()
    };
    let project = |v: &BoundaryArray| ControlField::projected(p, v).unwrap().into_values();
    let fd_gradient = |v: &BoundaryArray| {
        let h = 1e-6;
        let mut g = BoundaryArray::zeros(v.steps(), v.boundary(), v.dim());
        for i in 0..v.len() {
            let (mut a, mut b) = (v.clone(), v.clone());
            a.as_mut_slice()[i] += h;
            b.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (cost(&project(&a)) - cost(&project(&b))) / (2.0 * h);
        }
        g
    };
    let mut u = u0.values().clone();
    let mut j = cost(&u);
    let mut step = 1.0;
    for _ in 0..5000 {
        let g = fd_gradient(&u);
        let mut accepted = false;
        for _ in 0..60 {
            let trial = project(&u.plus_scaled(-step, &g));
            let jt = cost(&trial);
            if jt < j {
                let moved = trial.minus(&u).max_abs();
                u = trial;
                j = jt;
                accepted = moved > 1e-13;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    j
}

/// The optimizer against direct minimization over all 16 unknowns.
fn optimizer_vs_brute_force() -> Outcome {
    let s = setup(&interval(5, 8, "lq-dbc", "[noise]\nenabled = false\n[cost]\ntarget = 0.5"));
    let p = &s.problem;
    let opts = OptimizerOptions { tolerance: 1e-9, max_iterations: 2000, ..OptimizerOptions::default() };
    let out = run_optimizer(p, &s.initial_control, &opts).unwrap();
    let j_opt = out.history.records.last().unwrap().cost;
    let j_start = out.history.records[0].cost;
    let j_brute = brute_force(p, &s.initial_control);
    let rel = (j_opt - j_brute).abs() / j_brute.abs().max(1e-300);
    Outcome {
        pass: rel <= 1e-6 && out.status == Status::Converged,
        detail: format!(
            "{} unknowns, J from {j_start:.6} to {j_opt:.12} ({:?}), brute force J {j_brute:.12}, rel diff {rel:.2e}",
            out.control.values().len(),
            out.status
        ),
    }
}

fn stochastic_lq() -> String {
    r#"
[domain]
kind = "interval"
lower = [0.0]
upper = [1.0]
resolution = [21]

[time]
horizon = 1.0
steps = 50

[coefficients]
family = "lq-dbc"

[optimizer]
paths = 64
tolerance = 1e-6

[rng]
seed = 11
"#
    .to_string()
}

/// Converged stochastic control satisfies the optimality system; a perturbed
/// one is flagged by `verify`.
fn maximum_principle() -> Outcome {
    let text = stochastic_lq();
    let s = setup(&text);
    let p = &s.problem;
    let out = run_optimizer(p, &s.initial_control, &s.options).unwrap();
    let eval = evaluate_ensemble(p, &out.control, s.options.paths, s.options.seed_for(0)).unwrap();
    let report = check_sufficient_from_means(p, &out.control, &eval.gradient, &eval.boundary_costate, 1e-4).unwrap();
    let verdict = report.sufficiency.as_ref().map(|x| x.verdict);
    let converged_ok = report.residual <= 1e-4 && verdict == Some(Verdict::Holds);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stochastic.toml");
    std::fs::write(&cfg, &text).unwrap();
    let hi = p.controls.upper()[0];
    let mut perturbed = out.control.values().clone();
    for v in perturbed.as_mut_slice() {
        *v = if *v + 0.3 < hi { *v + 0.3 } else { *v - 0.3 };
    }
    let control = dir.path().join("perturbed.csv");
    smpctl::io::write_control(&control, s.seed(), &p.mesh, &perturbed).unwrap();
    let ver = dir.path().join("verify");
    let status = Command::new(env!("CARGO_BIN_EXE_smpctl"))
        .args(["verify", cfg.to_str().unwrap(), "--out", ver.to_str().unwrap(), "--control", control.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ver.join("report.json")).unwrap()).unwrap();
    let perturbed_residual = json["optimality"]["residual"].as_f64().unwrap();
    let has_witness = !json["optimality"]["witness"].is_null();
    Outcome {
        pass: converged_ok && perturbed_residual > 0.0 && has_witness && status.code() == Some(1),
        detail: format!(
            "converged residual {:.2e}, sufficiency {verdict:?}; perturbed residual {perturbed_residual:.2e}, witness {has_witness}, verify exit {:?}",
            report.residual,
            status.code()
        ),
    }
}

/// Sup-energy of 500 noisy paths against the discrete Gronwall bound.
fn energy() -> Outcome {
    let s = setup(&interval(21, 50, "semilinear-dbc", "epsilon = 0.5\nkappa = 0.5\n[noise]\nsigma0 = 0.3"));
    let p = &s.problem;
    let u = ControlField::constant(p, &[0.5]).unwrap();
    let bound = energy_bound(p, &u).unwrap().expected_sup;
    let mut total = 0.0;
    let mut nonfinite = 0;
    for path in 0..500 {
        let y = solve_forward(p, &u, path).unwrap();
        let sup = y.states().iter().map(|s| inner_h(&p.mesh, s, s).unwrap()).fold(0.0, f64::max);
        if !sup.is_finite() {
            nonfinite += 1;
        }
        total += sup;
    }
    let mean = total / 500.0;
    Outcome {
        pass: nonfinite == 0 && mean <= bound,
        detail: format!("E max |Y|^2 = {mean:.4} vs bound {bound:.4}, {nonfinite} non-finite paths"),
    }
}

fn run_optimize(cfg: &Path, out: &Path, workers: &str) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_smpctl"))
        .args(["optimize", cfg.to_str().unwrap(), "--workers", workers, "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .code()
}

/// Identical outputs across worker counts.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stochastic.toml");
    std::fs::write(&cfg, stochastic_lq()).unwrap();
    let (a, b) = (dir.path().join("w1"), dir.path().join("w4"));
    let codes = (run_optimize(&cfg, &a, "1"), run_optimize(&cfg, &b, "4"));
    let same =
        |name: &str| std::fs::read(a.join(name)).ok().is_some_and(|x| Some(x) == std::fs::read(b.join(name)).ok());
    let (h, r) = (same("history.csv"), same("report.json"));
    Outcome {
        pass: h && r && codes == (Some(0), Some(0)),
        detail: format!("history.csv identical {h}, report.json identical {r}, exit codes {codes:?}"),
    }
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "discrete duality", secs(10), duality),
        criterion(2, "gradient check", secs(60), gradient_oracle),
        criterion(3, "variational convergence", secs(10), variational_order),
        criterion(4, "backward monotonicity and coercivity", secs(5), structure),
        criterion(5, "optimizer vs brute force", secs(30), optimizer_vs_brute_force),
        criterion(6, "maximum principle self-consistency", secs(120), maximum_principle),
        criterion(7, "energy stability", secs(60), energy),
        criterion(8, "determinism across workers", secs(60), determinism),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &ok)| !ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
