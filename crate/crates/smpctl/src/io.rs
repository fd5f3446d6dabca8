//! CSV and JSON output, and control-file input.
//!
//! Every CSV file starts with a `# seed=N` comment line followed by a header
//! row. Floats are written in Rust's shortest round-trip form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use smp_core::adjoint::AdjointTrajectory;
use smp_core::dynamics::{BoundaryArray, ControlField};
use smp_core::field::StateTrajectory;
use smp_core::mesh::Mesh;
use smp_core::problem::ProblemSpec;

use crate::error::CliError;

pub const TRAJECTORY_COLUMNS: [&str; 6] = ["step", "time", "node", "x", "y", "value"];
pub const HISTORY_COLUMNS: [&str; 5] = ["iteration", "cost", "half_width", "residual", "step"];
pub const TIMING_COLUMNS: [&str; 2] = ["iteration", "seconds"];
pub const GRADCHECK_COLUMNS: [&str; 9] = [
    "step",
    "boundary_node",
    "component",
    "adjoint",
    "finite_difference",
    "relative_error",
    "adjoint_half_width",
    "fd_half_width",
    "intervals_overlap",
];
pub const CONVERGENCE_COLUMNS: [&str; 7] = ["study", "level", "steps", "resolution", "parameter", "error", "order"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `# seed=N`, the header and the rows.
pub fn write_csv<I, R>(path: &Path, seed: u64, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# seed={seed}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn nodal_rows<'a>(
    mesh: &'a Mesh,
    times: impl Fn(usize) -> f64 + 'a,
    states: &'a [smp_core::field::StateField],
) -> impl Iterator<Item = Vec<String>> + 'a {
    states.iter().enumerate().flat_map(move |(n, s)| {
        let t = times(n);
        s.as_slice().iter().enumerate().map(move |(i, v)| {
            let x = mesh.coords()[i];
            vec![n.to_string(), t.to_string(), i.to_string(), x[0].to_string(), x[1].to_string(), v.to_string()]
        })
    })
}

pub fn write_trajectory(path: &Path, seed: u64, mesh: &Mesh, traj: &StateTrajectory) -> Result<(), CliError> {
    let grid = traj.grid().clone();
    write_csv(path, seed, &TRAJECTORY_COLUMNS, nodal_rows(mesh, move |n| grid.time(n), traj.states()))
}

pub fn write_adjoint(path: &Path, seed: u64, mesh: &Mesh, adj: &AdjointTrajectory) -> Result<(), CliError> {
    let grid = adj.grid().clone();
    write_csv(path, seed, &TRAJECTORY_COLUMNS, nodal_rows(mesh, move |n| grid.time(n), adj.states()))
}

pub fn control_columns(m: usize) -> Vec<String> {
    let mut cols = vec!["step".to_string(), "boundary_node".to_string()];
    cols.extend((0..m).map(|c| format!("u{c}")));
    cols
}

/// `step, boundary_node, u0, …` with `boundary_node` the mesh node index.
pub fn write_control(path: &Path, seed: u64, mesh: &Mesh, values: &BoundaryArray) -> Result<(), CliError> {
    let cols = control_columns(values.dim());
    let header: Vec<&str> = cols.iter().map(String::as_str).collect();
    let rows = (0..values.steps()).flat_map(|n| {
        mesh.boundary_nodes().iter().enumerate().map(move |(k, &b)| {
            let mut row = vec![n.to_string(), b.to_string()];
            row.extend(values.at(n, k).iter().map(|v| v.to_string()));
            row
        })
    });
    write_csv(path, seed, &header, rows)
}

/// Reads a control file written by [`write_control`]; every
/// `(step, boundary node)` pair must appear exactly once.
pub fn read_control(path: &Path, problem: &ProblemSpec) -> Result<ControlField, CliError> {
    let name = path.display().to_string();
    let bad = |message: String| CliError::Input { file: name.clone(), message };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(file);
    let m = problem.control_dim();
    let expected = control_columns(m);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(bad(format!("header {header:?}, expected {expected:?}")));
    }
    let mesh = &problem.mesh;
    let (steps, nb) = (problem.steps(), mesh.num_boundary());
    let mut values = BoundaryArray::zeros(steps, nb, m);
    let mut seen = vec![false; steps * nb];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let n: usize = field(0).parse().map_err(|_| bad(format!("row {}: bad step `{}`", line + 1, field(0))))?;
        let node: usize = field(1).parse().map_err(|_| bad(format!("row {}: bad node `{}`", line + 1, field(1))))?;
        let k = mesh
            .boundary_slot(node)
            .ok_or_else(|| bad(format!("row {}: node {node} is not on the boundary", line + 1)))?;
        if n >= steps {
            return Err(bad(format!("row {}: step {n} out of range (0..{steps})", line + 1)));
        }
        if std::mem::replace(&mut seen[n * nb + k], true) {
            return Err(bad(format!("row {}: duplicate entry for step {n}, node {node}", line + 1)));
        }
        for c in 0..m {
            values.at_mut(n, k)[c] =
                field(2 + c).parse().map_err(|_| bad(format!("row {}: bad value `{}`", line + 1, field(2 + c))))?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing entry for step {}, node {}", i / nb, mesh.boundary_nodes()[i % nb])));
    }
    Ok(ControlField::new(problem, values)?)
}

pub fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
