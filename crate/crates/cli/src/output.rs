//! CSV and JSON writers.
//!
//! Numbers use Rust's shortest round-trip formatting so reruns diff cleanly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use ruinsolve_core::{FactorSpec, Grid2D, Surface};

use crate::CliError;

pub const SURFACE_HEADER: &str = "w,v,sigma,value";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_lines<I: IntoIterator<Item = String>>(
    path: &Path,
    header: &str,
    lines: I,
) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{header}").map_err(|e| io_err(path, e))?;
    for line in lines {
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// One row per node, factor-major; `v` in original units and `sigma = f(v)`.
pub fn write_surface(path: &Path, g: &Grid2D, f: &FactorSpec, s: &Surface) -> Result<(), CliError> {
    check_surface(g, s)?;
    let lines = (0..g.nv).flat_map(|iv| {
        let v = g.v_original(iv);
        let sigma = f.vol(g.v_nodes[iv]);
        (0..g.nw).map(move |iw| format!("{},{v},{sigma},{}", g.w_nodes[iw], s.get(iw, iv)))
    });
    write_lines(path, SURFACE_HEADER, lines)
}

/// One factor row of a surface.
pub fn write_slice(
    path: &Path,
    g: &Grid2D,
    f: &FactorSpec,
    iv: usize,
    values: &[f64],
) -> Result<(), CliError> {
    if values.len() != g.nw || values.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Numerical(format!(
            "slice for {} has {} values or non-finite entries",
            path.display(),
            values.len()
        )));
    }
    let v = g.v_original(iv);
    let sigma = f.vol(g.v_nodes[iv]);
    let lines = (0..g.nw).map(|iw| format!("{},{v},{sigma},{}", g.w_nodes[iw], values[iw]));
    write_lines(path, SURFACE_HEADER, lines)
}

pub fn write_ranking(path: &Path, rows: &[(String, f64, f64)]) -> Result<(), CliError> {
    let lines = rows
        .iter()
        .map(|(s, sup, mean)| format!("{s},{sup},{mean}"));
    write_lines(path, "strategy,sup_gap,mean_gap", lines)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn check_surface(g: &Grid2D, s: &Surface) -> Result<(), CliError> {
    if s.values.len() != g.len() || s.nw != g.nw || s.nv != g.nv {
        return Err(CliError::Numerical(
            "surface does not match the grid".into(),
        ));
    }
    if s.values.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Numerical("surface has non-finite values".into()));
    }
    Ok(())
}

/// Checks that a value surface has exact boundary columns.
pub fn check_value_boundaries(g: &Grid2D, s: &Surface) -> Result<(), CliError> {
    for iv in 0..g.nv {
        if s.get(0, iv) != 1.0 || s.get(g.nw - 1, iv) != 0.0 {
            return Err(CliError::Numerical(format!(
                "boundary values wrong on row {iv}"
            )));
        }
    }
    Ok(())
}

/// Slug for a number in a file name, e.g. `0.25` -> `0.25`, `-0.5` -> `m0.5`.
pub fn slug(x: f64) -> String {
    let s = format!("{x}");
    match s.strip_prefix('-') {
        Some(rest) => format!("m{rest}"),
        None => s,
    }
}
