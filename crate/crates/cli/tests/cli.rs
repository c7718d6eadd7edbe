use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ruinsolve");

// reference market
const R: f64 = 0.02;
const MU: f64 = 0.1;
const C: f64 = 0.1;
const LAMBDA: f64 = 0.04;

fn psi_const(w: f64, sigma: f64) -> f64 {
    let s = 0.5 * ((MU - R) / sigma).powi(2);
    let b = R + LAMBDA + s;
    let p = (b + (b * b - 4.0 * R * LAMBDA).sqrt()) / (2.0 * R);
    (1.0 - R * w / C).max(0.0).powf(p)
}

fn run(dir: &TempDir, cmd: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Rows of a `w,v,sigma,value` file.
fn read_surface(path: &Path) -> Vec<[f64; 4]> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("w,v,sigma,value"));
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

fn read_meta(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn constant_volatility_solve_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "solve",
        r#"{"schema": 1, "factor": {"volmap": {"type": "const", "sigma": 0.25}}}"#,
        &["--nw", "81"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_surface(&dir.path().join("out/psi.csv"));
    let err = rows
        .iter()
        .map(|r| (r[3] - psi_const(r[0], 0.25)).abs())
        .fold(0.0, f64::max);
    // first order in h; steepest near w = 0
    assert!(err < 0.03, "sup error {err}");
    let mid = rows.iter().find(|r| r[0] == 2.5).unwrap();
    assert!((mid[3] - psi_const(2.5, 0.25)).abs() < 0.01);
    let meta = read_meta(&dir.path().join("out/meta.json"));
    assert_eq!(meta["result"]["converged"], true);
    assert_eq!(meta["grid"]["nw"], 81);
}

#[test]
fn surfaces_have_one_row_per_node() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "solve",
        r#"{"schema": 1, "grid": {"v_span": 3.0}}"#,
        &["--nw", "21"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta = read_meta(&dir.path().join("out/meta.json"));
    let nv = meta["grid"]["nv"].as_u64().unwrap() as usize;
    for name in ["psi.csv", "pi.csv"] {
        let rows = read_surface(&dir.path().join("out").join(name));
        assert_eq!(rows.len(), 21 * nv, "{name}");
    }
    let psi = read_surface(&dir.path().join("out/psi.csv"));
    for row in psi.chunks(21) {
        assert_eq!(row[0][3], 1.0);
        assert_eq!(row[20][3], 0.0);
        assert!((row[0][2] - (-row[0][1]).exp()).abs() < 1e-12);
    }
}

#[test]
fn nonpositive_risk_premium_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "solve",
        r#"{"schema": 1, "market": {"mu": 0.02}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out/psi.csv").exists());
}

#[test]
fn unknown_keys_are_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "solve",
        r#"{"schema": 1, "solver": {"tolerance": 1e-9}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(&dir, "approx", r#"{"schema": 1, "extra": 0}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_and_strategy_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "solve", r#"{"schema": 1}"#, &["--rho", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        &dir,
        "compare",
        r#"{"schema": 1, "compare": {"strategies": ["money_market", "oracle"]}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_failures_exit_with_four() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(BIN)
        .args(["solve", "--config"])
        .arg(dir.path().join("missing.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // the output directory is a regular file
    let blocker = dir.path().join("out");
    fs::write(&blocker, "").unwrap();
    let out = run(&dir, "approx", r#"{"schema": 1}"#, &["--nw", "21"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn slow_approximation_at_vanishing_speed_is_the_frozen_closed_form() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "approx",
        r#"{"schema": 1, "factor": {"kind": "slow", "speed": 1e-14}}"#,
        &["--nw", "41"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_surface(&dir.path().join("out/psi_approx.csv"));
    for r in rows {
        let exact = psi_const(r[0], r[2]);
        assert!(
            (r[3] - exact).abs() < 1e-6,
            "w {} sigma {}: {} vs {exact}",
            r[0],
            r[2],
            r[3]
        );
    }
}

#[test]
fn fast_approximation_at_large_speed_is_flat_in_the_factor() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "approx",
        r#"{"schema": 1, "factor": {"speed": 1e14, "rho": -0.5}}"#,
        &["--nw", "41"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta = read_meta(&dir.path().join("out/meta.json"));
    let sigma_star = meta["result"]["sigma_star"].as_f64().unwrap();
    assert_eq!(meta["result"]["inversion_failures"], 0);
    for r in read_surface(&dir.path().join("out/psi_approx.csv")) {
        assert!((r[3] - psi_const(r[0], sigma_star)).abs() < 1e-5);
    }
    let pi = read_surface(&dir.path().join("out/pi_approx.csv"));
    assert!(pi.iter().all(|r| r[3].is_finite() && r[3] >= 0.0));
}

#[test]
fn compare_writes_slices_and_rankings() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "compare",
        r#"{"schema": 1, "factor": {"speed": 2.0}, "compare": {"sigma0": [0.25]}}"#,
        &["--nw", "41"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sub = dir.path().join("out/sigma0_0.25");
    let ranking = fs::read_to_string(sub.join("ranking.csv")).unwrap();
    let mut lines = ranking.lines();
    assert_eq!(lines.next(), Some("strategy,sup_gap,mean_gap"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("mcam_optimal,0,"));
    assert!(rows[6].starts_with("money_market,"));
    for label in [
        "mcam_optimal",
        "money_market",
        "const_sigma0",
        "myopic_c",
        "asympt_eps",
    ] {
        let slice = read_surface(&sub.join(format!("slice_{label}.csv")));
        assert_eq!(slice.len(), 41);
        assert!(slice.windows(2).all(|w| w[1][3] <= w[0][3] + 1e-12));
    }
}

#[test]
fn sweep_rho_writes_every_slice() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "sweep-rho",
        r#"{"schema": 1, "factor": {"speed": 2.0}, "sweep": {"rho": [-0.5, 0.5], "sigma0": [0.25]}}"#,
        &["--nw", "31"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for rho in ["m0.5", "0.5"] {
        let slice = read_surface(
            &dir.path()
                .join(format!("out/slice_rho_{rho}_sigma0_0.25.csv")),
        );
        assert_eq!(slice.len(), 31);
        assert!(dir.path().join(format!("out/rho_{rho}/psi.csv")).exists());
    }
    let meta = read_meta(&dir.path().join("out/meta.json"));
    assert_eq!(meta["runs"].as_array().unwrap().len(), 2);
    assert!(meta["sign_gaps"][0]["sup_diff"].as_f64().unwrap() >= 0.0);
}

#[test]
fn nonconvergence_keeps_flagged_outputs() {
    let dir = TempDir::new().unwrap();
    let out = run(
        &dir,
        "solve",
        r#"{"schema": 1, "factor": {"speed": 2.0, "rho": 0.5}, "solver": {"max_outer": 1}}"#,
        &["--nw", "21"],
    );
    assert_eq!(out.status.code(), Some(3));
    let meta = read_meta(&dir.path().join("out/meta.json"));
    assert_eq!(meta["result"]["converged"], false);
    assert!(dir.path().join("out/psi.csv").exists());
}
