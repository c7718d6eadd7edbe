use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use ruinsolve_core::asymptotics::pi_hat_combined;
use ruinsolve_core::mcam::TransitionStats;
use ruinsolve_core::{
    build_coefficients, compare, legendre_invert, solve, FactorKind, Grid2D, SolveResult, Surface,
};

use crate::config::{Resolved, RunConfig};
use crate::output::{
    check_value_boundaries, ensure_dir, slug, write_json, write_ranking, write_slice, write_surface,
};
use crate::CliError;

#[derive(Serialize)]
struct GridMeta {
    h: f64,
    nw: usize,
    nv: usize,
    v_lo: f64,
    v_hi: f64,
    scale: f64,
}

fn grid_meta(g: &Grid2D) -> GridMeta {
    GridMeta {
        h: g.h,
        nw: g.nw,
        nv: g.nv,
        v_lo: g.v_original(0),
        v_hi: g.v_original(g.nv - 1),
        scale: g.scale,
    }
}

#[derive(Serialize)]
struct SolveMeta<'a> {
    converged: bool,
    iterations: usize,
    changes: &'a [f64],
    residual: f64,
    dt_global: f64,
    q_tilde: f64,
    pi_cap: f64,
    construction: ruinsolve_core::mcam::Construction,
    stats: &'a TransitionStats,
}

fn solve_meta(r: &SolveResult) -> SolveMeta<'_> {
    SolveMeta {
        converged: r.converged,
        iterations: r.iterations,
        // the first change is infinite by construction; JSON has no infinity
        changes: if r.changes.len() > 1 {
            &r.changes[1..]
        } else {
            &[]
        },
        residual: r.residual,
        dt_global: r.dt_global,
        q_tilde: r.q_tilde,
        pi_cap: r.pi_cap,
        construction: r.construction,
        stats: &r.stats,
    }
}

fn base_meta(command: &str, cfg: &RunConfig, rs: &Resolved) -> Value {
    json!({
        "command": command,
        "schema": crate::config::SCHEMA_VERSION,
        "market": rs.market,
        "factor": {
            "kind": cfg.factor.kind,
            "speed": rs.factor.speed,
            "m": cfg.factor.m,
            "nu": cfg.factor.nu,
            "rho": rs.factor.rho,
            "volmap": cfg.factor.volmap,
        },
        "grid": grid_meta(&rs.grid),
        "solver": rs.opts,
    })
}

fn run_solve(rs: &Resolved) -> Result<SolveResult, CliError> {
    let r = solve(&rs.market, &rs.factor, &rs.grid, None, &rs.opts)?;
    check_value_boundaries(&rs.grid, &r.value)?;
    Ok(r)
}

fn not_converged(what: &str, r: &SolveResult) -> CliError {
    CliError::Convergence(format!(
        "{what}: policy iteration stopped after {} iterations without converging; outputs are flagged in meta.json",
        r.iterations
    ))
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let rs = cfg.resolve()?;
    ensure_dir(out)?;
    let t = Instant::now();
    let r = run_solve(&rs)?;
    let wall = t.elapsed().as_secs_f64();
    write_surface(&out.join("psi.csv"), &rs.grid, &rs.factor, &r.value)?;
    write_surface(&out.join("pi.csv"), &rs.grid, &rs.factor, &r.policy)?;
    let mut meta = base_meta("solve", cfg, &rs);
    meta["result"] = json!(solve_meta(&r));
    meta["wall_time_s"] = json!(wall);
    write_json(&out.join("meta.json"), &meta)?;
    log::info!("solve: {} iterations in {wall:.2} s", r.iterations);
    if !r.converged {
        return Err(not_converged("solve", &r));
    }
    Ok(())
}

pub fn cmd_approx(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let rs = cfg.resolve()?;
    let f0 = cfg.factor()?;
    let (p, g) = (&rs.market, &rs.grid);
    ensure_dir(out)?;
    let t = Instant::now();
    let (eps, delta) = (f0.eps(), f0.delta());
    let fast = match f0.kind {
        FactorKind::Fast => Some(build_coefficients(p, &f0, f0.m)?),
        FactorKind::Slow => None,
    };
    let mut psi = Surface::zeros(g);
    let mut pi = Surface::zeros(g);
    let (mut out_of_range, mut pinned, mut negative_pi) = (0usize, 0usize, 0usize);
    for iv in 0..g.nv {
        let z = g.v_original(iv);
        let slow;
        let co = match &fast {
            Some(co) => co,
            None => {
                slow = build_coefficients(p, &f0, z)?;
                &slow
            }
        };
        for iw in 0..g.nw {
            let idx = g.idx(iw, iv);
            if iw == 0 {
                psi.values[idx] = 1.0;
            }
            if iw + 1 == g.nw {
                continue;
            }
            let inv = legendre_invert(g.w_nodes[iw], co, eps, delta)?;
            let interior = iw > 0;
            if interior {
                psi.values[idx] = inv.psi;
                out_of_range += usize::from(inv.clamped());
                pinned += usize::from(inv.bracket_failed());
            }
            let x = pi_hat_combined(inv.x_star, z, co, eps, delta);
            if !x.is_finite() {
                return Err(CliError::Numerical(format!(
                    "non-finite investment at node ({iw}, {iv})"
                )));
            }
            negative_pi += usize::from(x < 0.0 && interior);
            pi.values[idx] = x;
        }
    }
    let wall = t.elapsed().as_secs_f64();
    write_surface(&out.join("psi_approx.csv"), g, &rs.factor, &psi)?;
    write_surface(&out.join("pi_approx.csv"), g, &rs.factor, &pi)?;
    let mut meta = base_meta("approx", cfg, &rs);
    meta["result"] = json!({
        "eps": eps,
        "delta": delta,
        "out_of_range": out_of_range,
        "inversion_failures": pinned,
        "negative_pi": negative_pi,
        "sigma_star": fast.as_ref().map(|c| c.sigma_star),
        "a": fast.as_ref().map(|c| c.a),
    });
    meta["wall_time_s"] = json!(wall);
    write_json(&out.join("meta.json"), &meta)?;
    if out_of_range + pinned > 0 {
        log::warn!("approx: {out_of_range} values outside [0, 1], {pinned} pinned inversions");
    }
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let rs = cfg.resolve()?;
    if cfg.compare.sigma0.is_empty() {
        return Err(CliError::Config("compare.sigma0 is empty".into()));
    }
    // parse tags before the expensive solve
    for &s0 in &cfg.compare.sigma0 {
        cfg.strategies(s0)?;
    }
    ensure_dir(out)?;
    let t = Instant::now();
    let needs_opt = cfg.compare.strategies.iter().any(|s| s == "mcam_optimal");
    let optimal = if needs_opt {
        Some(run_solve(&rs)?)
    } else {
        None
    };
    let mut meta = base_meta("compare", cfg, &rs);
    if let Some(r) = &optimal {
        meta["optimal"] = json!(solve_meta(r));
        if !r.converged {
            write_json(&out.join("meta.json"), &meta)?;
            return Err(not_converged("compare", r));
        }
    }
    let mut summaries = Vec::new();
    for &s0 in &cfg.compare.sigma0 {
        let kinds = cfg.strategies(s0)?;
        let rep = compare(
            &kinds,
            &rs.market,
            &rs.factor,
            &rs.grid,
            s0,
            optimal.as_ref(),
            &rs.opts,
        )?;
        let dir = out.join(format!("sigma0_{}", slug(s0)));
        ensure_dir(&dir)?;
        for o in &rep.outcomes {
            check_value_boundaries(&rs.grid, &o.value)?;
            write_slice(
                &dir.join(format!("slice_{}.csv", o.label)),
                &rs.grid,
                &rs.factor,
                rep.row,
                &o.slice,
            )?;
        }
        let ranked: Vec<(String, f64, f64)> = rep
            .overall_ranking()
            .into_iter()
            .map(|i| {
                let o = &rep.outcomes[i];
                (o.label.clone(), o.sup_gap, o.mean_gap)
            })
            .collect();
        write_ranking(&dir.join("ranking.csv"), &ranked)?;
        let order: Vec<Vec<&str>> = rep
            .ranking
            .iter()
            .map(|r| r.iter().map(|&i| rep.outcomes[i].label.as_str()).collect())
            .collect();
        summaries.push(json!({
            "sigma0": s0,
            "row": rep.row,
            "row_v": rep.row_v,
            "reference": rep.reference,
            "fallbacks": rep.outcomes.iter().map(|o| (o.label.clone(), o.fallbacks)).collect::<Vec<_>>(),
            "ranking": ranked,
            "order_by_wealth": order,
        }));
    }
    meta["comparisons"] = json!(summaries);
    meta["wall_time_s"] = json!(t.elapsed().as_secs_f64());
    write_json(&out.join("meta.json"), &meta)?;
    Ok(())
}

pub fn cmd_sweep_rho(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.sweep.rho.is_empty() {
        return Err(CliError::Config("sweep.rho is empty".into()));
    }
    let f0 = cfg.factor()?;
    let resolved = cfg
        .sweep
        .rho
        .iter()
        .map(|&rho| cfg.resolve_with(f0.with_rho(rho)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let g = &resolved[0].grid;
    let rows = cfg
        .sweep
        .sigma0
        .iter()
        .map(|&s0| {
            let v = f0.volmap.inverse(s0).ok_or_else(|| {
                CliError::Config(format!("sigma0 {s0} is not attained by the volatility map"))
            })?;
            Ok((s0, g.nearest_row(v, g.h / g.scale)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ensure_dir(out)?;
    let t = Instant::now();
    let mut results: Vec<(f64, SolveResult)> = Vec::new();
    for (rs, &rho) in resolved.iter().zip(&cfg.sweep.rho) {
        let r = run_solve(rs)?;
        log::info!(
            "rho {rho}: {} iterations, converged = {}",
            r.iterations,
            r.converged
        );
        let dir = out.join(format!("rho_{}", slug(rho)));
        ensure_dir(&dir)?;
        write_surface(&dir.join("psi.csv"), &rs.grid, &rs.factor, &r.value)?;
        write_surface(&dir.join("pi.csv"), &rs.grid, &rs.factor, &r.policy)?;
        for &(s0, iv) in &rows {
            write_slice(
                &out.join(format!("slice_rho_{}_sigma0_{}.csv", slug(rho), slug(s0))),
                &rs.grid,
                &rs.factor,
                iv,
                r.value.row(iv),
            )?;
        }
        results.push((rho, r));
    }

    // diagnostics on sign and size dependence
    let find = |x: f64| {
        results
            .iter()
            .find(|(r, _)| (*r - x).abs() < 1e-12)
            .map(|(_, s)| s)
    };
    let mut sign_gaps = Vec::new();
    let mut below_zero = Vec::new();
    for (rho, r) in &results {
        if *rho > 0.0 {
            if let Some(m) = find(-rho) {
                sign_gaps.push(json!({"rho": rho, "sup_diff": r.value.sup_distance(&m.value)}));
            }
        }
        if let (Some(z), true) = (find(0.0), *rho != 0.0) {
            let worst = z
                .value
                .values
                .iter()
                .zip(&r.value.values)
                .map(|(a, b)| a - b)
                .fold(f64::NEG_INFINITY, f64::max);
            below_zero.push(json!({"rho": rho, "max_psi0_minus_psi": worst}));
        }
    }
    let mut spread = 0.0f64;
    for (_, a) in &results {
        for (_, b) in &results {
            spread = spread.max(a.value.sup_distance(&b.value));
        }
    }

    let mut meta = base_meta("sweep-rho", cfg, &resolved[0]);
    meta["runs"] = json!(results
        .iter()
        .map(|(rho, r)| json!({"rho": rho, "result": solve_meta(r)}))
        .collect::<Vec<_>>());
    meta["slices"] = json!(rows
        .iter()
        .map(|&(s0, iv)| json!({"sigma0": s0, "row": iv, "v": g.v_original(iv)}))
        .collect::<Vec<_>>());
    meta["sign_gaps"] = json!(sign_gaps);
    meta["below_uncorrelated"] = json!(below_zero);
    meta["max_spread"] = json!(spread);
    meta["wall_time_s"] = json!(t.elapsed().as_secs_f64());
    write_json(&out.join("meta.json"), &meta)?;
    if let Some((rho, r)) = results.iter().find(|(_, r)| !r.converged) {
        return Err(not_converged(&format!("sweep-rho at rho {rho}"), r));
    }
    Ok(())
}
