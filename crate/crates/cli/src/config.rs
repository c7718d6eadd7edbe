//! Run configuration. JSON, versioned, unknown keys rejected.

use std::path::Path;

use serde::Deserialize;

use ruinsolve_core::mcam::Construction;
use ruinsolve_core::{
    build_grid, build_grid_with_range, scale_adjust, FactorKind, FactorSpec, Grid2D,
    ImprovementRule, LinearSolver, MarketParams, SolverOptions, StrategyKind, VolMap,
    DEFAULT_V_SPAN,
};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default)]
    pub market: MarketConfig,
    #[serde(default)]
    pub factor: FactorConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    pub r: f64,
    pub mu: f64,
    pub c: f64,
    pub lambda: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        let p = MarketParams::reference();
        Self {
            r: p.r,
            mu: p.mu,
            c: p.c,
            lambda: p.lambda,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    pub kind: FactorKind,
    pub speed: f64,
    pub m: f64,
    pub nu: f64,
    pub rho: f64,
    pub volmap: VolMap,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            kind: FactorKind::Fast,
            speed: 0.5,
            m: 1.364,
            nu: 0.15,
            rho: 0.0,
            volmap: VolMap::ExpNeg,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nw: usize,
    /// Explicit factor range in original units; both or neither.
    pub v_lo: Option<f64>,
    pub v_hi: Option<f64>,
    /// Half-width in stationary standard deviations when no range is given.
    pub v_span: f64,
    /// Stretch of the factor coordinate.
    pub scale: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nw: 101,
            v_lo: None,
            v_hi: None,
            v_span: DEFAULT_V_SPAN,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol_value: f64,
    pub tol_policy: f64,
    pub max_outer: usize,
    pub k2_min: usize,
    pub k2_max: usize,
    pub pi_cap: Option<f64>,
    pub improvement: ImprovementRule,
    pub linear: LinearSolver,
    pub construction: Option<Construction>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            tol_value: o.tol_value,
            tol_policy: o.tol_policy,
            max_outer: o.max_outer,
            k2_min: o.k2_min,
            k2_max: o.k2_max,
            pi_cap: o.pi_cap,
            improvement: o.improvement,
            linear: o.linear,
            construction: o.construction,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub sigma0: Vec<f64>,
    pub strategies: Vec<String>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            sigma0: vec![0.6, 0.25, 0.1],
            strategies: [
                "mcam_optimal",
                "money_market",
                "const_sigma0",
                "const_sigma_m",
                "myopic_c",
                "asympt_eps",
                "asympt_delta",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rho: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rho: vec![-0.5, 0.0, 0.5],
            sigma0: vec![0.6, 0.25, 0.1],
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub nw: Option<usize>,
    pub rho: Option<f64>,
    pub speed: Option<f64>,
}

/// Validated inputs ready for the solvers.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub market: MarketParams,
    /// Factor in the (possibly stretched) grid coordinate.
    pub factor: FactorSpec,
    pub grid: Grid2D,
    pub opts: SolverOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(nw) = o.nw {
            self.grid.nw = nw;
        }
        if let Some(rho) = o.rho {
            self.factor.rho = rho;
        }
        if let Some(speed) = o.speed {
            self.factor.speed = speed;
        }
    }

    pub fn market(&self) -> Result<MarketParams, CliError> {
        let m = &self.market;
        Ok(MarketParams::new(m.r, m.mu, m.c, m.lambda)?)
    }

    /// Factor in original units.
    pub fn factor(&self) -> Result<FactorSpec, CliError> {
        let f = &self.factor;
        Ok(FactorSpec::new(
            f.kind, f.speed, f.m, f.nu, f.rho, f.volmap,
        )?)
    }

    pub fn solver_options(&self) -> Result<SolverOptions, CliError> {
        let s = &self.solver;
        let o = SolverOptions {
            tol_value: s.tol_value,
            tol_policy: s.tol_policy,
            max_outer: s.max_outer,
            k2_min: s.k2_min,
            k2_max: s.k2_max,
            pi_cap: s.pi_cap,
            improvement: s.improvement,
            linear: s.linear,
            construction: s.construction,
        };
        o.validate()?;
        Ok(o)
    }

    /// Builds the grid for `factor` given in original units.
    pub fn resolve_with(&self, factor: FactorSpec) -> Result<Resolved, CliError> {
        let market = self.market()?;
        let g = &self.grid;
        let factor = scale_adjust(&factor, g.scale)?;
        let grid = match (g.v_lo, g.v_hi) {
            (Some(lo), Some(hi)) => {
                build_grid_with_range(&market, &factor, g.nw, lo * g.scale, hi * g.scale)?
            }
            (None, None) => build_grid(&market, &factor, g.nw, g.v_span)?,
            _ => {
                return Err(CliError::Config(
                    "grid.v_lo and grid.v_hi must be given together".into(),
                ))
            }
        };
        Ok(Resolved {
            market,
            factor,
            grid,
            opts: self.solver_options()?,
        })
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        self.resolve_with(self.factor()?)
    }

    pub fn strategies(&self, sigma0: f64) -> Result<Vec<StrategyKind>, CliError> {
        self.compare
            .strategies
            .iter()
            .map(|t| StrategyKind::from_tag(t, Some(sigma0)).map_err(CliError::from))
            .collect()
    }
}
