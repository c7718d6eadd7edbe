//! Minimal probability of lifetime ruin under stochastic volatility.
//!
//! Two solvers are provided: a dual (Legendre) asymptotic expansion for fast or
//! slow mean-reverting volatility, and a Markov chain approximation of the
//! controlled wealth/factor diffusion solved by policy iteration. The
//! `strategy` module evaluates benchmark investment rules against the optimum.

pub mod asymptotics;
pub mod error;
pub mod mcam;
pub mod model;
pub mod numerics;
pub mod strategy;

pub use asymptotics::{
    build_coefficients, legendre_invert, pi_approx, DualCoefficients, Inversion,
};
pub use error::{Result, RuinError};
pub use mcam::{
    build_grid, build_grid_with_range, evaluate_policy, scale_adjust, solve, Grid2D,
    ImprovementRule, LinearSolver, PolicySurface, SolveResult, SolverOptions, Surface,
    ValueSurface, DEFAULT_V_SPAN,
};
pub use model::{harmonic_avg_vol, FactorKind, FactorSpec, MarketParams, VolMap, VolPoint};
pub use strategy::{
    compare, evaluate_ruin, make_strategy, ComparisonReport, Strategy, StrategyKind,
};
