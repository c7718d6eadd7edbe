//! Benchmark investment strategies, their ruin probabilities and
//! side-by-side comparison on one factor slice.

use rayon::prelude::*;
use serde::Serialize;

use crate::asymptotics::{build_coefficients, legendre_invert, pi_hat_combined, DualCoefficients};
use crate::error::{invalid, Result, RuinError};
use crate::mcam::{
    evaluate_policy, scale_adjust, solve, Grid2D, PolicySurface, SolveResult, SolverOptions,
    Surface, ValueSurface,
};
use crate::model::{harmonic_avg_vol, FactorKind, FactorSpec, MarketParams};

/// Which benchmark to build.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Everything in the money market.
    MoneyMarket,
    /// Constant-volatility optimum at the initial volatility.
    ConstSigma0 { sigma0: f64 },
    /// Constant-volatility optimum at the harmonic average volatility.
    ConstSigmaM,
    /// Constant-volatility rule with the current volatility plugged in and
    /// the exponent of the harmonic average volatility.
    MyopicC,
    /// Fast-factor expansion, `eps = 1/speed`, slow correction off.
    AsymptEps,
    /// Slow-factor expansion, `delta = speed`, fast correction off.
    AsymptDelta,
    /// The policy of a converged policy-iteration run.
    McamOptimal,
    #[serde(skip)]
    Custom { name: String, policy: PolicySurface },
}

impl StrategyKind {
    /// Short identifier used in reports and file names.
    pub fn label(&self) -> String {
        match self {
            Self::MoneyMarket => "money_market".into(),
            Self::ConstSigma0 { .. } => "const_sigma0".into(),
            Self::ConstSigmaM => "const_sigma_m".into(),
            Self::MyopicC => "myopic_c".into(),
            Self::AsymptEps => "asympt_eps".into(),
            Self::AsymptDelta => "asympt_delta".into(),
            Self::McamOptimal => "mcam_optimal".into(),
            Self::Custom { name, .. } => name.clone(),
        }
    }

    /// Parses a tag; `sigma0` is required for `const_sigma0`.
    pub fn from_tag(tag: &str, sigma0: Option<f64>) -> Result<Self> {
        Ok(match tag {
            "money_market" => Self::MoneyMarket,
            "const_sigma0" => {
                let sigma0 = sigma0.ok_or_else(|| {
                    RuinError::MissingInput("const_sigma0 needs an initial volatility".into())
                })?;
                Self::ConstSigma0 { sigma0 }
            }
            "const_sigma_m" => Self::ConstSigmaM,
            "myopic_c" => Self::MyopicC,
            "asympt_eps" => Self::AsymptEps,
            "asympt_delta" => Self::AsymptDelta,
            "mcam_optimal" => Self::McamOptimal,
            other => return Err(invalid("strategy", format!("unknown tag `{other}`"))),
        })
    }

    fn validate(&self, g: &Grid2D) -> Result<()> {
        match self {
            Self::ConstSigma0 { sigma0 } if !(*sigma0 > 0.0) || !sigma0.is_finite() => {
                Err(invalid("sigma0", format!("must be positive, got {sigma0}")))
            }
            Self::Custom { policy, .. } => {
                policy.check_shape(g, "custom policy")?;
                if policy.values.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(invalid(
                        "custom policy",
                        "values must be finite and nonnegative",
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A policy surface together with how it was built.
#[derive(Debug, Clone, Serialize)]
pub struct Strategy {
    pub label: String,
    pub policy: PolicySurface,
    /// Interior nodes where the expansion could not be inverted and the
    /// myopic rule was used instead.
    pub fallbacks: usize,
}

/// The factor spec in original (unstretched) coordinates.
fn unscaled(f: &FactorSpec) -> Result<FactorSpec> {
    scale_adjust(f, 1.0 / f.scale)
}

/// Volatility at which the constant-volatility benchmarks are evaluated.
pub fn sigma_m(f: &FactorSpec) -> Result<f64> {
    harmonic_avg_vol(&unscaled(f)?)
}

/// Builds the policy surface of `kind` on `g`. `optimal` supplies the
/// converged solve for [`StrategyKind::McamOptimal`].
pub fn make_strategy(
    kind: &StrategyKind,
    p: &MarketParams,
    f: &FactorSpec,
    g: &Grid2D,
    optimal: Option<&SolveResult>,
) -> Result<Strategy> {
    kind.validate(g)?;
    let sm = sigma_m(f)?;
    let p_m = p.exponent_p(sm)?;
    let myopic = |iw: usize, iv: usize| p.pi_tilde_with_p(g.w_nodes[iw], f.vol(g.v_nodes[iv]), p_m);
    let mut fallbacks = 0;
    let policy = match kind {
        StrategyKind::MoneyMarket => Surface::zeros(g),
        StrategyKind::ConstSigma0 { sigma0 } => {
            let col = constant_column(p, g, *sigma0)?;
            Surface::from_fn(g, |iw, _| col[iw])
        }
        StrategyKind::ConstSigmaM => {
            let col = constant_column(p, g, sm)?;
            Surface::from_fn(g, |iw, _| col[iw])
        }
        StrategyKind::MyopicC => Surface::from_fn(g, myopic),
        StrategyKind::AsymptEps => {
            let fe = unscaled(f)?.with_kind(FactorKind::Fast);
            let co = build_coefficients(p, &fe, fe.m)?;
            let eps = fe.eps();
            let mut s = Surface::zeros(g);
            for iw in 0..g.nw {
                // the inversion depends on wealth only
                let inv = invert_checked(g, iw, &co, eps, 0.0);
                for iv in 0..g.nv {
                    let pi = inv.and_then(|x| {
                        finite_nonneg(pi_hat_combined(x, g.v_original(iv), &co, eps, 0.0))
                    });
                    s.values[g.idx(iw, iv)] = resolve(g, iw, pi, myopic(iw, iv), &mut fallbacks);
                }
            }
            s
        }
        StrategyKind::AsymptDelta => {
            let fd = unscaled(f)?.with_kind(FactorKind::Slow);
            let delta = fd.delta();
            let rows: Vec<(Vec<f64>, usize)> = (0..g.nv)
                .into_par_iter()
                .map(|iv| {
                    let z = g.v_original(iv);
                    let mut n = 0;
                    let co = build_coefficients(p, &fd, z).ok();
                    let row = (0..g.nw)
                        .map(|iw| {
                            let pi = co.as_ref().and_then(|co| {
                                invert_checked(g, iw, co, 0.0, delta).and_then(|x| {
                                    finite_nonneg(pi_hat_combined(x, z, co, 0.0, delta))
                                })
                            });
                            resolve(g, iw, pi, myopic(iw, iv), &mut n)
                        })
                        .collect();
                    (row, n)
                })
                .collect();
            let mut s = Surface::zeros(g);
            for (iv, (row, n)) in rows.into_iter().enumerate() {
                fallbacks += n;
                for (iw, x) in row.into_iter().enumerate() {
                    s.values[g.idx(iw, iv)] = x;
                }
            }
            s
        }
        StrategyKind::McamOptimal => {
            let r = optimal.ok_or_else(|| {
                RuinError::MissingInput("mcam_optimal needs a converged solve".into())
            })?;
            if !r.converged {
                return Err(RuinError::MissingInput(
                    "mcam_optimal needs a converged solve; the supplied one did not converge"
                        .into(),
                ));
            }
            r.policy.check_shape(g, "optimal policy")?;
            r.policy.clone()
        }
        StrategyKind::Custom { policy, .. } => policy.clone(),
    };
    if fallbacks > 0 {
        log::info!(
            "{}: {fallbacks} nodes fell back to the myopic rule",
            kind.label()
        );
    }
    Ok(Strategy {
        label: kind.label(),
        policy,
        fallbacks,
    })
}

fn constant_column(p: &MarketParams, g: &Grid2D, sigma: f64) -> Result<Vec<f64>> {
    g.w_nodes.iter().map(|&w| p.pi_tilde(w, sigma)).collect()
}

/// Dual point for wealth node `iw`, or `None` when the inversion pinned to an
/// edge of its bracket or failed outright.
fn invert_checked(
    g: &Grid2D,
    iw: usize,
    co: &DualCoefficients,
    eps: f64,
    delta: f64,
) -> Option<f64> {
    if g.is_absorbing(iw) {
        return None;
    }
    match legendre_invert(g.w_nodes[iw], co, eps, delta) {
        Ok(inv) if !inv.clamped() && !inv.bracket_failed() => Some(inv.x_star),
        _ => None,
    }
}

fn finite_nonneg(x: f64) -> Option<f64> {
    (x.is_finite() && x >= 0.0).then_some(x)
}

/// Picks the expansion value or the myopic fallback. Absorbing columns never
/// count as fallbacks since their policy is never used.
fn resolve(g: &Grid2D, iw: usize, pi: Option<f64>, myopic: f64, fallbacks: &mut usize) -> f64 {
    if iw + 1 == g.nw {
        return 0.0;
    }
    match pi {
        Some(x) => x,
        None => {
            if !g.is_absorbing(iw) {
                *fallbacks += 1;
            }
            myopic
        }
    }
}

/// Ruin probability of a fixed policy: one transition build and one linear
/// solve, no policy iteration.
pub fn evaluate_ruin(
    pol: &PolicySurface,
    p: &MarketParams,
    f: &FactorSpec,
    g: &Grid2D,
    opts: &SolverOptions,
) -> Result<ValueSurface> {
    let (v, tm, residual) = evaluate_policy(g, p, f, pol, opts)?;
    log::debug!(
        "policy evaluation: residual {residual:e}, {} fallback and {} cross-dropped nodes",
        tm.stats.fallback_nodes,
        tm.stats.cross_dropped_nodes
    );
    Ok(v)
}

/// One strategy's results within a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyOutcome {
    pub label: String,
    pub fallbacks: usize,
    pub value: ValueSurface,
    /// Value along the compared factor row.
    pub slice: Vec<f64>,
    /// `max_w (V - V_ref)` on the slice.
    pub sup_gap: f64,
    /// Mean of `V - V_ref` over the slice.
    pub mean_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub grid: Grid2D,
    pub sigma0: f64,
    /// Row used for the slice and its original-coordinate factor value.
    pub row: usize,
    pub row_v: f64,
    /// Label of the reference: the optimal strategy when present, otherwise
    /// the pointwise best of the compared strategies.
    pub reference: String,
    pub outcomes: Vec<StrategyOutcome>,
    /// For every wealth node on the slice, outcome indices from best to worst.
    pub ranking: Vec<Vec<usize>>,
}

impl ComparisonReport {
    pub fn outcome(&self, label: &str) -> Option<&StrategyOutcome> {
        self.outcomes.iter().find(|o| o.label == label)
    }

    /// Outcome indices sorted by mean gap, best first.
    pub fn overall_ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.outcomes.len()).collect();
        idx.sort_by(|&a, &b| {
            self.outcomes[a]
                .mean_gap
                .total_cmp(&self.outcomes[b].mean_gap)
        });
        idx
    }
}

/// Evaluates every strategy and compares them on the factor row nearest to
/// `-ln(sigma0)`. A missing optimal solve is computed on the fly.
pub fn compare(
    kinds: &[StrategyKind],
    p: &MarketParams,
    f: &FactorSpec,
    g: &Grid2D,
    sigma0: f64,
    optimal: Option<&SolveResult>,
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    if kinds.len() < 2 {
        return Err(invalid(
            "strategies",
            "need at least two strategies to compare",
        ));
    }
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(invalid("sigma0", format!("must be positive, got {sigma0}")));
    }
    let v0 = f.volmap.inverse(sigma0).ok_or_else(|| {
        invalid(
            "sigma0",
            format!("volatility {sigma0} is not attained by the factor"),
        )
    })?;
    let row = g.nearest_row(v0, g.h / g.scale)?;

    let owned;
    let optimal = match optimal {
        Some(r) => Some(r),
        None if kinds.contains(&StrategyKind::McamOptimal) => {
            owned = solve(p, f, g, None, opts)?;
            Some(&owned)
        }
        None => None,
    };
    let mut opts = *opts;
    if let (None, Some(r)) = (opts.pi_cap, optimal) {
        opts.pi_cap = Some(r.pi_cap);
    }

    let strategies = kinds
        .iter()
        .map(|k| make_strategy(k, p, f, g, optimal))
        .collect::<Result<Vec<_>>>()?;
    let values = strategies
        .par_iter()
        .map(|s| evaluate_ruin(&s.policy, p, f, g, &opts))
        .collect::<Result<Vec<_>>>()?;

    let opt_idx = kinds.iter().position(|k| *k == StrategyKind::McamOptimal);
    let slices: Vec<Vec<f64>> = values.iter().map(|v| v.row(row).to_vec()).collect();
    let (reference, ref_slice) = match opt_idx {
        Some(i) => (strategies[i].label.clone(), slices[i].clone()),
        None => (
            "pointwise_best".to_string(),
            (0..g.nw)
                .map(|iw| slices.iter().map(|s| s[iw]).fold(f64::INFINITY, f64::min))
                .collect(),
        ),
    };

    let outcomes: Vec<StrategyOutcome> = strategies
        .into_iter()
        .zip(values)
        .zip(slices)
        .map(|((s, value), slice)| {
            let gaps: Vec<f64> = slice.iter().zip(&ref_slice).map(|(a, b)| a - b).collect();
            StrategyOutcome {
                label: s.label,
                fallbacks: s.fallbacks,
                value,
                sup_gap: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
                slice,
            }
        })
        .collect();

    let ranking = (0..g.nw)
        .map(|iw| {
            let mut idx: Vec<usize> = (0..outcomes.len()).collect();
            idx.sort_by(|&a, &b| outcomes[a].slice[iw].total_cmp(&outcomes[b].slice[iw]));
            idx
        })
        .collect();

    Ok(ComparisonReport {
        grid: g.clone(),
        sigma0,
        row,
        row_v: g.v_original(row),
        reference,
        outcomes,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcam::{build_grid, DEFAULT_V_SPAN};

    fn setup(
        kind: FactorKind,
        speed: f64,
        rho: f64,
        nw: usize,
    ) -> (MarketParams, FactorSpec, Grid2D) {
        let p = MarketParams::reference();
        let f = FactorSpec::reference(kind, speed, rho).unwrap();
        let g = build_grid(&p, &f, nw, DEFAULT_V_SPAN).unwrap();
        (p, f, g)
    }

    #[test]
    fn money_market_is_zero() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.0, 21);
        let s = make_strategy(&StrategyKind::MoneyMarket, &p, &f, &g, None).unwrap();
        assert!(s.policy.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn const_sigma_m_matches_pi_tilde() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.0, 21);
        let s = make_strategy(&StrategyKind::ConstSigmaM, &p, &f, &g, None).unwrap();
        let sm = sigma_m(&f).unwrap();
        assert!((sm - 0.25).abs() < 1e-3);
        for iv in [0, g.nv / 2, g.nv - 1] {
            for iw in 0..g.nw {
                let want = p.pi_tilde(g.w_nodes[iw], sm).unwrap();
                assert!((s.policy.get(iw, iv) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn myopic_equals_const_where_vol_is_sigma_m() {
        let p = MarketParams::reference();
        let sm = 0.25;
        // put a grid row exactly where f(v) = sigma_m
        let f = FactorSpec::reference(FactorKind::Fast, 0.5, 0.0).unwrap();
        let sm_f = sigma_m(&f).unwrap();
        let v = -sm_f.ln();
        let g = crate::mcam::build_grid_with_range(&p, &f, 21, v - 0.5, v + 0.5).unwrap();
        let iv = g.nearest_row(v, 1e-9).unwrap();
        let c = make_strategy(&StrategyKind::MyopicC, &p, &f, &g, None).unwrap();
        let b = make_strategy(&StrategyKind::ConstSigmaM, &p, &f, &g, None).unwrap();
        for iw in 0..g.nw {
            assert!(
                (c.policy.get(iw, iv) - b.policy.get(iw, iv)).abs()
                    < 1e-9 * (1.0 + b.policy.get(iw, iv))
            );
        }
        assert!((sm_f - sm).abs() < 1e-3);
    }

    #[test]
    fn missing_inputs_are_errors() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.0, 21);
        assert!(matches!(
            make_strategy(&StrategyKind::McamOptimal, &p, &f, &g, None),
            Err(RuinError::MissingInput(_))
        ));
        assert!(StrategyKind::from_tag("const_sigma0", None).is_err());
        assert!(StrategyKind::from_tag("bogus", Some(0.2)).is_err());
        assert_eq!(
            StrategyKind::from_tag("const_sigma0", Some(0.2)).unwrap(),
            StrategyKind::ConstSigma0 { sigma0: 0.2 }
        );
    }

    #[test]
    fn asymptotic_strategies_are_finite() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.5, 21);
        for k in [StrategyKind::AsymptEps, StrategyKind::AsymptDelta] {
            let s = make_strategy(&k, &p, &f, &g, None).unwrap();
            assert!(s.policy.values.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!(
                s.fallbacks < g.len() / 4,
                "{}: {} fallbacks",
                s.label,
                s.fallbacks
            );
            for iv in 0..g.nv {
                assert_eq!(s.policy.get(g.nw - 1, iv), 0.0);
            }
        }
    }

    #[test]
    fn optimal_dominates_benchmarks() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.0, 41);
        let kinds = [
            StrategyKind::McamOptimal,
            StrategyKind::MoneyMarket,
            StrategyKind::ConstSigmaM,
            StrategyKind::MyopicC,
        ];
        let rep = compare(&kinds, &p, &f, &g, 0.25, None, &SolverOptions::default()).unwrap();
        assert_eq!(rep.reference, "mcam_optimal");
        let opt = &rep.outcome("mcam_optimal").unwrap().value;
        for o in &rep.outcomes {
            for (a, b) in opt.values.iter().zip(&o.value.values) {
                assert!(*a <= b + 1e-6, "{}: {a} > {b}", o.label);
            }
        }
        let mm = rep.outcome("money_market").unwrap();
        assert!(rep.outcomes.iter().all(|o| o.sup_gap <= mm.sup_gap));
        assert_eq!(*rep.overall_ranking().last().unwrap(), 1);
    }

    #[test]
    fn compare_rejects_bad_input() {
        let (p, f, g) = setup(FactorKind::Fast, 0.5, 0.0, 21);
        let o = SolverOptions::default();
        assert!(compare(&[StrategyKind::MoneyMarket], &p, &f, &g, 0.25, None, &o).is_err());
        let two = [StrategyKind::MoneyMarket, StrategyKind::ConstSigmaM];
        assert!(compare(&two, &p, &f, &g, 5.0, None, &o).is_err());
        assert!(compare(&two, &p, &f, &g, -1.0, None, &o).is_err());
    }
}
