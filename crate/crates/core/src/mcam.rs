//! Markov chain approximation of the controlled wealth/factor diffusion and
//! policy iteration for the minimum ruin probability.
//!
//! The state is `(w, v)` on a uniform grid with spacing `h` in both
//! directions. Wealth columns `w = 0` and `w = c/r` are absorbing with values
//! 1 and 0; the lowest and highest factor rows reflect inward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RuinError};
use crate::model::{harmonic_avg_vol, FactorSpec, MarketParams};
use crate::numerics::{solve_linear_fixed_point, solve_sparse_direct, LinearSystem};

/// Default half-width of the factor range, in stationary standard deviations.
/// Wide enough that the rows for sigma = 0.1 and 0.6 lie inside the reference grid.
pub const DEFAULT_V_SPAN: f64 = 6.5;

/// Uniform grid over `[0, c/r] x [v_lo, v_hi]`.
///
/// Factor values are in the (possibly scale-adjusted) coordinate of the
/// factor spec used to build the grid; `v_original` undoes the stretch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid2D {
    pub h: f64,
    pub nw: usize,
    pub nv: usize,
    pub w_nodes: Vec<f64>,
    pub v_nodes: Vec<f64>,
    pub scale: f64,
}

impl Grid2D {
    pub fn len(&self) -> usize {
        self.nw * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node index, factor-major.
    #[inline]
    pub fn idx(&self, iw: usize, iv: usize) -> usize {
        iv * self.nw + iw
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nw, idx / self.nw)
    }

    pub fn v_original(&self, iv: usize) -> f64 {
        self.v_nodes[iv] / self.scale
    }

    pub fn is_absorbing(&self, iw: usize) -> bool {
        iw == 0 || iw + 1 == self.nw
    }

    pub fn is_reflecting(&self, iv: usize) -> bool {
        iv == 0 || iv + 1 == self.nv
    }

    /// Row nearest to the original-coordinate factor value `v`. Values more
    /// than `tol` outside the grid's range are rejected.
    pub fn nearest_row(&self, v: f64, tol: f64) -> Result<usize> {
        let lo = self.v_original(0);
        let hi = self.v_original(self.nv - 1);
        if !v.is_finite() || v < lo - tol || v > hi + tol {
            return Err(RuinError::Domain {
                what: "factor value",
                value: v,
                domain: format!("[{lo}, {hi}] (+-{tol})"),
            });
        }
        let step = self.h / self.scale;
        let k = ((v - lo) / step).round().clamp(0.0, (self.nv - 1) as f64);
        Ok(k as usize)
    }
}

/// Builds the grid with `h = (c/r)/(nw - 1)` and factor range
/// `m +- v_span nu`, widened to a whole number of steps and centered on `m`.
pub fn build_grid(p: &MarketParams, f: &FactorSpec, nw: usize, v_span: f64) -> Result<Grid2D> {
    if !(v_span > 0.0) || !v_span.is_finite() {
        return Err(invalid("v_span", format!("must be positive, got {v_span}")));
    }
    let h = wealth_step(p, nw)?;
    let half = (v_span * f.nu / h - 1e-9).ceil().max(1.0) as usize;
    let v_nodes = (0..=2 * half)
        .map(|k| f.m + (k as f64 - half as f64) * h)
        .collect();
    finish_grid(p, f, nw, h, v_nodes)
}

/// Builds the grid on an explicit factor range, which must span a whole
/// number of wealth steps.
pub fn build_grid_with_range(
    p: &MarketParams,
    f: &FactorSpec,
    nw: usize,
    v_lo: f64,
    v_hi: f64,
) -> Result<Grid2D> {
    let h = wealth_step(p, nw)?;
    if !(v_lo < v_hi) || !v_lo.is_finite() || !v_hi.is_finite() {
        return Err(RuinError::Grid(format!(
            "bad factor range [{v_lo}, {v_hi}]"
        )));
    }
    let steps = (v_hi - v_lo) / h;
    let n = steps.round();
    if (steps - n).abs() > 1e-6 || n < 2.0 {
        return Err(RuinError::Grid(format!(
            "factor range [{v_lo}, {v_hi}] is not a whole number (>= 2) of steps h = {h}"
        )));
    }
    let v_nodes = (0..=n as usize).map(|k| v_lo + k as f64 * h).collect();
    finish_grid(p, f, nw, h, v_nodes)
}

fn wealth_step(p: &MarketParams, nw: usize) -> Result<f64> {
    if nw < 11 {
        return Err(RuinError::Grid(format!("need nw >= 11, got {nw}")));
    }
    Ok(p.safe_level() / (nw - 1) as f64)
}

fn finish_grid(
    p: &MarketParams,
    f: &FactorSpec,
    nw: usize,
    h: f64,
    v_nodes: Vec<f64>,
) -> Result<Grid2D> {
    let top = p.safe_level();
    let mut w_nodes: Vec<f64> = (0..nw).map(|i| i as f64 * h).collect();
    w_nodes[nw - 1] = top;
    Ok(Grid2D {
        h,
        nw,
        nv: v_nodes.len(),
        w_nodes,
        v_nodes,
        scale: f.scale,
    })
}

/// Stretches the factor coordinate by `factor`: the returned spec describes
/// `factor * V`, with mean and spread multiplied by `factor` and the volatility
/// map evaluated at `v / factor`.
pub fn scale_adjust(f: &FactorSpec, factor: f64) -> Result<FactorSpec> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(invalid(
            "scale factor",
            format!("must be positive, got {factor}"),
        ));
    }
    let mut g = *f;
    g.m *= factor;
    g.nu *= factor;
    g.scale *= factor;
    g.validate()?;
    Ok(g)
}

/// Node values on a grid (ruin probabilities or investment amounts).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Surface {
    pub nw: usize,
    pub nv: usize,
    pub values: Vec<f64>,
}

pub type ValueSurface = Surface;
pub type PolicySurface = Surface;

impl Surface {
    pub fn zeros(g: &Grid2D) -> Self {
        Self {
            nw: g.nw,
            nv: g.nv,
            values: vec![0.0; g.len()],
        }
    }

    pub fn from_fn<F: Fn(usize, usize) -> f64>(g: &Grid2D, f: F) -> Self {
        let mut s = Self::zeros(g);
        for iv in 0..g.nv {
            for iw in 0..g.nw {
                s.values[g.idx(iw, iv)] = f(iw, iv);
            }
        }
        s
    }

    #[inline]
    pub fn get(&self, iw: usize, iv: usize) -> f64 {
        self.values[iv * self.nw + iw]
    }

    /// Values along one factor row.
    pub fn row(&self, iv: usize) -> &[f64] {
        &self.values[iv * self.nw..(iv + 1) * self.nw]
    }

    pub fn sup_distance(&self, other: &Surface) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Checks dimensions against `g` and that every value is finite.
    pub fn check_shape(&self, g: &Grid2D, what: &str) -> Result<()> {
        if self.nw != g.nw || self.nv != g.nv || self.values.len() != g.len() {
            return Err(RuinError::Grid(format!(
                "{what} is {}x{} but the grid is {}x{}",
                self.nw, self.nv, g.nw, g.nv
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(RuinError::NonFinite(what.to_string()));
        }
        Ok(())
    }
}

/// How the transitions out of one node were built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Absorbing,
    Reflecting,
    Simple,
    Decomposed,
    /// Decomposed, but no lattice direction was found within `k2_max`; the
    /// stock/factor covariance is dropped at this node.
    CrossDropped,
}

/// Which stencil family to try first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Five-point stencil, uncorrelated factor.
    SimpleRho0,
    /// Nine-point stencil with per-node fallback to the decomposition.
    SimpleRho,
    /// Drift / degenerate noise / diagonal noise decomposition everywhere.
    Decomposed,
}

/// `(sigma1, sigma2) = q (k1, k2 + gamma)` with integer `k1`, `k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceControl {
    pub q: f64,
    pub k1: i64,
    pub k2: i64,
    pub gamma: f64,
}

impl VarianceControl {
    /// Relative error of the second-coordinate variance,
    /// `gamma (1 - gamma) / (k2 + gamma)^2`.
    pub fn distortion(&self) -> f64 {
        let k = self.k2 as f64 + self.gamma;
        self.gamma * (1.0 - self.gamma) / (k * k)
    }
}

/// Finds the lattice direction closest to `(sigma1, sigma2)` with
/// `k2 >= k2_min`. Returns `Ok(None)` when no `k2 <= k2_max` works.
///
/// The overall sign is irrelevant (the noise is symmetric), so the result is
/// normalized to `q > 0`, `k2 >= 0`; `k1` carries the relative sign.
pub fn variance_control_decompose(
    sigma1: f64,
    sigma2: f64,
    k2_min: usize,
    k2_max: usize,
) -> Result<Option<VarianceControl>> {
    if sigma2 == 0.0 || !sigma2.is_finite() || !sigma1.is_finite() {
        return Err(invalid(
            "sigma2",
            format!("must be finite and nonzero, got {sigma2}"),
        ));
    }
    if k2_min == 0 || k2_max < k2_min {
        return Err(invalid(
            "k2_min",
            format!("need 1 <= k2_min <= k2_max, got {k2_min}, {k2_max}"),
        ));
    }
    let (s1, s2) = if sigma2 < 0.0 {
        (-sigma1, -sigma2)
    } else {
        (sigma1, sigma2)
    };
    if s1 == 0.0 {
        return Ok(Some(VarianceControl {
            q: s2 / k2_min as f64,
            k1: 0,
            k2: k2_min as i64,
            gamma: 0.0,
        }));
    }
    let sign = s1.signum() as i64;
    let t = s1.abs() / s2;
    for k2 in k2_min..=k2_max {
        let lo = t * k2 as f64;
        let hi = t * (k2 + 1) as f64;
        let k1 = (lo - 1e-12 * lo.max(1.0)).ceil().max(1.0);
        if k1 <= hi + 1e-12 * hi.max(1.0) {
            let q = s1.abs() / k1;
            let gamma = (s2 / q - k2 as f64).clamp(0.0, 1.0);
            return Ok(Some(VarianceControl {
                q,
                k1: sign * k1 as i64,
                k2: k2 as i64,
                gamma,
            }));
        }
    }
    Ok(None)
}

/// Local transition rule at fixed market, factor, grid and normalizer.
#[derive(Debug, Clone)]
pub struct Stencil<'a> {
    pub grid: &'a Grid2D,
    pub market: &'a MarketParams,
    pub factor: &'a FactorSpec,
    pub construction: Construction,
    /// Global normalizer of the simple stencils.
    pub q_tilde: f64,
    pub k2_min: usize,
    pub k2_max: usize,
    vols: Vec<f64>,
}

/// Diagnostics of one node's transitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeInfo {
    pub dt: f64,
    pub kind: NodeKind,
    /// Variance-control distortion (zero unless decomposed).
    pub distortion: f64,
    /// Some factor move was mirrored at the grid edge.
    pub clipped: bool,
}

impl<'a> Stencil<'a> {
    pub fn new(
        grid: &'a Grid2D,
        market: &'a MarketParams,
        factor: &'a FactorSpec,
        construction: Construction,
        q_tilde: f64,
        k2_min: usize,
        k2_max: usize,
    ) -> Result<Self> {
        if !(q_tilde > 0.0) || !q_tilde.is_finite() {
            return Err(invalid(
                "q_tilde",
                format!("must be positive, got {q_tilde}"),
            ));
        }
        if k2_min == 0 || k2_max < k2_min {
            return Err(invalid(
                "k2_min",
                format!("need 1 <= k2_min <= k2_max, got {k2_min}, {k2_max}"),
            ));
        }
        let vols = grid.v_nodes.iter().map(|&v| factor.vol(v)).collect();
        Ok(Self {
            grid,
            market,
            factor,
            construction,
            q_tilde,
            k2_min,
            k2_max,
            vols,
        })
    }

    /// Interpolation interval of the simple stencils.
    pub fn dt_global(&self) -> f64 {
        self.grid.h * self.grid.h / self.q_tilde
    }

    /// `Q` of the simple stencil at an interior node and investment `pi`.
    pub fn local_q(&self, iw: usize, iv: usize, pi: f64) -> f64 {
        local_q(
            self.grid,
            self.market,
            self.factor,
            self.vols[iv],
            iw,
            iv,
            pi,
            self.construction,
        )
    }

    /// Appends `(target, probability)` pairs for node `(iw, iv)` under
    /// investment `pi` to `out` (cleared first). Duplicate targets are merged.
    pub fn node_into(
        &self,
        iw: usize,
        iv: usize,
        pi: f64,
        out: &mut Vec<(usize, f64)>,
    ) -> NodeInfo {
        out.clear();
        let g = self.grid;
        let here = g.idx(iw, iv);
        let dt = self.dt_global();
        if g.is_absorbing(iw) {
            out.push((here, 1.0));
            return NodeInfo {
                dt,
                kind: NodeKind::Absorbing,
                distortion: 0.0,
                clipped: false,
            };
        }
        if g.is_reflecting(iv) {
            let inward = if iv == 0 { 1 } else { g.nv - 2 };
            out.push((g.idx(iw, inward), 1.0));
            return NodeInfo {
                dt,
                kind: NodeKind::Reflecting,
                distortion: 0.0,
                clipped: false,
            };
        }
        let info = match self.construction {
            Construction::SimpleRho0 => {
                self.simple_rho0(iw, iv, pi, out);
                NodeInfo {
                    dt,
                    kind: NodeKind::Simple,
                    distortion: 0.0,
                    clipped: false,
                }
            }
            Construction::SimpleRho => {
                if self.simple_rho(iw, iv, pi, out) {
                    NodeInfo {
                        dt,
                        kind: NodeKind::Simple,
                        distortion: 0.0,
                        clipped: false,
                    }
                } else {
                    self.decomposed(iw, iv, pi, out)
                }
            }
            Construction::Decomposed => self.decomposed(iw, iv, pi, out),
        };
        merge_duplicates(out);
        info
    }

    fn drift_parts(&self, iw: usize, iv: usize, pi: f64) -> (f64, f64, f64) {
        let p = self.market;
        let w = self.grid.w_nodes[iw];
        let y = self.grid.v_nodes[iv];
        (
            self.factor.alpha() * (self.factor.m - y),
            p.excess_return() * pi,
            p.r * w - p.c,
        )
    }

    fn simple_rho0(&self, iw: usize, iv: usize, pi: f64, out: &mut Vec<(usize, f64)>) {
        let g = self.grid;
        let h = g.h;
        let f = self.vols[iv];
        let beta = self.factor.beta();
        let (fac, inv, cons) = self.drift_parts(iw, iv, pi);
        let qt = self.q_tilde;
        let var_w = 0.5 * (f * pi) * (f * pi);
        let var_v = 0.5 * beta * beta;
        let v_up = (var_v + h * pos(fac)) / qt;
        let v_dn = (var_v + h * neg(fac)) / qt;
        let w_up = (var_w + h * pos(inv) + h * pos(cons)) / qt;
        let w_dn = (var_w + h * neg(inv) + h * neg(cons)) / qt;
        let stay = 1.0 - (v_up + v_dn + w_up + w_dn);
        out.push((g.idx(iw, iv + 1), v_up));
        out.push((g.idx(iw, iv - 1), v_dn));
        out.push((g.idx(iw + 1, iv), w_up));
        out.push((g.idx(iw - 1, iv), w_dn));
        out.push((g.idx(iw, iv), stay.max(0.0)));
    }

    /// Nine-point stencil; returns `false` (leaving `out` empty) when some
    /// entry would be negative.
    fn simple_rho(&self, iw: usize, iv: usize, pi: f64, out: &mut Vec<(usize, f64)>) -> bool {
        let g = self.grid;
        let h = g.h;
        let f = self.vols[iv];
        let beta = self.factor.beta();
        let rho = self.factor.rho;
        let (fac, inv, cons) = self.drift_parts(iw, iv, pi);
        let qt = self.q_tilde;
        let cross = rho * pi * beta * f;
        let half_cross = 0.5 * cross.abs();
        let var_w = 0.5 * (f * pi) * (f * pi) - half_cross;
        let var_v = 0.5 * beta * beta - half_cross;
        if var_w < 0.0 || var_v < 0.0 {
            return false;
        }
        let v_up = (var_v + h * pos(fac)) / qt;
        let v_dn = (var_v + h * neg(fac)) / qt;
        let w_up = (var_w + h * pos(inv) + h * pos(cons)) / qt;
        let w_dn = (var_w + h * neg(inv) + h * neg(cons)) / qt;
        let diag = 0.5 * pos(cross) / qt;
        let anti = 0.5 * neg(cross) / qt;
        let stay = 1.0 - (v_up + v_dn + w_up + w_dn + 2.0 * diag + 2.0 * anti);
        if stay < -1e-14 {
            return false;
        }
        out.push((g.idx(iw, iv + 1), v_up));
        out.push((g.idx(iw, iv - 1), v_dn));
        out.push((g.idx(iw + 1, iv), w_up));
        out.push((g.idx(iw - 1, iv), w_dn));
        if diag > 0.0 {
            out.push((g.idx(iw + 1, iv + 1), diag));
            out.push((g.idx(iw - 1, iv - 1), diag));
        }
        if anti > 0.0 {
            out.push((g.idx(iw + 1, iv - 1), anti));
            out.push((g.idx(iw - 1, iv + 1), anti));
        }
        out.push((g.idx(iw, iv), stay.max(0.0)));
        true
    }

    /// Sum of a drift chain (`n2`, `Q2`), a degenerate noise chain along
    /// `(pi f, rho beta)` built by variance control (`n1`, `Q1`) and an
    /// axis-aligned factor noise chain with variance `(1 - rho^2) beta^2`:
    /// `p = (n1 + n3 + h n2) / (Q1 + Q3 + h Q2)`, `dt = h^2 / (Q1 + Q3 + h Q2)`.
    fn decomposed(&self, iw: usize, iv: usize, pi: f64, out: &mut Vec<(usize, f64)>) -> NodeInfo {
        let g = self.grid;
        let h = g.h;
        let f = self.vols[iv];
        let beta = self.factor.beta();
        let rho = self.factor.rho;
        let (fac, inv, cons) = self.drift_parts(iw, iv, pi);
        let mut clipped = false;
        let mut kind = NodeKind::Decomposed;
        let mut distortion = 0.0;
        // unnormalized weights; normalized at the end
        let mut push = |dw: i64, dv: i64, weight: f64, out: &mut Vec<(usize, f64)>| {
            if weight > 0.0 {
                let (t, c) = jump_target(g, iw, iv, dw, dv);
                clipped |= c;
                out.push((t, weight));
            }
        };

        // drift
        let q2 = fac.abs() + inv.abs() + cons.abs();
        push(0, 1, h * pos(fac), out);
        push(0, -1, h * neg(fac), out);
        push(1, 0, h * (pos(inv) + pos(cons)), out);
        push(-1, 0, h * (neg(inv) + neg(cons)), out);

        // uncorrelated part of the factor noise
        let var3 = beta * beta * (1.0 - rho * rho);
        push(0, 1, 0.5 * var3, out);
        push(0, -1, 0.5 * var3, out);

        // fully correlated noise (pi f, rho beta)
        let s1 = pi * f;
        let s2 = rho * beta;
        let q1 = if s2 == 0.0 {
            let v = s1 * s1;
            push(1, 0, 0.5 * v, out);
            push(-1, 0, 0.5 * v, out);
            v
        } else if s1 == 0.0 {
            let v = s2 * s2;
            push(0, 1, 0.5 * v, out);
            push(0, -1, 0.5 * v, out);
            v
        } else {
            // a lattice direction whose wealth jump leaves [0, c/r] would turn
            // the symmetric noise into a one-sided gamble, so drop the covariance there
            let fits = |k1: i64| {
                let t = iw as i64;
                t - k1.abs() >= 0 && t + k1.abs() < g.nw as i64
            };
            match variance_control_decompose(s1, s2, self.k2_min, self.k2_max) {
                Ok(Some(vc)) if fits(vc.k1) => {
                    distortion = vc.distortion();
                    let qq = vc.q * vc.q;
                    push(vc.k1, vc.k2, 0.5 * qq * (1.0 - vc.gamma), out);
                    push(-vc.k1, -vc.k2, 0.5 * qq * (1.0 - vc.gamma), out);
                    push(vc.k1, vc.k2 + 1, 0.5 * qq * vc.gamma, out);
                    push(-vc.k1, -vc.k2 - 1, 0.5 * qq * vc.gamma, out);
                    qq
                }
                _ => {
                    kind = NodeKind::CrossDropped;
                    push(1, 0, 0.5 * s1 * s1, out);
                    push(-1, 0, 0.5 * s1 * s1, out);
                    push(0, 1, 0.5 * s2 * s2, out);
                    push(0, -1, 0.5 * s2 * s2, out);
                    s1 * s1 + s2 * s2
                }
            }
        };
        let denom = q1 + var3 + h * q2;
        let total: f64 = out.iter().map(|e| e.1).sum();
        // total equals denom up to rounding; normalize by the sum for an exact simplex
        for e in out.iter_mut() {
            e.1 /= total;
        }
        debug_assert!((total - denom).abs() <= 1e-9 * denom.max(1e-300));
        NodeInfo {
            dt: h * h / denom,
            kind,
            distortion,
            clipped,
        }
    }
}

#[inline]
fn pos(a: f64) -> f64 {
    a.max(0.0)
}

#[inline]
fn neg(a: f64) -> f64 {
    (-a).max(0.0)
}

/// Target of a jump by `(dw, dv)` grid steps. Factor overshoot is mirrored;
/// wealth overshoot (never produced by the stencils) is clipped.
fn jump_target(g: &Grid2D, iw: usize, iv: usize, dw: i64, dv: i64) -> (usize, bool) {
    let tw = iw as i64 + dw;
    let tv = iv as i64 + dv;
    let last_w = g.nw as i64 - 1;
    let last_v = g.nv as i64 - 1;
    let mut clipped = false;
    let tw = if tw < 0 {
        clipped = true;
        0
    } else if tw > last_w {
        clipped = true;
        last_w
    } else {
        tw
    };
    let mut tv2 = tv;
    if tv2 < 0 {
        tv2 = -tv2;
        clipped = true;
    }
    if tv2 > last_v {
        tv2 = 2 * last_v - tv2;
        clipped = true;
    }
    let tv2 = tv2.clamp(0, last_v);
    (g.idx(tw as usize, tv2 as usize), clipped)
}

fn merge_duplicates(out: &mut Vec<(usize, f64)>) {
    if out.len() < 2 {
        return;
    }
    out.sort_unstable_by_key(|e| e.0);
    let mut k = 0;
    for i in 1..out.len() {
        if out[i].0 == out[k].0 {
            out[k].1 += out[i].1;
        } else {
            k += 1;
            out[k] = out[i];
        }
    }
    out.truncate(k + 1);
}

#[allow(clippy::too_many_arguments)]
fn local_q(
    g: &Grid2D,
    p: &MarketParams,
    f: &FactorSpec,
    vol: f64,
    iw: usize,
    iv: usize,
    pi: f64,
    construction: Construction,
) -> f64 {
    let h = g.h;
    let beta = f.beta();
    let w = g.w_nodes[iw];
    let y = g.v_nodes[iv];
    let mut q = (pi * vol).powi(2)
        + beta * beta
        + h * (f.alpha() * (f.m - y)).abs()
        + h * (p.excess_return() * pi).abs()
        + h * (p.r * w - p.c).abs();
    if construction == Construction::SimpleRho {
        q -= (f.rho * pi).abs() * beta * vol;
    }
    q
}

/// Global normalizer: the largest local `Q` over interior nodes with the
/// investment at 0, at `pi_cap`, or at the policy's own value.
pub fn q_tilde(
    g: &Grid2D,
    p: &MarketParams,
    f: &FactorSpec,
    pol: &PolicySurface,
    pi_cap: f64,
    construction: Construction,
) -> f64 {
    let mut best = 0.0f64;
    for iv in 1..g.nv.saturating_sub(1) {
        let vol = f.vol(g.v_nodes[iv]);
        for iw in 1..g.nw - 1 {
            for pi in [0.0, pi_cap, pol.get(iw, iv)] {
                best = best.max(local_q(g, p, f, vol, iw, iv, pi, construction));
            }
        }
    }
    best.max(f64::MIN_POSITIVE)
}

/// Summary counts over a transition model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TransitionStats {
    pub simple_nodes: usize,
    pub fallback_nodes: usize,
    pub cross_dropped_nodes: usize,
    pub clipped_nodes: usize,
    pub max_distortion: f64,
    pub dt_min: f64,
    pub dt_max: f64,
}

/// Transition probabilities and interpolation intervals for every node.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub construction: Construction,
    pub q_tilde: f64,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
    pub dt: Vec<f64>,
    pub kinds: Vec<NodeKind>,
    pub distortion: Vec<f64>,
    pub clipped: Vec<bool>,
    pub stats: TransitionStats,
}

impl TransitionModel {
    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    pub fn row(&self, idx: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[idx]..self.offsets[idx + 1]]
    }

    /// Exhaustive simplex and interval check.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            let row = self.row(i);
            let mut sum = 0.0;
            for &(_, pr) in row {
                if !(0.0..=1.0).contains(&pr) {
                    return Err(RuinError::Grid(format!("node {i}: probability {pr}")));
                }
                sum += pr;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(RuinError::Grid(format!(
                    "node {i}: probabilities sum to {sum}"
                )));
            }
            if !(self.dt[i] > 0.0) || !self.dt[i].is_finite() {
                return Err(RuinError::Grid(format!("node {i}: dt = {}", self.dt[i])));
            }
        }
        Ok(())
    }
}

/// Builds the transition model for `pol` with the given stencil.
pub fn build_transitions(stencil: &Stencil<'_>, pol: &PolicySurface) -> Result<TransitionModel> {
    let g = stencil.grid;
    pol.check_shape(g, "policy")?;
    let rows: Vec<(Vec<(usize, f64)>, NodeInfo)> = (0..g.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let (iw, iv) = g.coords(idx);
            let info = stencil.node_into(iw, iv, pol.values[idx], buf);
            (buf.clone(), info)
        })
        .collect();
    let mut offsets = Vec::with_capacity(g.len() + 1);
    let mut entries = Vec::with_capacity(rows.iter().map(|r| r.0.len()).sum());
    let mut dt = Vec::with_capacity(g.len());
    let mut kinds = Vec::with_capacity(g.len());
    let mut distortion = Vec::with_capacity(g.len());
    let mut clipped = Vec::with_capacity(g.len());
    let mut stats = TransitionStats {
        dt_min: f64::INFINITY,
        ..Default::default()
    };
    offsets.push(0);
    for (row, info) in rows {
        entries.extend_from_slice(&row);
        offsets.push(entries.len());
        dt.push(info.dt);
        kinds.push(info.kind);
        distortion.push(info.distortion);
        clipped.push(info.clipped);
        match info.kind {
            NodeKind::Simple => stats.simple_nodes += 1,
            NodeKind::Decomposed => stats.fallback_nodes += 1,
            NodeKind::CrossDropped => {
                stats.fallback_nodes += 1;
                stats.cross_dropped_nodes += 1;
            }
            _ => {}
        }
        if info.clipped {
            stats.clipped_nodes += 1;
        }
        stats.max_distortion = stats.max_distortion.max(info.distortion);
        stats.dt_min = stats.dt_min.min(info.dt);
        stats.dt_max = stats.dt_max.max(info.dt);
    }
    Ok(TransitionModel {
        construction: stencil.construction,
        q_tilde: stencil.q_tilde,
        offsets,
        entries,
        dt,
        kinds,
        distortion,
        clipped,
        stats,
    })
}

/// Settings shared by the solver entry points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Sup-norm tolerance of the iterative linear solver.
    pub tol_value: f64,
    /// Outer stopping threshold on the sup-norm value change.
    pub tol_policy: f64,
    pub max_outer: usize,
    pub k2_min: usize,
    pub k2_max: usize,
    /// Upper bound on investment; `None` picks a default from the grid.
    pub pi_cap: Option<f64>,
    pub improvement: ImprovementRule,
    pub linear: LinearSolver,
    /// Force a construction instead of choosing by correlation.
    pub construction: Option<Construction>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_value: 1e-9,
            tol_policy: 1e-6,
            max_outer: 200,
            k2_min: 10,
            k2_max: 40,
            pi_cap: None,
            improvement: ImprovementRule::Safeguarded,
            linear: LinearSolver::SparseDirect,
            construction: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_value > 0.0) || !(self.tol_policy > 0.0) {
            return Err(invalid("tolerance", "tolerances must be positive"));
        }
        if self.max_outer == 0 {
            return Err(invalid("max_outer", "must be at least 1"));
        }
        if self.k2_min == 0 || self.k2_max < self.k2_min {
            return Err(invalid(
                "k2_min",
                format!(
                    "need 1 <= k2_min <= k2_max, got {}, {}",
                    self.k2_min, self.k2_max
                ),
            ));
        }
        if let Some(cap) = self.pi_cap {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(invalid("pi_cap", format!("must be positive, got {cap}")));
            }
        }
        Ok(())
    }

    fn construction_for(&self, f: &FactorSpec) -> Construction {
        self.construction.unwrap_or(if f.rho == 0.0 {
            Construction::SimpleRho0
        } else {
            Construction::SimpleRho
        })
    }
}

/// Policy update used between value determinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementRule {
    /// Closed-form finite-difference update only.
    Printed,
    /// Minimizes the one-step discounted expectation over the finite-difference
    /// candidate, the current value and a scan of `[0, pi_cap]`.
    Safeguarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    SparseDirect,
    GaussSeidel,
}

/// Default investment cap: three times the largest of the constant-volatility
/// optimum `pi_tilde(w; f(v))` and the myopic rule
/// `(mu - r)/f(v)^2 (c - r w)/((p(sigma_*) - 1) r)` over the grid.
pub fn default_pi_cap(g: &Grid2D, p: &MarketParams, f: &FactorSpec) -> Result<f64> {
    let sigma_star = harmonic_avg_vol(f)?;
    let p_star = p.exponent_p(sigma_star)?;
    let mut best = 0.0f64;
    for &v in &g.v_nodes {
        let vol = f.vol(v);
        let pt = p.pi_tilde(0.0, vol)?;
        let pc = p.pi_tilde_with_p(0.0, vol, p_star);
        best = best.max(pt).max(pc);
    }
    Ok(3.0 * best)
}

/// Initial policy `pi_tilde(w; f(v))` at every node.
pub fn initial_policy(g: &Grid2D, p: &MarketParams, f: &FactorSpec) -> Result<PolicySurface> {
    let mut s = Surface::zeros(g);
    for iv in 0..g.nv {
        let vol = f.vol(g.v_nodes[iv]);
        for iw in 0..g.nw {
            s.values[g.idx(iw, iv)] = p.pi_tilde(g.w_nodes[iw], vol)?;
        }
    }
    Ok(s)
}

/// Value of the chain: `V = e^{-lambda dt} P V` with `V = 1` at `w = 0` and
/// `V = 0` at `w = c/r`. Returns the surface and the linear residual.
pub fn value_determination(
    tm: &TransitionModel,
    g: &Grid2D,
    p: &MarketParams,
    opts: &SolverOptions,
    warm: Option<&ValueSurface>,
) -> Result<(ValueSurface, f64)> {
    if tm.len() != g.len() {
        return Err(RuinError::Grid(
            "transition model does not match grid".into(),
        ));
    }
    let inner = g.nw - 2;
    let unknown = |iw: usize, iv: usize| iv * inner + (iw - 1);
    let mut rows = Vec::with_capacity(inner * g.nv);
    let mut rhs = Vec::with_capacity(inner * g.nv);
    for iv in 0..g.nv {
        for iw in 1..g.nw - 1 {
            let idx = g.idx(iw, iv);
            let disc = (-p.lambda * tm.dt[idx]).exp();
            let mut row = Vec::with_capacity(tm.row(idx).len());
            let mut b = 0.0;
            for &(t, pr) in tm.row(idx) {
                let (tw, tv) = g.coords(t);
                if tw == 0 {
                    b += disc * pr;
                } else if tw + 1 == g.nw {
                    // zero boundary value
                } else {
                    row.push((unknown(tw, tv), disc * pr));
                }
            }
            rows.push(row);
            rhs.push(b);
        }
    }
    let sys = LinearSystem::new(rows, rhs)?;
    let x = match opts.linear {
        LinearSolver::SparseDirect => solve_sparse_direct(&sys)?,
        LinearSolver::GaussSeidel => {
            let init: Vec<f64> = match warm {
                Some(w) => (0..g.nv)
                    .flat_map(|iv| (1..g.nw - 1).map(move |iw| (iw, iv)))
                    .map(|(iw, iv)| w.get(iw, iv))
                    .collect(),
                None => vec![0.0; sys.dimension],
            };
            solve_linear_fixed_point(&sys, &init, opts.tol_value, 200_000)?
        }
    };
    let residual = sys.residual(&x);
    let mut v = Surface::zeros(g);
    for iv in 0..g.nv {
        v.values[g.idx(0, iv)] = 1.0;
        for iw in 1..g.nw - 1 {
            v.values[g.idx(iw, iv)] = x[unknown(iw, iv)].clamp(0.0, 1.0);
        }
    }
    Ok((v, residual))
}

/// The closed-form finite-difference policy update. Nodes whose wealth
/// second difference is below `1e-12` keep the current value; results are
/// clamped to `[0, pi_cap]`.
pub fn policy_improvement_printed(
    v: &ValueSurface,
    current: &PolicySurface,
    g: &Grid2D,
    p: &MarketParams,
    f: &FactorSpec,
    pi_cap: f64,
) -> PolicySurface {
    let mut out = current.clone();
    for iv in 0..g.nv {
        for iw in 0..g.nw {
            let idx = g.idx(iw, iv);
            out.values[idx] = printed_update(v, g, p, f, iw, iv)
                .map(|pi| pi.clamp(0.0, pi_cap))
                .unwrap_or(current.values[idx]);
        }
    }
    out
}

/// Finite-difference candidate at a node, `None` where the update is skipped.
fn printed_update(
    v: &ValueSurface,
    g: &Grid2D,
    p: &MarketParams,
    f: &FactorSpec,
    iw: usize,
    iv: usize,
) -> Option<f64> {
    if iw + 1 == g.nw {
        return Some(0.0);
    }
    if g.nw < 4 || g.nv < 3 {
        return None;
    }
    let h = g.h;
    let vol = f.vol(g.v_nodes[iv]);
    // rows used for the cross difference
    let cv = iv.clamp(1, g.nv - 2);
    let x = |dw: usize, row: usize| v.get(iw + dw, row);
    let cross = x(1, cv + 1) + x(0, cv - 1) - x(1, cv - 1) - x(0, cv + 1);
    let num = h * p.excess_return() * (x(1, iv) - x(0, iv)) + 0.5 * f.beta() * f.rho * vol * cross;
    let second = if iw == 0 {
        2.0 * v.get(0, iv) - 5.0 * v.get(1, iv) + 4.0 * v.get(2, iv) - v.get(3, iv)
    } else {
        v.get(iw + 1, iv) + v.get(iw - 1, iv) - 2.0 * v.get(iw, iv)
    };
    if second.abs() < 1e-12 {
        return None;
    }
    let pi = -num / (vol * vol * second);
    pi.is_finite().then_some(pi)
}

/// Number of uniform points scanned by the safeguarded update.
const SCAN_POINTS: usize = 48;

/// Discounted one-step expectation `e^{-lambda dt} sum p V` at a node.
fn bellman(
    stencil: &Stencil<'_>,
    v: &ValueSurface,
    lambda: f64,
    iw: usize,
    iv: usize,
    pi: f64,
    buf: &mut Vec<(usize, f64)>,
) -> f64 {
    let info = stencil.node_into(iw, iv, pi, buf);
    let ev: f64 = buf.iter().map(|&(t, pr)| pr * v.values[t]).sum();
    (-lambda * info.dt).exp() * ev
}

/// Safeguarded update: at interior nodes pick the investment in `[0, pi_cap]`
/// minimizing the discounted one-step expectation, starting from the current
/// value and the finite-difference candidate. Boundary rows and the `w = 0`
/// column, whose transitions do not depend on the investment, use the
/// finite-difference update.
pub fn policy_improvement_safeguarded(
    v: &ValueSurface,
    current: &PolicySurface,
    stencil: &Stencil<'_>,
    pi_cap: f64,
) -> PolicySurface {
    let g = stencil.grid;
    let p = stencil.market;
    let f = stencil.factor;
    let lambda = p.lambda;
    let values: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let (iw, iv) = g.coords(idx);
            let cur = current.values[idx];
            let printed = printed_update(v, g, p, f, iw, iv).map(|pi| pi.clamp(0.0, pi_cap));
            if g.is_absorbing(iw) || g.is_reflecting(iv) {
                return printed.unwrap_or(cur);
            }
            let mut cost = |pi: f64| bellman(stencil, v, lambda, iw, iv, pi, buf);
            let cur_cost = cost(cur);
            let mut best = (cur, cur_cost);
            let consider = |pi: f64, c: f64, best: &mut (f64, f64)| {
                if c < best.1 {
                    *best = (pi, c);
                }
            };
            if let Some(pi) = printed {
                let c = cost(pi);
                consider(pi, c, &mut best);
            }
            let step = pi_cap / (SCAN_POINTS - 1) as f64;
            let mut scan_best = (0.0, f64::INFINITY);
            for k in 0..SCAN_POINTS {
                let pi = k as f64 * step;
                let c = cost(pi);
                if c < scan_best.1 {
                    scan_best = (pi, c);
                }
            }
            consider(scan_best.0, scan_best.1, &mut best);
            // golden-section refinement around the best point found so far
            let centre = best.0;
            let (mut a, mut b) = ((centre - step).max(0.0), (centre + step).min(pi_cap));
            let ratio = 0.5 * (5f64.sqrt() - 1.0);
            let mut x1 = b - ratio * (b - a);
            let mut x2 = a + ratio * (b - a);
            let mut f1 = cost(x1);
            let mut f2 = cost(x2);
            for _ in 0..48 {
                if f1 <= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - ratio * (b - a);
                    f1 = cost(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + ratio * (b - a);
                    f2 = cost(x2);
                }
            }
            consider(x1, f1, &mut best);
            consider(x2, f2, &mut best);
            // only move for a genuine decrease, so that iteration terminates
            if best.1 < cur_cost - 1e-15 * cur_cost.abs().max(1e-300) {
                best.0
            } else {
                cur
            }
        })
        .collect();
    Surface {
        nw: g.nw,
        nv: g.nv,
        values,
    }
}

/// Output of a policy-iteration run.
#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub value: ValueSurface,
    /// The policy whose value is `value`.
    pub policy: PolicySurface,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm value change per outer iteration.
    pub changes: Vec<f64>,
    /// Linear residual of the last value determination.
    pub residual: f64,
    pub pi_cap: f64,
    pub q_tilde: f64,
    pub dt_global: f64,
    pub stats: TransitionStats,
    pub construction: Construction,
}

/// Evaluates a fixed policy: one transition build and one linear solve.
pub fn evaluate_policy(
    g: &Grid2D,
    p: &MarketParams,
    f: &FactorSpec,
    pol: &PolicySurface,
    opts: &SolverOptions,
) -> Result<(ValueSurface, TransitionModel, f64)> {
    opts.validate()?;
    pol.check_shape(g, "policy")?;
    let cap = match opts.pi_cap {
        Some(c) => c,
        None => default_pi_cap(g, p, f)?,
    };
    let construction = opts.construction_for(f);
    let qt = q_tilde(g, p, f, pol, cap, construction);
    let stencil = Stencil::new(g, p, f, construction, qt, opts.k2_min, opts.k2_max)?;
    let tm = build_transitions(&stencil, pol)?;
    let (v, res) = value_determination(&tm, g, p, opts, None)?;
    Ok((v, tm, res))
}

/// Policy iteration from `init` (or the default initial policy).
///
/// With a correlated factor and no explicit initial policy, the uncorrelated
/// problem is solved first and its optimal policy is used as the start.
pub fn solve(
    p: &MarketParams,
    f: &FactorSpec,
    g: &Grid2D,
    init: Option<&PolicySurface>,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    f.validate()?;
    let cap = match opts.pi_cap {
        Some(c) => c,
        None => default_pi_cap(g, p, f)?,
    };
    let mut pol = match init {
        Some(pol) => {
            pol.check_shape(g, "initial policy")?;
            pol.clone()
        }
        None if f.rho != 0.0 => {
            let f0 = f.with_rho(0.0)?;
            let mut o0 = *opts;
            o0.pi_cap = Some(cap);
            o0.construction = None;
            let warm = solve(p, &f0, g, None, &o0)?;
            log::info!(
                "uncorrelated warm start: {} iterations, converged = {}",
                warm.iterations,
                warm.converged
            );
            warm.policy
        }
        None => initial_policy(g, p, f)?,
    };
    for x in pol.values.iter_mut() {
        *x = x.clamp(0.0, cap);
    }

    let construction = opts.construction_for(f);
    let mut changes = Vec::new();
    let mut prev: Option<ValueSurface> = None;
    let mut converged = false;
    let mut last = None;
    for iter in 0..opts.max_outer {
        let qt = q_tilde(g, p, f, &pol, cap, construction);
        let stencil = Stencil::new(g, p, f, construction, qt, opts.k2_min, opts.k2_max)?;
        let tm = build_transitions(&stencil, &pol)?;
        let (v, residual) = value_determination(&tm, g, p, opts, prev.as_ref())?;
        let change = prev
            .as_ref()
            .map_or(f64::INFINITY, |pv| pv.sup_distance(&v));
        changes.push(change);
        log::debug!("outer iteration {iter}: change {change:e}, residual {residual:e}");
        let next = match opts.improvement {
            ImprovementRule::Printed => policy_improvement_printed(&v, &pol, g, p, f, cap),
            ImprovementRule::Safeguarded => policy_improvement_safeguarded(&v, &pol, &stencil, cap),
        };
        let unchanged = next.values == pol.values;
        last = Some((
            v.clone(),
            pol.clone(),
            residual,
            qt,
            stencil.dt_global(),
            tm.stats,
        ));
        if change < opts.tol_policy || unchanged {
            converged = true;
            break;
        }
        prev = Some(v);
        pol = next;
    }
    let (value, policy, residual, qt, dt, stats) =
        last.ok_or_else(|| RuinError::Grid("no iterations performed".into()))?;
    if !converged {
        log::warn!(
            "policy iteration stopped after {} iterations without meeting tolerance {}",
            opts.max_outer,
            opts.tol_policy
        );
    }
    Ok(SolveResult {
        value,
        policy,
        iterations: changes.len(),
        converged,
        changes,
        residual,
        pi_cap: cap,
        q_tilde: qt,
        dt_global: dt,
        stats,
        construction,
    })
}
