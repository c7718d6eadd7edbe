//! Dual (Legendre-transform) asymptotic expansion of the minimum ruin
//! probability for a fast or a slow volatility factor.
//!
//! In the dual variable `x` the approximation reads
//! `psi_hat = psi_hat_00 + sqrt(eps) psi_hat_01 + sqrt(delta) psi_hat_10`,
//! with the free boundaries frozen at their leading-order values `0` and `x0`.
//! The primal ruin probability follows from `w = psi_hat_x(x*)`,
//! `psi(w) = psi_hat(x*) - x* w`.

use crate::error::{Result, RuinError};
use crate::model::{harmonic_avg_vol, FactorKind, FactorSpec, MarketParams};
use crate::numerics::{
    find_root_monotone, poisson_corrector_etay, EtaY, QuadratureRule, DEFAULT_QUADRATURE_ORDER,
};

/// Relative step of the finite-difference cross-check on `B1'(z)`.
const B1_FD_STEP: f64 = 1e-5;

/// Left edge of the inversion bracket, relative to `x0`. Roots shrink like
/// `(1 - r w / c)^(1/(B1 - 1))`, so the edge has to be tiny to resolve wealth
/// close to the safe level.
const LEFT_EDGE: f64 = 1e-280;

/// Coefficients of the dual expansion at one value of the factor.
#[derive(Debug, Clone)]
pub struct DualCoefficients {
    pub z: f64,
    pub sigma_star: f64,
    pub s: f64,
    pub b1: f64,
    pub b2: f64,
    /// `psi_hat_00 = d1 x^B1 + (c/r) x`
    pub d1: f64,
    /// Right free boundary `B1/(B1-1) * r/c`.
    pub x0: f64,
    pub a: f64,
    pub a1: f64,
    pub a2: f64,
    pub h1: f64,
    pub h2: f64,
    /// `dB1/dz`; zero for a fast factor.
    pub b1_prime: f64,
    market: MarketParams,
    factor: FactorSpec,
    eta: Option<EtaY>,
}

/// `(2 B1 - 1) s - (r - lambda)`, the derivative of the characteristic
/// quadratic at `B1`.
fn char_slope(p: &MarketParams, b1: f64, s: f64) -> f64 {
    (2.0 * b1 - 1.0) * s - (p.r - p.lambda)
}

fn slow_sharpe(p: &MarketParams, f: &FactorSpec, z: f64) -> f64 {
    let sigma = f.vol(z);
    0.5 * (p.excess_return() / sigma).powi(2)
}

/// `dB1/dz` by central differences in the factor.
fn b1_prime_numeric(p: &MarketParams, f: &FactorSpec, z: f64) -> f64 {
    let step = B1_FD_STEP * f.scale;
    let up = p.exponents_b_from_s(slow_sharpe(p, f, z + step)).0;
    let dn = p.exponents_b_from_s(slow_sharpe(p, f, z - step)).0;
    (up - dn) / (2.0 * step)
}

/// Builds the expansion coefficients at factor value `z`.
///
/// For a fast factor `z` is irrelevant (the averaged problem sees the harmonic
/// average volatility) and only `A` is nonzero. For a slow factor the
/// coefficients are local in `z` and only `A1`, `A2` are nonzero.
pub fn build_coefficients(p: &MarketParams, f: &FactorSpec, z: f64) -> Result<DualCoefficients> {
    f.validate()?;
    if !z.is_finite() {
        return Err(RuinError::NonFinite("factor value z".into()));
    }
    let cr = p.safe_level();
    let (sigma_star, s) = match f.kind {
        FactorKind::Fast => {
            let sig = harmonic_avg_vol(f)?;
            (sig, p.sharpe_s(sig)?)
        }
        FactorKind::Slow => {
            let sig = f.vol(z);
            (sig, p.sharpe_s(sig)?)
        }
    };
    let (b1, b2) = p.exponents_b_from_s(s);
    let k = (b1 - 1.0) / b1 * cr;
    let x0 = 1.0 / k;
    let d1 = -k.powf(b1) / (b1 - 1.0);
    let dn = char_slope(p, b1, s);

    let mut co = DualCoefficients {
        z,
        sigma_star,
        s,
        b1,
        b2,
        d1,
        x0,
        a: 0.0,
        a1: 0.0,
        a2: 0.0,
        h1: 0.0,
        h2: 0.0,
        b1_prime: 0.0,
        market: *p,
        factor: *f,
        eta: None,
    };

    match f.kind {
        FactorKind::Fast => {
            let excess = p.excess_return();
            let rule = QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_ORDER)?;
            let bracket = rule.average(
                |y| {
                    let v = f.vol(y);
                    f.inv_vol_antiderivative(y) * (0.5 * (excess / v).powi(2) - s)
                },
                f.m,
                f.nu,
            )?;
            co.a = f.rho * excess * std::f64::consts::SQRT_2 / f.nu
                * d1
                * b1
                * b1
                * (b1 - 1.0)
                * bracket
                / dn;
            co.eta = Some(poisson_corrector_etay(p, f, s)?);
        }
        FactorKind::Slow => {
            let b1_prime = match f.log_vol_slope() {
                // s = 0.5 (mu - r)^2 / f^2, so s' = -2 s (ln f)'
                Some(slope) => -(-2.0 * s * slope) * b1 * (b1 - 1.0) / dn,
                None => b1_prime_numeric(p, f, z),
            };
            let check = b1_prime_numeric(p, f, z);
            if (check - b1_prime).abs() > 1e-5 * b1_prime.abs().max(1e-8) {
                log::warn!("B1' closed form {b1_prime} disagrees with finite difference {check}");
            }
            co.b1_prime = b1_prime;
            let mean_ratio = p.excess_return() / sigma_star;
            let kk = -f.rho * f.slow_diffusion() * mean_ratio * b1_prime / (b1 - 1.0) * k.powf(b1);
            co.h1 = kk * (1.0 + b1 * k.ln());
            co.h2 = kk * b1;
            co.a1 = co.h1 / dn - co.h2 * s / (dn * dn);
            co.a2 = 0.5 * co.h2 / dn;
        }
    }
    for (name, v) in [
        ("B1", co.b1),
        ("D1", co.d1),
        ("x0", co.x0),
        ("A", co.a),
        ("A1", co.a1),
        ("A2", co.a2),
    ] {
        if !v.is_finite() {
            return Err(RuinError::NonFinite(format!("dual coefficient {name}")));
        }
    }
    Ok(co)
}

impl DualCoefficients {
    pub fn market(&self) -> &MarketParams {
        &self.market
    }

    pub fn factor(&self) -> &FactorSpec {
        &self.factor
    }

    /// `(B1 - 1)/B1 * c/r`, the reciprocal of `x0`.
    fn k(&self) -> f64 {
        1.0 / self.x0
    }

    /// `eta_y(y)` of the fast corrector, zero when not applicable.
    pub fn eta_y(&self, y: f64) -> f64 {
        self.eta.as_ref().map_or(0.0, |e| e.eval(y))
    }
}

/// Value and first two `x`-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub v: f64,
    pub dx: f64,
    pub dxx: f64,
}

impl Jet {
    fn axpy(self, a: f64, o: Jet) -> Jet {
        Jet {
            v: self.v + a * o.v,
            dx: self.dx + a * o.dx,
            dxx: self.dxx + a * o.dxx,
        }
    }
}

/// Jet of `x^B q(ln x)` given `q`, `q'`, `q''` at `ln x`.
fn power_log_jet(x: f64, b: f64, q: f64, q1: f64, q2: f64) -> Jet {
    let xb = x.powf(b);
    Jet {
        v: xb * q,
        dx: xb / x * (b * q + q1),
        dxx: xb / (x * x) * (b * (b - 1.0) * q + (2.0 * b - 1.0) * q1 + q2),
    }
}

/// Leading-order dual function and its derivatives.
pub fn psi_hat_00_jet(x: f64, co: &DualCoefficients) -> Jet {
    let cr = co.market.safe_level();
    let kx = co.k() * x;
    let b = co.b1;
    Jet {
        v: co.d1 * x.powf(b) + cr * x,
        dx: cr * (1.0 - kx.powf(b - 1.0)),
        dxx: -cr * (b - 1.0) * co.k() * kx.powf(b - 2.0),
    }
}

/// `A x^B1 ln(x / x0)`.
pub fn psi_hat_01_jet(x: f64, co: &DualCoefficients) -> Jet {
    let q = co.a * (x * co.k()).ln();
    power_log_jet(x, co.b1, q, co.a, 0.0)
}

/// `x^B1 ln(x / x0) [A1 + A2 ln(x x0)]`.
pub fn psi_hat_10_jet(x: f64, co: &DualCoefficients) -> Jet {
    let l = x.ln();
    let l0 = co.x0.ln();
    let q = co.a1 * (l - l0) + co.a2 * (l * l - l0 * l0);
    let q1 = co.a1 + 2.0 * co.a2 * l;
    let q2 = 2.0 * co.a2;
    power_log_jet(x, co.b1, q, q1, q2)
}

/// Jet of the combined dual approximation.
pub fn psi_hat_combined_jet(x: f64, co: &DualCoefficients, eps: f64, delta: f64) -> Jet {
    let mut j = psi_hat_00_jet(x, co);
    if eps > 0.0 && co.a != 0.0 {
        j = j.axpy(eps.sqrt(), psi_hat_01_jet(x, co));
    }
    if delta > 0.0 && (co.a1 != 0.0 || co.a2 != 0.0) {
        j = j.axpy(delta.sqrt(), psi_hat_10_jet(x, co));
    }
    j
}

pub fn psi_hat_00(x: f64, co: &DualCoefficients) -> f64 {
    psi_hat_00_jet(x, co).v
}

pub fn psi_hat_01(x: f64, co: &DualCoefficients) -> f64 {
    psi_hat_01_jet(x, co).v
}

pub fn psi_hat_10(x: f64, co: &DualCoefficients) -> f64 {
    psi_hat_10_jet(x, co).v
}

pub fn psi_hat_combined(x: f64, co: &DualCoefficients, eps: f64, delta: f64) -> f64 {
    psi_hat_combined_jet(x, co, eps, delta).v
}

/// Mixed derivative `d^2 psi_hat_00 / dx dz` of the slow expansion.
pub fn psi_hat_00_xz(x: f64, co: &DualCoefficients) -> f64 {
    let kx = co.k() * x;
    -co.market.safe_level() * co.b1_prime * kx.powf(co.b1 - 1.0) * (kx.ln() + 1.0 / co.b1)
}

/// `d^2 psi_hat_02 / dx dy = -D1 B1^2 (B1 - 1) x^(B1-1) eta_y(y)`.
pub fn psi_hat_02_xy(x: f64, y: f64, co: &DualCoefficients) -> f64 {
    -co.d1 * co.b1 * co.b1 * (co.b1 - 1.0) * x.powf(co.b1 - 1.0) * co.eta_y(y)
}

/// Dual investment strategy at dual point `x` and fast-factor value `y`.
/// For a slow factor the volatility is taken at the coefficient's `z` and `y`
/// is ignored.
pub fn pi_hat_combined(x: f64, y: f64, co: &DualCoefficients, eps: f64, delta: f64) -> f64 {
    let f = &co.factor;
    let vol = match f.kind {
        FactorKind::Fast => f.vol(y),
        FactorKind::Slow => f.vol(co.z),
    };
    let excess = co.market.excess_return();
    let lead = -excess / (vol * vol) * x;
    let mut pi = lead * psi_hat_00_jet(x, co).dxx;
    if eps > 0.0 {
        let mut fast = lead * psi_hat_01_jet(x, co).dxx;
        if f.rho != 0.0 {
            fast += f.rho * f.nu * std::f64::consts::SQRT_2 / vol * psi_hat_02_xy(x, y, co);
        }
        pi += eps.sqrt() * fast;
    }
    if delta > 0.0 {
        let slow = lead * psi_hat_10_jet(x, co).dxx
            + f.rho * f.slow_diffusion() / vol * psi_hat_00_xz(x, co);
        pi += delta.sqrt() * slow;
    }
    pi
}

/// Result of inverting the Legendre transform at one wealth level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    /// Primal value, clamped to `[0, 1]`.
    pub psi: f64,
    /// Primal value before clamping.
    pub psi_raw: f64,
    pub x_star: f64,
    /// `psi_hat_x(x0) > w`: no root below `x0`, pinned at `x0`.
    pub pinned_right: bool,
    /// `psi_hat_x` at the left edge is below `w`: pinned at the left edge.
    pub pinned_left: bool,
}

impl Inversion {
    pub fn clamped(&self) -> bool {
        self.psi != self.psi_raw
    }

    pub fn bracket_failed(&self) -> bool {
        self.pinned_left || self.pinned_right
    }
}

/// Solves `w = psi_hat_x(x*)` on `(1e-280 x0, x0]` and returns
/// `psi = psi_hat(x*) - x* w`.
pub fn legendre_invert(w: f64, co: &DualCoefficients, eps: f64, delta: f64) -> Result<Inversion> {
    co.market.check_wealth(w)?;
    if !(eps >= 0.0) || !(delta >= 0.0) {
        return Err(RuinError::Domain {
            what: "eps/delta",
            value: eps.min(delta),
            domain: "[0, inf)".into(),
        });
    }
    let lo = LEFT_EDGE * co.x0;
    let hi = co.x0;
    let slope = |x: f64| psi_hat_combined_jet(x, co, eps, delta).dx - w;
    let s_hi = slope(hi);
    let s_lo = slope(lo);
    let (x_star, pinned_left, pinned_right) = if s_hi >= 0.0 {
        (hi, false, s_hi > 0.0)
    } else if s_lo <= 0.0 {
        (lo, s_lo < 0.0, false)
    } else {
        // bisect in ln x so that small roots keep full relative accuracy
        let u = find_root_monotone(|u| slope(u.exp()), lo.ln(), hi.ln(), 1e-13)?;
        (u.exp().clamp(lo, hi), false, false)
    };
    let psi_raw = psi_hat_combined(x_star, co, eps, delta) - x_star * w;
    if !psi_raw.is_finite() {
        return Err(RuinError::NonFinite(format!("dual inversion at w = {w}")));
    }
    if pinned_left || pinned_right {
        log::debug!(
            "Legendre inversion pinned at {} edge for w = {w}",
            if pinned_left { "left" } else { "right" }
        );
    }
    Ok(Inversion {
        psi: psi_raw.clamp(0.0, 1.0),
        psi_raw,
        x_star,
        pinned_left,
        pinned_right,
    })
}

/// Approximate optimal investment at wealth `w` and fast-factor value `y`,
/// using coefficients built at the slow value.
pub fn pi_approx(w: f64, y: f64, co: &DualCoefficients, eps: f64, delta: f64) -> Result<f64> {
    if w >= co.market.safe_level() {
        co.market.check_wealth(w)?;
        return Ok(0.0);
    }
    let inv = legendre_invert(w, co, eps, delta)?;
    Ok(pi_hat_combined(inv.x_star, y, co, eps, delta))
}
