//! Market and volatility-factor parameters, plus the constant-volatility closed
//! forms that serve as baselines and building blocks for both solvers.
//!
//! Wealth follows `dW = (rW + (mu - r) pi - c) dt + f(V) pi dB`, where `V` is a
//! single Ornstein-Uhlenbeck volatility factor. Ruin is wealth reaching zero
//! before an independent exponential death time with rate `lambda`. Above the
//! safe level `c / r` ruin is impossible, so everything lives on `[0, c / r]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RuinError};
use crate::numerics::{QuadratureRule, DEFAULT_QUADRATURE_ORDER};

/// Riskless rate, risky drift, consumption rate and hazard rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarketParams {
    pub r: f64,
    pub mu: f64,
    pub c: f64,
    pub lambda: f64,
}

impl MarketParams {
    pub fn new(r: f64, mu: f64, c: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [("r", r), ("mu", mu), ("c", c), ("lambda", lambda)] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if r <= 0.0 {
            return Err(invalid("r", format!("must be positive, got {r}")));
        }
        if mu <= r {
            return Err(invalid("mu", format!("must exceed r = {r}, got {mu}")));
        }
        if c <= 0.0 {
            return Err(invalid("c", format!("must be positive, got {c}")));
        }
        if lambda <= 0.0 {
            return Err(invalid("lambda", format!("must be positive, got {lambda}")));
        }
        Ok(Self { r, mu, c, lambda })
    }

    /// The parameter set used throughout the numerical experiments:
    /// r = 0.02, mu = 0.1, c = 0.1, lambda = 0.04.
    pub fn reference() -> Self {
        Self {
            r: 0.02,
            mu: 0.1,
            c: 0.1,
            lambda: 0.04,
        }
    }

    /// Wealth `c / r` at which riskless income covers consumption.
    pub fn safe_level(&self) -> f64 {
        self.c / self.r
    }

    pub fn excess_return(&self) -> f64 {
        self.mu - self.r
    }

    /// `s = 0.5 ((mu - r) / sigma)^2`.
    pub fn sharpe_s(&self, sigma: f64) -> Result<f64> {
        half_sharpe_squared(self.excess_return(), sigma)
    }

    /// Ruin exponent `p(sigma) > 1` of the constant-volatility problem.
    pub fn exponent_p(&self, sigma: f64) -> Result<f64> {
        let s = self.sharpe_s(sigma)?;
        Ok(self.exponent_p_from_s(s))
    }

    pub(crate) fn exponent_p_from_s(&self, s: f64) -> f64 {
        let (r, lambda) = (self.r, self.lambda);
        let b = r + lambda + s;
        let disc = (b * b - 4.0 * r * lambda).max(0.0);
        let root = disc.sqrt();
        // larger root of r p^2 - b p + lambda; b > 0 so no cancellation
        (b + root) / (2.0 * r)
    }

    /// Roots `(B1, B2)` of `s B^2 - (r - lambda + s) B - lambda = 0`, with
    /// `B1 > 1` and `B2 < 0`.
    pub fn exponents_b(&self, sigma_star: f64) -> Result<(f64, f64)> {
        let s = self.sharpe_s(sigma_star)?;
        if s <= 0.0 {
            return Err(invalid("sigma_star", "s must be positive"));
        }
        Ok(self.exponents_b_from_s(s))
    }

    pub(crate) fn exponents_b_from_s(&self, s: f64) -> (f64, f64) {
        let b = self.r - self.lambda + s;
        let root = (b * b + 4.0 * self.lambda * s).sqrt();
        // pick the cancellation-free root first, recover the other from the product -lambda/s
        if b >= 0.0 {
            let b1 = (b + root) / (2.0 * s);
            (b1, -self.lambda / (s * b1))
        } else {
            let b2 = (b - root) / (2.0 * s);
            (-self.lambda / (s * b2), b2)
        }
    }

    pub(crate) fn check_wealth(&self, w: f64) -> Result<()> {
        let top = self.safe_level();
        if !(0.0..=top).contains(&w) || w.is_nan() {
            return Err(RuinError::Domain {
                what: "w",
                value: w,
                domain: format!("[0, {top}]"),
            });
        }
        Ok(())
    }

    /// Minimum ruin probability `(1 - (r/c) w)^p(sigma)` under constant volatility.
    pub fn psi_const(&self, w: f64, sigma: f64) -> Result<f64> {
        self.check_wealth(w)?;
        let p = self.exponent_p(sigma)?;
        Ok(self.surplus_ratio(w).powf(p))
    }

    /// Optimal constant-volatility investment
    /// `((mu - r) / sigma^2) (c - r w) / ((p - 1) r)`.
    pub fn pi_tilde(&self, w: f64, sigma: f64) -> Result<f64> {
        self.check_wealth(w)?;
        let p = self.exponent_p(sigma)?;
        Ok(self.pi_tilde_with_p(w, sigma, p))
    }

    pub(crate) fn pi_tilde_with_p(&self, w: f64, sigma: f64, p: f64) -> f64 {
        let need = (self.c - self.r * w).max(0.0);
        self.excess_return() / (sigma * sigma) * need / ((p - 1.0) * self.r)
    }

    /// Ruin probability when everything sits in the money market:
    /// `(1 - (r/c) w)^max(1, lambda/r)`.
    pub fn psi_money_market(&self, w: f64) -> Result<f64> {
        self.check_wealth(w)?;
        let exponent = (self.lambda / self.r).max(1.0);
        Ok(self.surplus_ratio(w).powf(exponent))
    }

    /// `1 - (r/c) w`, clamped at zero against rounding.
    pub(crate) fn surplus_ratio(&self, w: f64) -> f64 {
        if w >= self.safe_level() {
            return 0.0;
        }
        ((self.c - self.r * w) / self.c).max(0.0)
    }
}

/// `0.5 (excess / sigma)^2`; accepts a zero excess return.
pub fn half_sharpe_squared(excess: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(
            "sigma",
            format!("must be positive and finite, got {sigma}"),
        ));
    }
    let k = excess / sigma;
    Ok(0.5 * k * k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// Mean reversion on the short time scale `eps = 1 / speed`.
    Fast,
    /// Mean reversion on the long time scale `1 / delta`, `delta = speed`.
    Slow,
}

/// The volatility map `f`. Only the two families below are supported so that
/// closed forms (antiderivative of `1/f`, derivative of `s`) are available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VolMap {
    /// `f(v) = exp(-v)`
    ExpNeg,
    /// `f(v) = sigma`
    Const { sigma: f64 },
}

impl VolMap {
    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            VolMap::ExpNeg => (-v).exp(),
            VolMap::Const { sigma } => sigma,
        }
    }

    /// Factor value at which `f` equals `sigma`, when unique.
    pub fn inverse(&self, sigma: f64) -> Option<f64> {
        match *self {
            VolMap::ExpNeg if sigma > 0.0 => Some(-sigma.ln()),
            _ => None,
        }
    }
}

/// One Ornstein-Uhlenbeck volatility factor
/// `dV = speed (m - V) dt + nu sqrt(2 speed) dB`, correlated with the stock
/// through `rho`.
///
/// `scale` records a coordinate stretch `V_bar = scale * V`: `m` and `nu` are
/// stored in the stretched coordinate and the volatility map is evaluated at
/// `v / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub speed: f64,
    pub m: f64,
    pub nu: f64,
    pub rho: f64,
    pub volmap: VolMap,
    pub scale: f64,
}

impl FactorSpec {
    pub fn new(
        kind: FactorKind,
        speed: f64,
        m: f64,
        nu: f64,
        rho: f64,
        volmap: VolMap,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            speed,
            m,
            nu,
            rho,
            volmap,
            scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Reference factor: m = 1.364, nu = 0.15, f = exp(-v), so that the harmonic
    /// average volatility is 0.25.
    pub fn reference(kind: FactorKind, speed: f64, rho: f64) -> Result<Self> {
        Self::new(kind, speed, 1.364, 0.15, rho, VolMap::ExpNeg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !self.speed.is_finite() {
            return Err(invalid(
                "speed",
                format!("must be positive, got {}", self.speed),
            ));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(invalid("nu", format!("must be positive, got {}", self.nu)));
        }
        if !self.m.is_finite() {
            return Err(invalid("m", "must be finite"));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(invalid(
                "rho",
                format!("must lie in [-1, 1], got {}", self.rho),
            ));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(invalid(
                "scale",
                format!("must be positive, got {}", self.scale),
            ));
        }
        if let VolMap::Const { sigma } = self.volmap {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(invalid(
                    "volmap.sigma",
                    format!("must be positive, got {sigma}"),
                ));
            }
        }
        Ok(())
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = rho;
        self.validate()?;
        Ok(self)
    }

    pub fn with_speed(mut self, speed: f64) -> Result<Self> {
        self.speed = speed;
        self.validate()?;
        Ok(self)
    }

    pub fn with_kind(mut self, kind: FactorKind) -> Self {
        self.kind = kind;
        self
    }

    /// Volatility at factor value `v` (in this spec's coordinate).
    pub fn vol(&self, v: f64) -> f64 {
        self.volmap.eval(v / self.scale)
    }

    /// An antiderivative of `1 / f` in this spec's coordinate.
    pub fn inv_vol_antiderivative(&self, v: f64) -> f64 {
        match self.volmap {
            VolMap::ExpNeg => self.scale * (v / self.scale).exp(),
            VolMap::Const { sigma } => v / sigma,
        }
    }

    /// `d ln f / dv`, when available in closed form.
    pub fn log_vol_slope(&self) -> Option<f64> {
        match self.volmap {
            VolMap::ExpNeg => Some(-1.0 / self.scale),
            VolMap::Const { .. } => Some(0.0),
        }
    }

    /// Factor coordinate where the volatility equals `sigma`.
    pub fn factor_for_vol(&self, sigma: f64) -> Option<f64> {
        self.volmap.inverse(sigma).map(|v| v * self.scale)
    }

    /// Mean-reversion rate of the drift `alpha (m - v)`.
    pub fn alpha(&self) -> f64 {
        self.speed
    }

    /// Diffusion coefficient `nu sqrt(2 speed)`.
    pub fn beta(&self) -> f64 {
        self.nu * (2.0 * self.speed).sqrt()
    }

    /// The `h(z) = sqrt(2) nu` coefficient of a slow factor.
    pub fn slow_diffusion(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.nu
    }

    /// `1 / speed` for a fast factor, zero otherwise.
    pub fn eps(&self) -> f64 {
        match self.kind {
            FactorKind::Fast => 1.0 / self.speed,
            FactorKind::Slow => 0.0,
        }
    }

    /// `speed` for a slow factor, zero otherwise.
    pub fn delta(&self) -> f64 {
        match self.kind {
            FactorKind::Fast => 0.0,
            FactorKind::Slow => self.speed,
        }
    }
}

/// A point of the solution domain: wealth and factor value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolPoint {
    pub w: f64,
    pub v: f64,
}

impl VolPoint {
    pub fn new(p: &MarketParams, w: f64, v: f64) -> Result<Self> {
        p.check_wealth(w)?;
        Ok(Self { w, v })
    }
}

/// Harmonic average volatility: `1 / sigma_*^2 = E[1 / f(Y)^2]` with
/// `Y ~ N(m, nu^2)`.
pub fn harmonic_avg_vol(f: &FactorSpec) -> Result<f64> {
    let rule = QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_ORDER)?;
    let mean_inv_var = rule.average(
        |y| {
            let v = f.vol(y);
            1.0 / (v * v)
        },
        f.m,
        f.nu,
    )?;
    if !(mean_inv_var > 0.0) || !mean_inv_var.is_finite() {
        return Err(RuinError::Quadrature(format!(
            "harmonic average is degenerate: E[1/f^2] = {mean_inv_var}"
        )));
    }
    Ok(1.0 / mean_inv_var.sqrt())
}
