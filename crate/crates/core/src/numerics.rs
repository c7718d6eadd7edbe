//! Numerical kernels shared by the asymptotic and Markov-chain solvers:
//! Gauss-Hermite averaging, bracketing root finding, fixed-point linear solves
//! and the Poisson-equation corrector for the fast factor.

use faer::prelude::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result, RuinError};
use crate::model::{FactorSpec, MarketParams};

/// Default Gauss-Hermite order.
pub const DEFAULT_QUADRATURE_ORDER: usize = 64;

/// Largest system accepted by the dense reference solver.
pub const DENSE_LIMIT: usize = 2500;

/// Gauss-Hermite rule for expectations under a standard normal law.
///
/// Nodes are symmetric about zero and the weights sum to one.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl QuadratureRule {
    /// Golub-Welsch construction from the Jacobi matrix of the probabilists'
    /// Hermite polynomials.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order < 2 {
            return Err(invalid(
                "order",
                format!("need at least 2 nodes, got {order}"),
            ));
        }
        let jacobi = DMatrix::from_fn(order, order, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // enforce exact symmetry
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        for i in 0..order {
            let j = order - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(RuinError::Quadrature(
                "degenerate Gauss-Hermite weights".into(),
            ));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            nodes,
            weights,
            order,
        })
    }

    /// `E[g(Y)]` for `Y ~ N(m, nu^2)`.
    pub fn average<G: Fn(f64) -> f64>(&self, g: G, m: f64, nu: f64) -> Result<f64> {
        if !(nu > 0.0) {
            return Err(invalid("nu", format!("must be positive, got {nu}")));
        }
        let mut acc = 0.0;
        for (&x, &wt) in self.nodes.iter().zip(&self.weights) {
            let y = m + nu * x;
            let gy = g(y);
            if !gy.is_finite() {
                return Err(RuinError::Quadrature(format!(
                    "integrand is not finite at y = {y}"
                )));
            }
            acc += wt * gy;
        }
        Ok(acc)
    }
}

/// Average of `g` under `N(m, nu^2)` with an `order`-point Gauss-Hermite rule.
pub fn gaussian_average<G: Fn(f64) -> f64>(g: G, m: f64, nu: f64, order: usize) -> Result<f64> {
    QuadratureRule::gauss_hermite(order)?.average(g, m, nu)
}

/// Bisection root of a monotone function on `[lo, hi]`, stopping once the
/// bracket is narrower than `tol`.
pub fn find_root_monotone<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(invalid(
            "bracket",
            format!("need lo < hi, got [{lo}, {hi}]"),
        ));
    }
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a);
    let fb = f(b);
    if !fa.is_finite() || !fb.is_finite() {
        return Err(RuinError::NonFinite(format!(
            "root bracket endpoints: f({a}) = {fa}, f({b}) = {fb}"
        )));
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(RuinError::NoSignChange {
            lo,
            hi,
            f_lo: fa,
            f_hi: fb,
        });
    }
    for _ in 0..400 {
        if b - a <= tol {
            break;
        }
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = f(mid);
        if !fm.is_finite() {
            return Err(RuinError::NonFinite(format!("f({mid}) = {fm}")));
        }
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// A fixed-point system `x = A x + b` stored by sparse rows.
///
/// For the ruin problem `A` is the discounted transition matrix restricted to
/// the unknown nodes and `b` injects the boundary values.
#[derive(Debug, Clone, Default)]
pub struct LinearSystem {
    pub dimension: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
}

impl LinearSystem {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, rhs: Vec<f64>) -> Result<Self> {
        let sys = Self {
            dimension: rows.len(),
            rows,
            rhs,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.dimension || self.rhs.len() != self.dimension {
            return Err(RuinError::LinearSolve(format!(
                "dimension {} but {} rows and {} right-hand sides",
                self.dimension,
                self.rows.len(),
                self.rhs.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                if j >= self.dimension {
                    return Err(RuinError::LinearSolve(format!(
                        "row {i} references column {j} outside dimension {}",
                        self.dimension
                    )));
                }
                if !a.is_finite() {
                    return Err(RuinError::NonFinite(format!("coefficient ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// `sup_i |x_i - (A x + b)_i|`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .zip(x)
            .map(|((row, b), xi)| {
                let ax: f64 = row.iter().map(|&(j, a)| a * x[j]).sum();
                (xi - ax - b).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Gauss-Seidel sweeps on `x = A x + b` until the sup-norm residual is below
/// `tol`. Self-coupling `a_ii` is solved for exactly in each update.
pub fn solve_linear_fixed_point(
    sys: &LinearSystem,
    init: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<Vec<f64>> {
    solve_linear_fixed_point_relaxed(sys, init, tol, max_sweeps, 1.0)
}

/// Gauss-Seidel with relaxation factor `omega` (1 is plain Gauss-Seidel).
pub fn solve_linear_fixed_point_relaxed(
    sys: &LinearSystem,
    init: &[f64],
    tol: f64,
    max_sweeps: usize,
    omega: f64,
) -> Result<Vec<f64>> {
    sys.validate()?;
    if init.len() != sys.dimension {
        return Err(RuinError::LinearSolve(format!(
            "initial guess has length {}, expected {}",
            init.len(),
            sys.dimension
        )));
    }
    if !(omega > 0.0 && omega < 2.0) {
        return Err(invalid("omega", format!("must lie in (0, 2), got {omega}")));
    }
    let mut x = init.to_vec();
    let diag: Vec<f64> = sys
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().filter(|e| e.0 == i).map(|e| e.1).sum())
        .collect();
    if let Some(i) = diag.iter().position(|&d| d >= 1.0) {
        return Err(RuinError::LinearSolve(format!(
            "row {i} has self-coupling {} >= 1",
            diag[i]
        )));
    }
    let mut residual = f64::INFINITY;
    for sweep in 0..max_sweeps {
        let mut change = 0.0f64;
        for i in 0..sys.dimension {
            let off: f64 = sys.rows[i]
                .iter()
                .filter(|e| e.0 != i)
                .map(|&(j, a)| a * x[j])
                .sum();
            let target = (off + sys.rhs[i]) / (1.0 - diag[i]);
            let next = x[i] + omega * (target - x[i]);
            change = change.max((next - x[i]).abs());
            x[i] = next;
        }
        if change <= tol || sweep + 1 == max_sweeps {
            residual = sys.residual(&x);
            if residual <= tol {
                return Ok(x);
            }
        }
    }
    Err(RuinError::NotConverged {
        iterations: max_sweeps,
        residual,
    })
}

/// Dense LU solve of `(I - A) x = b`; a reference for small systems.
pub fn solve_dense(sys: &LinearSystem) -> Result<Vec<f64>> {
    sys.validate()?;
    let n = sys.dimension;
    if n > DENSE_LIMIT {
        return Err(RuinError::LinearSolve(format!(
            "dense solve limited to {DENSE_LIMIT} unknowns, got {n}"
        )));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for (i, row) in sys.rows.iter().enumerate() {
        for &(j, a) in row {
            m[(i, j)] -= a;
        }
    }
    let b = DVector::from_column_slice(&sys.rhs);
    let x = m
        .lu()
        .solve(&b)
        .ok_or_else(|| RuinError::LinearSolve("singular dense system".into()))?;
    Ok(x.iter().copied().collect())
}

/// Sparse LU solve of `(I - A) x = b`.
pub fn solve_sparse_direct(sys: &LinearSystem) -> Result<Vec<f64>> {
    sys.validate()?;
    let n = sys.dimension;
    if n == 0 {
        return Ok(Vec::new());
    }
    let nnz: usize = sys.rows.iter().map(Vec::len).sum();
    let mut triplets = Vec::with_capacity(nnz + n);
    for i in 0..n {
        triplets.push(Triplet::new(i, i, 1.0));
    }
    for (i, row) in sys.rows.iter().enumerate() {
        for &(j, a) in row {
            triplets.push(Triplet::new(i, j, -a));
        }
    }
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| RuinError::LinearSolve(format!("assembly failed: {e:?}")))?;
    let lu = mat
        .sp_lu()
        .map_err(|e| RuinError::LinearSolve(format!("factorization failed: {e:?}")))?;
    let b = Mat::<f64>::from_fn(n, 1, |i, _| sys.rhs[i]);
    let x = lu.solve(&b);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(RuinError::LinearSolve("non-finite solution".into()));
    }
    Ok(out)
}

/// Half-width of the integration window, in standard deviations.
const ETA_WINDOW: f64 = 8.0;
/// Number of panels of the tabulated integral.
const ETA_PANELS: usize = 2000;

/// Decaying solution of `(m - y) eta_y + nu^2 eta_yy = g(y)` with
/// `g(y) = 0.5 ((mu - r) / f(y))^2 - s`, returned as `eta_y`:
///
/// `eta_y(y) = exp((y-m)^2 / 2nu^2) / nu^2 * int_{-inf}^{y} g(u) exp(-(u-m)^2 / 2nu^2) du`.
///
/// The integral is tabulated on `m +- 8 nu` with per-panel Simpson rules.
/// Above the mean the complementary upper integral is used; both agree because
/// `g` is centered, and the upper form avoids cancellation in the right tail.
#[derive(Debug, Clone)]
pub struct EtaY {
    m: f64,
    nu: f64,
    half_excess_sq: f64,
    s: f64,
    factor: FactorSpec,
    lo: f64,
    step: f64,
    /// `int_{lo}^{u_i} g w` with `w(u) = exp(-(u-m)^2 / 2nu^2)`
    lower: Vec<f64>,
    /// `int_{u_i}^{hi} g w`
    upper: Vec<f64>,
    zero: bool,
}

impl EtaY {
    fn g(&self, u: f64) -> f64 {
        let f = self.factor.vol(u);
        self.half_excess_sq / (f * f) - self.s
    }

    fn weight(&self, u: f64) -> f64 {
        let d = (u - self.m) / self.nu;
        (-0.5 * d * d).exp()
    }

    /// `int_a^b g(u) w(u) / w(y) du` by composite Simpson with `n` panels.
    fn weighted_integral(&self, a: f64, b: f64, y: f64, n: usize) -> f64 {
        if b <= a {
            return 0.0;
        }
        let dy = (y - self.m) / self.nu;
        let kernel = |u: f64| {
            let du = (u - self.m) / self.nu;
            self.g(u) * (-0.5 * (du * du - dy * dy)).exp()
        };
        simpson(kernel, a, b, n)
    }

    /// `eta_y` at `y`.
    pub fn eval(&self, y: f64) -> f64 {
        if self.zero {
            return 0.0;
        }
        let nu2 = self.nu * self.nu;
        let hi = self.lo + self.step * ETA_PANELS as f64;
        let span = ETA_WINDOW * self.nu;
        if y < self.lo {
            return self.weighted_integral(y - span, y, y, ETA_PANELS) / nu2;
        }
        if y > hi {
            return -self.weighted_integral(y, y + span, y, ETA_PANELS) / nu2;
        }
        let wy = self.weight(y);
        let i = (((y - self.lo) / self.step).floor() as usize).min(ETA_PANELS - 1);
        let ui = self.lo + self.step * i as f64;
        let ui1 = ui + self.step;
        if y <= self.m {
            let head = self.lower[i] / wy;
            let tail = self.weighted_integral(ui, y, y, 2);
            (head + tail) / nu2
        } else {
            let head = self.upper[i + 1] / wy;
            let tail = self.weighted_integral(y, ui1, y, 2);
            -(head + tail) / nu2
        }
    }

    /// Mean of the Poisson right-hand side `g` under `N(m, nu^2)`.
    pub fn source(&self, y: f64) -> f64 {
        self.g(y)
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let x = a + h * k as f64;
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    acc * h / 3.0
}

/// Builds the decaying `eta_y` for the fast-factor corrector. Fails when the
/// source `0.5 ((mu - r)/f)^2 - s` is not centered under `N(m, nu^2)` within
/// `1e-8`.
pub fn poisson_corrector_etay(p: &MarketParams, f: &FactorSpec, s: f64) -> Result<EtaY> {
    let half_excess_sq = 0.5 * p.excess_return() * p.excess_return();
    let rule = QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_ORDER)?;
    let mean = rule.average(
        |y| {
            let v = f.vol(y);
            half_excess_sq / (v * v) - s
        },
        f.m,
        f.nu,
    )?;
    if mean.abs() > 1e-8 {
        return Err(RuinError::CenteringViolated { mean });
    }
    let lo = f.m - ETA_WINDOW * f.nu;
    let step = 2.0 * ETA_WINDOW * f.nu / ETA_PANELS as f64;
    let mut eta = EtaY {
        m: f.m,
        nu: f.nu,
        half_excess_sq,
        s,
        factor: *f,
        lo,
        step,
        lower: vec![0.0; ETA_PANELS + 1],
        upper: vec![0.0; ETA_PANELS + 1],
        zero: false,
    };
    let panel = |e: &EtaY, a: f64| {
        let b = a + e.step;
        let mid = 0.5 * (a + b);
        let gw = |u: f64| e.g(u) * e.weight(u);
        (gw(a) + 4.0 * gw(mid) + gw(b)) * e.step / 6.0
    };
    let pieces: Vec<f64> = (0..ETA_PANELS)
        .map(|k| panel(&eta, lo + step * k as f64))
        .collect();
    for k in 0..ETA_PANELS {
        eta.lower[k + 1] = eta.lower[k] + pieces[k];
    }
    for k in (0..ETA_PANELS).rev() {
        eta.upper[k] = eta.upper[k + 1] + pieces[k];
    }
    eta.zero = pieces.iter().all(|&v| v == 0.0);
    Ok(eta)
}
