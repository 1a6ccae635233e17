//! Activation functions `U: R -> [0, 1]` and the scalar functionals built
//! from tilted Gaussian moments: `L_q`, `F_q`, `F_q'`, the Hessian
//! ingredients `(A, B, a, b)` and the empirical constants `C_1`, `K_2`.
//!
//! Derivatives of `U` are never taken pointwise. Every functional is a ratio
//! of raw moments `N_k(x, c) = E[xi^k U(x + c xi)]`.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{adaptive_simpson, gaussian_moment, interval_moments, phi, upper_tail_moments, Integrator};

/// Largest raw-moment order supported by the quadrature path.
pub const MAX_MOMENT: usize = 12;

/// Piecewise-linear activation read from a two-column table.
#[derive(Debug)]
pub struct TabulatedGrid {
    xs: Vec<f64>,
    us: Vec<f64>,
    clamp_events: AtomicU64,
}

impl TabulatedGrid {
    /// Builds a grid; `xs` must be strictly increasing and values in `[0, 1]`.
    pub fn new(xs: Vec<f64>, us: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != us.len() {
            return Err(Error::Tabulated("need at least two rows of equal length".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Tabulated("x column must be strictly increasing".into()));
        }
        if us.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::Tabulated("values must lie in [0, 1]".into()));
        }
        Ok(Self { xs, us, clamp_events: AtomicU64::new(0) })
    }

    /// Parses whitespace-separated `x value` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut xs = Vec::new();
        let mut us = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 2 {
                return Err(Error::Tabulated(format!("line {}: expected two columns", lineno + 1)));
            }
            let x: f64 = cols[0]
                .parse()
                .map_err(|_| Error::Tabulated(format!("line {}: bad x '{}'", lineno + 1, cols[0])))?;
            let u: f64 = cols[1]
                .parse()
                .map_err(|_| Error::Tabulated(format!("line {}: bad value '{}'", lineno + 1, cols[1])))?;
            xs.push(x);
            us.push(u);
        }
        Self::new(xs, us)
    }

    /// Reads and parses a table file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Tabulated(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Linear interpolation, clamped to the end values outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            if x < self.xs[0] {
                self.clamp_events.fetch_add(1, Ordering::Relaxed);
            }
            return self.us[0];
        }
        if x >= self.xs[n - 1] {
            if x > self.xs[n - 1] {
                self.clamp_events.fetch_add(1, Ordering::Relaxed);
            }
            return self.us[n - 1];
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let t = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        self.us[i] + t * (self.us[i + 1] - self.us[i])
    }

    /// Number of evaluations clamped to an end value so far.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Grid abscissae.
    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Grid values.
    pub fn values(&self) -> &[f64] {
        &self.us
    }
}

/// The family an activation belongs to.
#[derive(Debug, Clone)]
pub enum ActivationKind {
    /// `1{y >= kappa}`.
    Halfspace { kappa: f64 },
    /// `1{lo <= y <= hi}`.
    Band { lo: f64, hi: f64 },
    /// `exp(-(y - mean)^2 / (2 sigma^2))`.
    GaussBump { mean: f64, sigma: f64 },
    /// `min(1, exp(lambda y))`.
    ClippedExp { lambda: f64 },
    /// Linear interpolation of a table.
    Tabulated(Arc<TabulatedGrid>),
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Halfspace { kappa } => write!(f, "halfspace(kappa={kappa})"),
            Self::Band { lo, hi } => write!(f, "band(a={lo},b={hi})"),
            Self::GaussBump { mean, sigma } => write!(f, "gauss_bump(m={mean},sigma={sigma})"),
            Self::ClippedExp { lambda } => write!(f, "clipped_exp(lambda={lambda})"),
            Self::Tabulated(g) => write!(f, "tabulated(points={})", g.xs.len()),
        }
    }
}

/// An activation together with its metadata and integration settings.
#[derive(Debug, Clone)]
pub struct ActivationSpec {
    /// Family and parameters.
    pub kind: ActivationKind,
    /// Lower bound `delta'` of `U` on the set `E(U)`.
    pub delta_prime: f64,
    /// Interval `[-E_max, E_max]`-style bounds of `E(U)`.
    pub support_interval: (f64, f64),
    /// Gaussian smoothing width; zero means unsmoothed.
    pub eta: f64,
    /// Whether raw moments have a closed form.
    pub closed_form: bool,
    /// Quadrature settings.
    pub integrator: Integrator,
}

impl ActivationSpec {
    fn build(kind: ActivationKind) -> Result<Self> {
        let (delta_prime, support_interval, closed_form) = match &kind {
            ActivationKind::Halfspace { kappa } => {
                if !kappa.is_finite() {
                    return Err(Error::InvalidParameter("halfspace kappa must be finite".into()));
                }
                (0.5, (*kappa, kappa + 1.0), true)
            }
            ActivationKind::Band { lo, hi } => {
                if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidParameter(format!("band needs a < b, got ({lo}, {hi})")));
                }
                (0.5, (*lo, *hi), true)
            }
            ActivationKind::GaussBump { mean, sigma } => {
                if !(*sigma > 0.0) || !mean.is_finite() {
                    return Err(Error::InvalidParameter(format!("gauss_bump needs sigma > 0, got {sigma}")));
                }
                ((-0.5f64).exp() * 0.5, (mean - sigma, mean + sigma), true)
            }
            ActivationKind::ClippedExp { lambda } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::InvalidParameter(format!("clipped_exp needs lambda > 0, got {lambda}")));
                }
                ((-lambda).exp() * 0.5, (-1.0, 1.0), false)
            }
            ActivationKind::Tabulated(g) => {
                let (imax, umax) = g
                    .us
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &u)| if u > acc.1 { (i, u) } else { acc });
                if umax <= 0.0 {
                    return Err(Error::Tabulated("activation vanishes identically".into()));
                }
                let lo = if imax > 0 { 0.5 * (g.xs[imax - 1] + g.xs[imax]) } else { g.xs[0] };
                let hi = if imax + 1 < g.xs.len() { 0.5 * (g.xs[imax] + g.xs[imax + 1]) } else { g.xs[imax] };
                let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
                let floor = g.eval(lo).min(g.eval(hi)).min(umax);
                let dp = 0.5 * floor;
                if dp <= 0.0 {
                    return Err(Error::Tabulated("no interval with positive mass around the maximum".into()));
                }
                (dp, (lo, hi), false)
            }
        };
        Ok(Self { kind, delta_prime, support_interval, eta: 0.0, closed_form, integrator: Integrator::default() })
    }

    /// `1{y >= kappa}`.
    pub fn halfspace(kappa: f64) -> Result<Self> {
        Self::build(ActivationKind::Halfspace { kappa })
    }

    /// `1{lo <= y <= hi}`.
    pub fn band(lo: f64, hi: f64) -> Result<Self> {
        Self::build(ActivationKind::Band { lo, hi })
    }

    /// `exp(-(y - mean)^2 / (2 sigma^2))`.
    pub fn gauss_bump(mean: f64, sigma: f64) -> Result<Self> {
        Self::build(ActivationKind::GaussBump { mean, sigma })
    }

    /// `min(1, exp(lambda y))`.
    pub fn clipped_exp(lambda: f64) -> Result<Self> {
        Self::build(ActivationKind::ClippedExp { lambda })
    }

    /// Tabulated activation.
    pub fn tabulated(grid: TabulatedGrid) -> Result<Self> {
        Self::build(ActivationKind::Tabulated(Arc::new(grid)))
    }

    /// The constant activation `U = 1`, as a flat table.
    pub fn constant_one() -> Self {
        let grid = TabulatedGrid::new(vec![-1.0, 1.0], vec![1.0, 1.0]).expect("valid constant table");
        Self::tabulated(grid).expect("valid constant activation")
    }

    /// Same activation convolved with a centered Gaussian of width `eta`.
    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be >= 0, got {eta}")));
        }
        self.eta = eta;
        Ok(self)
    }

    /// Same activation with different integration settings.
    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    /// Human-readable descriptor including the smoothing width.
    pub fn descriptor(&self) -> String {
        if self.eta > 0.0 {
            format!("{}+eta={}", self.kind, self.eta)
        } else {
            self.kind.to_string()
        }
    }

    /// Whether `U` is an indicator function (0/1 valued, unsmoothed).
    pub fn is_indicator(&self) -> bool {
        self.eta == 0.0 && matches!(self.kind, ActivationKind::Halfspace { .. } | ActivationKind::Band { .. })
    }

    /// Mass floor below which tilted moments are refused.
    pub fn mass_floor(&self) -> f64 {
        if self.closed_form {
            self.integrator.eps_den_closed
        } else {
            self.integrator.eps_den_quad
        }
    }

    /// Unsmoothed `U(y)`.
    pub fn base_eval(&self, y: f64) -> f64 {
        match &self.kind {
            ActivationKind::Halfspace { kappa } => f64::from(u8::from(y >= *kappa)),
            ActivationKind::Band { lo, hi } => f64::from(u8::from(y >= *lo && y <= *hi)),
            ActivationKind::GaussBump { mean, sigma } => (-(y - mean).powi(2) / (2.0 * sigma * sigma)).exp(),
            ActivationKind::ClippedExp { lambda } => (lambda * y).exp().min(1.0),
            ActivationKind::Tabulated(g) => g.eval(y),
        }
    }

    /// Points where the unsmoothed `U` is not smooth.
    fn kinks(&self) -> Vec<f64> {
        match &self.kind {
            ActivationKind::Halfspace { kappa } => vec![*kappa],
            ActivationKind::Band { lo, hi } => vec![*lo, *hi],
            ActivationKind::GaussBump { .. } => vec![],
            ActivationKind::ClippedExp { .. } => vec![0.0],
            ActivationKind::Tabulated(g) => g.xs.clone(),
        }
    }

    /// Raw moments of the unsmoothed activation, no floor check.
    fn base_raw_moments(&self, x: f64, c: f64, out: &mut [f64]) {
        match &self.kind {
            ActivationKind::Halfspace { kappa } => upper_tail_moments((kappa - x) / c, out),
            ActivationKind::Band { lo, hi } => interval_moments((lo - x) / c, (hi - x) / c, out),
            ActivationKind::GaussBump { mean, sigma } => {
                let d = x - mean;
                let s2 = sigma * sigma;
                let v = s2 / (s2 + c * c);
                let mu = -c * d / (s2 + c * c);
                let pref = v.sqrt() * (-d * d / (2.0 * (s2 + c * c))).exp();
                let sd = v.sqrt();
                for (k, o) in out.iter_mut().enumerate() {
                    // E[(mu + sd Z)^k] by the binomial expansion.
                    let mut acc = 0.0;
                    let mut binom = 1.0;
                    for j in 0..=k {
                        if j > 0 {
                            binom = binom * (k - j + 1) as f64 / j as f64;
                        }
                        if j % 2 == 0 {
                            acc += binom * mu.powi((k - j) as i32) * sd.powi(j as i32) * gaussian_moment(j);
                        }
                    }
                    *o = pref * acc;
                }
            }
            ActivationKind::ClippedExp { .. } | ActivationKind::Tabulated(_) => {
                let r = self.integrator.simpson_range;
                let mut breaks = vec![-r, r];
                for y in self.kinks() {
                    let z = (y - x) / c;
                    if z > -r && z < r {
                        breaks.push(z);
                    }
                }
                breaks.sort_by(f64::total_cmp);
                breaks.dedup();
                let vals = adaptive_simpson(
                    |z| {
                        let w = self.base_eval(x + c * z) * phi(z);
                        let mut v = [0.0; MAX_MOMENT + 1];
                        let mut p = 1.0;
                        for item in v.iter_mut().take(out.len()) {
                            *item = p * w;
                            p *= z;
                        }
                        v
                    },
                    &breaks,
                    self.integrator.simpson_tol,
                );
                out.copy_from_slice(&vals[..out.len()]);
            }
        }
    }

    /// Raw moments `N_k(x, c) = E[xi^k U_eta(x + c xi)]` for `k < out.len()`.
    ///
    /// Smoothing is exact: with `s = sqrt(c^2 + eta^2)`, `xi = (c/s) zeta +
    /// (eta/s) xi''` where `zeta` and `xi''` are independent, so the smoothed
    /// moments are binomial mixtures of unsmoothed moments at width `s`.
    /// Fails with [`Error::VanishingMass`] when `N_0` is below the floor.
    pub fn raw_moments(&self, x: f64, c: f64, out: &mut [f64]) -> Result<()> {
        if out.len() > MAX_MOMENT + 1 {
            return Err(Error::InvalidParameter(format!("at most {} raw moments", MAX_MOMENT + 1)));
        }
        if !(c > 0.0) || !x.is_finite() {
            return Err(Error::InvalidParameter(format!("raw moments need finite x and c > 0, got x={x}, c={c}")));
        }
        if self.eta == 0.0 {
            self.base_raw_moments(x, c, out);
        } else {
            let s = (c * c + self.eta * self.eta).sqrt();
            let a = c / s;
            let b = self.eta / s;
            let mut base = [0.0; MAX_MOMENT + 1];
            self.base_raw_moments(x, s, &mut base[..out.len()]);
            for (p, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                let mut binom = 1.0;
                for k in 0..=p {
                    if k > 0 {
                        binom = binom * (p - k + 1) as f64 / k as f64;
                    }
                    let j = p - k;
                    if j % 2 == 0 {
                        acc += binom * a.powi(k as i32) * b.powi(j as i32) * gaussian_moment(j) * base[k];
                    }
                }
                *o = acc;
            }
        }
        let floor = self.mass_floor();
        if !(out[0] >= floor) {
            return Err(Error::VanishingMass { mass: out[0], floor, x, c });
        }
        Ok(())
    }

    /// Normalized tilted moments up to order four at `(x, c)`.
    pub fn tilted(&self, x: f64, c: f64) -> Result<Tilted> {
        let mut raw = [0.0; 5];
        self.raw_moments(x, c, &mut raw)?;
        let n0 = raw[0];
        Ok(Tilted { mass: n0, m1: raw[1] / n0, m2: raw[2] / n0, m3: raw[3] / n0, m4: raw[4] / n0 })
    }
}

/// Mass and the first four moments of the tilted measure `mu_{x,c}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilted {
    /// `E U(x + c xi)`.
    pub mass: f64,
    /// `E_{x,c} Z`.
    pub m1: f64,
    /// `E_{x,c} Z^2`.
    pub m2: f64,
    /// `E_{x,c} Z^3`.
    pub m3: f64,
    /// `E_{x,c} Z^4`.
    pub m4: f64,
}

impl Tilted {
    /// `Var_{x,c} Z`.
    pub fn var(&self) -> f64 {
        self.m2 - self.m1 * self.m1
    }
}

/// Second-order ingredients of `g(x, c) = log E U(x + c xi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessIngredients {
    /// `A = (Var Z - 1) / c^2 = d^2 g / dx^2`.
    pub big_a: f64,
    /// `B = (Cov(Z^2, Z) - 2 E Z) / c^2 = d^2 g / dx dc`.
    pub big_b: f64,
    /// `a = E Z^2 - 1 = c dg/dc`.
    pub small_a: f64,
    /// `b = (Var Z^2 - 3 E Z^2 + 1) / c^2 = d^2 g / dc^2`.
    pub small_b: f64,
}

/// `U(x)`, or `U_eta(x) = E U(x + eta xi)` when the spec is smoothed.
pub fn eval_u(spec: &ActivationSpec, x: f64) -> f64 {
    if spec.eta == 0.0 {
        return spec.base_eval(x);
    }
    let mut n0 = [0.0];
    let base = ActivationSpec { eta: 0.0, ..spec.clone() };
    base.base_raw_moments(x, spec.eta, &mut n0);
    n0[0].clamp(0.0, 1.0)
}

/// `E[xi U(xi)]`.
pub fn mean_score(spec: &ActivationSpec) -> f64 {
    let mut raw = [0.0; 2];
    match spec.raw_moments(0.0, 1.0, &mut raw) {
        Ok(()) => raw[1],
        Err(_) => 0.0,
    }
}

/// `L_q(x) = log E U(x + sqrt(1-q) xi)`.
pub fn l_fn(spec: &ActivationSpec, q: f64, x: f64) -> Result<f64> {
    check_q(q)?;
    let mut raw = [0.0; 1];
    spec.raw_moments(x, (1.0 - q).sqrt(), &mut raw)?;
    Ok(raw[0].ln())
}

/// `F_q(x) = L_q'(x) = E_{x,c}(Z) / c` with `c = sqrt(1-q)`.
pub fn f_fn(spec: &ActivationSpec, q: f64, x: f64) -> Result<f64> {
    check_q(q)?;
    let c = (1.0 - q).sqrt();
    let mut raw = [0.0; 2];
    spec.raw_moments(x, c, &mut raw)?;
    Ok(raw[1] / raw[0] / c)
}

/// `F_q'(x) = (Var_{x,c}(Z) - 1) / c^2`.
pub fn f_prime(spec: &ActivationSpec, q: f64, x: f64) -> Result<f64> {
    check_q(q)?;
    let c = (1.0 - q).sqrt();
    let mut raw = [0.0; 3];
    spec.raw_moments(x, c, &mut raw)?;
    let m1 = raw[1] / raw[0];
    let m2 = raw[2] / raw[0];
    Ok((m2 - m1 * m1 - 1.0) / (c * c))
}

/// `F_q` and `F_q'` from a single moment evaluation.
pub fn f_and_prime(spec: &ActivationSpec, q: f64, x: f64) -> Result<(f64, f64)> {
    check_q(q)?;
    let c = (1.0 - q).sqrt();
    let mut raw = [0.0; 3];
    spec.raw_moments(x, c, &mut raw)?;
    let m1 = raw[1] / raw[0];
    let m2 = raw[2] / raw[0];
    Ok((m1 / c, (m2 - m1 * m1 - 1.0) / (c * c)))
}

/// `(A, B, a, b)` at `(x, c)` from tilted moments up to order four.
pub fn hess_ingredients(spec: &ActivationSpec, x: f64, c: f64) -> Result<HessIngredients> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidParameter(format!("hess_ingredients needs c in (0, 1], got {c}")));
    }
    Ok(ingredients_from(&spec.tilted(x, c)?, c))
}

/// Hessian ingredients from precomputed tilted moments.
pub fn ingredients_from(t: &Tilted, c: f64) -> HessIngredients {
    let c2 = c * c;
    HessIngredients {
        big_a: (t.var() - 1.0) / c2,
        big_b: (t.m3 - t.m2 * t.m1 - 2.0 * t.m1) / c2,
        small_a: t.m2 - 1.0,
        small_b: (t.m4 - t.m2 * t.m2 - 3.0 * t.m2 + 1.0) / c2,
    }
}

/// Integrand of `K_2`: `E[(xi - xi')^2 U U'] / E[U U'] = 2 Var_{x,c} Z`.
pub fn k2_integrand(spec: &ActivationSpec, x: f64, c: f64) -> Result<f64> {
    Ok(2.0 * spec.tilted(x, c)?.var())
}

fn check_q(q: f64) -> Result<()> {
    if (0.0..1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("q must lie in [0, 1), got {q}")))
    }
}

/// `E_{x,c}|Z|^p` for `p < out.len()` by adaptive quadrature over a window
/// covering both the origin and the bulk of the tilted measure.
pub fn abs_tilted_moments(spec: &ActivationSpec, x: f64, c: f64, out: &mut [f64]) -> Result<()> {
    let t = spec.tilted(x, c)?;
    let sd = t.var().max(0.0).sqrt().max(1.0);
    let r = spec.integrator.simpson_range;
    let lo = (-r).min(t.m1 - r * sd);
    let hi = r.max(t.m1 + r * sd);
    let mut breaks = vec![lo, 0.0, hi, t.m1];
    if spec.eta == 0.0 {
        for y in spec.kinks() {
            breaks.push((y - x) / c);
        }
    }
    breaks.retain(|z| *z >= lo && *z <= hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let n = out.len();
    let vals = adaptive_simpson(
        |z| {
            let w = eval_u(spec, x + c * z) * phi(z);
            let mut v = [0.0; MAX_MOMENT + 1];
            let az = z.abs();
            let mut p = 1.0;
            for item in v.iter_mut().take(n) {
                *item = p * w;
                p *= az;
            }
            v
        },
        &breaks,
        1e-9,
    );
    let mass = vals[0];
    if !(mass >= spec.mass_floor()) {
        return Err(Error::VanishingMass { mass, floor: spec.mass_floor(), x, c });
    }
    for (k, o) in out.iter_mut().enumerate() {
        *o = vals[k] / mass;
    }
    Ok(())
}

/// Which constants feed the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantsMode {
    /// Suprema measured on a finite grid.
    Empirical,
    /// Literal proof formulas, labeled "proof constants - not practically tight".
    Proof,
}

/// Grids and absolute constants for [`estimate_constants`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Abscissae `x`.
    pub xs: Vec<f64>,
    /// Widths `c` in `[1/2, 2]`, used for `C_1`, `K_2` and `cbar_1`.
    pub cs: Vec<f64>,
    /// Widths `c` in `[2/5, 7/3]`, used for `K_2'`.
    pub cs_prime: Vec<f64>,
    /// Largest moment order for `C_1`.
    pub p_max: usize,
    /// Absolute constant `c_0` of the moment lemma.
    pub c0: f64,
    /// Absolute constant `c_1` of the threshold formulas.
    pub c1_abs: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let xs = (0..=24).map(|i| -6.0 + 0.5 * i as f64).collect();
        let cs = (0..=15).map(|i| 0.5 + 0.1 * i as f64).collect();
        let mut cs_prime: Vec<f64> = (0..=19).map(|i| 0.4 + 0.1 * i as f64).collect();
        cs_prime.push(7.0 / 3.0);
        Self { xs, cs, cs_prime, p_max: 8, c0: 5.0, c1_abs: 1.0 }
    }
}

/// Empirical and proof-mode constants of an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    /// Grid supremum of `E_{x,c}|Z|^p - (1.82|x|/c)^p`, floored at 10.
    pub c1_empirical: f64,
    /// Grid supremum of `2 Var_{x,c} Z` over `c in [1/2, 2]`, floored at 1.
    pub k2_empirical: f64,
    /// Same over `c in [2/5, 7/3]`.
    pub k2_prime_empirical: f64,
    /// `(4 K_0)^200 + c_0 cbar_1`; infinite when it overflows.
    pub c1_proof: f64,
    /// `log10` of `c1_proof`.
    pub c1_proof_log10: f64,
    /// `max{2, sup_c 1 / E U(c xi)}`.
    pub cbar1: f64,
    /// `1 / (e^10 c_1 C_1^6 K_2^4)`; may underflow to zero.
    pub alpha_threshold: f64,
    /// `log10` of `alpha_threshold`.
    pub alpha_threshold_log10: f64,
    /// `1 / (e^16 c_1 C_1^6 K_2'^4)`; may underflow to zero.
    pub alpha_prime_threshold: f64,
    /// `log10` of `alpha_prime_threshold`.
    pub alpha_prime_threshold_log10: f64,
    /// Which `C_1` fed the thresholds.
    pub mode: ConstantsMode,
    /// Grid points skipped for vanishing mass.
    pub skipped_points: usize,
}

impl ConstantsReport {
    /// `C_1` in the report's mode.
    pub fn c1(&self) -> f64 {
        match self.mode {
            ConstantsMode::Empirical => self.c1_empirical,
            ConstantsMode::Proof => self.c1_proof,
        }
    }

    /// Label attached to proof-mode output.
    pub fn label(&self) -> &'static str {
        match self.mode {
            ConstantsMode::Empirical => "empirical constants",
            ConstantsMode::Proof => "proof constants - not practically tight",
        }
    }
}

/// Measures `C_1`, `K_2`, `K_2'`, `cbar_1` and the density thresholds.
pub fn estimate_constants(spec: &ActivationSpec, grid: &GridConfig, mode: ConstantsMode) -> ConstantsReport {
    use rayon::prelude::*;

    let p_max = grid.p_max.min(MAX_MOMENT);
    let points: Vec<(f64, f64)> = grid.xs.iter().flat_map(|&x| grid.cs.iter().map(move |&c| (x, c))).collect();
    // Fixed-order reduction over the collected per-point results.
    let per_point: Vec<Option<(f64, f64)>> = points
        .par_iter()
        .map(|&(x, c)| {
            let mut abs = [0.0; MAX_MOMENT + 1];
            abs_tilted_moments(spec, x, c, &mut abs[..=p_max]).ok()?;
            let mut c1 = f64::NEG_INFINITY;
            for (p, v) in abs.iter().enumerate().take(p_max + 1) {
                c1 = c1.max(v - (1.82 * x.abs() / c).powi(p as i32));
            }
            let k2 = k2_integrand(spec, x, c).ok()?;
            Some((c1, k2))
        })
        .collect();
    let mut skipped = 0;
    let mut c1 = 10.0f64;
    let mut k2 = 1.0f64;
    for r in &per_point {
        match r {
            Some((a, b)) => {
                c1 = c1.max(*a);
                k2 = k2.max(*b);
            }
            None => skipped += 1,
        }
    }
    let mut k2p = 1.0f64;
    for &x in &grid.xs {
        for &c in &grid.cs_prime {
            match k2_integrand(spec, x, c) {
                Ok(v) => k2p = k2p.max(v),
                Err(_) => skipped += 1,
            }
        }
    }
    let mut cbar1 = 2.0f64;
    for &c in &grid.cs {
        let mut n0 = [0.0];
        let mass = match spec.raw_moments(0.0, c, &mut n0) {
            Ok(()) => n0[0],
            Err(Error::VanishingMass { mass, .. }) => mass,
            Err(_) => 0.0,
        };
        cbar1 = cbar1.max(1.0 / mass);
    }
    let k0 = (8.0 * cbar1.ln()).sqrt();
    let c1_proof_log10 = {
        let big = 200.0 * (4.0 * k0).log10();
        let small = (grid.c0 * cbar1).log10();
        let (hi, lo) = if big > small { (big, small) } else { (small, big) };
        hi + (1.0 + 10f64.powf(lo - hi)).log10()
    };
    let c1_proof = if c1_proof_log10 > 308.0 { f64::INFINITY } else { 10f64.powf(c1_proof_log10) };
    let c1_log10 = match mode {
        ConstantsMode::Empirical => c1.log10(),
        ConstantsMode::Proof => c1_proof_log10,
    };
    let e_log10 = std::f64::consts::LOG10_E;
    let alpha_threshold_log10 = -(10.0 * e_log10 + grid.c1_abs.log10() + 6.0 * c1_log10 + 4.0 * k2.log10());
    let alpha_prime_threshold_log10 = -(16.0 * e_log10 + grid.c1_abs.log10() + 6.0 * c1_log10 + 4.0 * k2p.log10());
    ConstantsReport {
        c1_empirical: c1,
        k2_empirical: k2,
        k2_prime_empirical: k2p,
        c1_proof,
        c1_proof_log10,
        cbar1,
        alpha_threshold: 10f64.powf(alpha_threshold_log10),
        alpha_threshold_log10,
        alpha_prime_threshold: 10f64.powf(alpha_prime_threshold_log10),
        alpha_prime_threshold_log10,
        mode,
        skipped_points: skipped,
    }
}

/// Checks `1 >= U(x) > delta' 1{x in E(U)}` on a sampled grid.
pub fn check_assumption1(spec: &ActivationSpec) -> bool {
    let (lo, hi) = spec.support_interval;
    if !(spec.delta_prime > 0.0) {
        return false;
    }
    (0..=200).all(|i| {
        let x = -20.0 + 0.2 * i as f64;
        let u = eval_u(spec, x);
        let inside = x >= lo && x <= hi;
        (0.0..=1.0).contains(&u) && (!inside || spec.eta > 0.0 || u > spec.delta_prime)
    })
}
