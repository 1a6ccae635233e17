//! Gaussian expectation engine.
//!
//! Gauss-Hermite rules in the probabilists' normalization (weight `phi(z)`),
//! one- and two-dimensional expectations, closed-form truncated-normal
//! moments and a vector-valued adaptive Simpson integrator used for
//! activations without a closed form.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};

/// Default Gauss-Hermite order.
pub const DEFAULT_ORDER: usize = 201;

/// `1 / sqrt(2 pi)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Nodes and weights of a quadrature rule for the standard normal measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    /// Nodes in standard-normal coordinates, increasing.
    pub nodes: Vec<f64>,
    /// Positive weights summing to one.
    pub weights: Vec<f64>,
    /// Number of nodes.
    pub order: usize,
}

/// Orthonormal probabilists' Hermite values `(h_n(x), h_{n-1}(x), log_scale)`.
///
/// The true values are the returned ones times `exp(log_scale)`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut log_scale = 0.0;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e150 {
            cur *= 1e-150;
            prev *= 1e-150;
            log_scale += 150.0 * std::f64::consts::LN_10;
        }
    }
    (cur, prev, log_scale)
}

impl QuadratureRule {
    /// Gauss-Hermite rule of the given order for `E f(xi)`, `xi ~ N(0,1)`.
    ///
    /// Nodes come from Newton iteration on the orthonormal three-term
    /// recurrence with asymptotic starting values; weights are the
    /// Christoffel numbers `1 / (n h_{n-1}(x)^2)`.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("quadrature order must be positive".into()));
        }
        let n = order;
        let nf = n as f64;
        // Eigenvalues of the Jacobi matrix give the nodes; Newton polishes them.
        let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut roots: Vec<f64> = nalgebra::SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        roots.sort_by(f64::total_cmp);
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n.div_ceil(2) {
            let mut x = 0.5 * (roots[i] - roots[n - 1 - i]);
            for _ in 0..8 {
                let (hn, hn1, _) = hermite_pair(n, x);
                if hn1 == 0.0 {
                    break;
                }
                let dx = hn / (nf.sqrt() * hn1);
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            if n % 2 == 1 && i == n / 2 {
                x = 0.0;
            }
            let (_, hn1, ls) = hermite_pair(n, x);
            nodes.push(x);
            weights.push((-nf.ln() - 2.0 * (hn1.abs().ln() + ls)).exp());
        }
        // `nodes` holds the non-positive half in increasing order; mirror it.
        let mirror_start = n / 2;
        for i in (0..mirror_start).rev() {
            nodes.push(-nodes[i]);
            weights.push(weights[i]);
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { nodes, weights, order: n })
    }

    /// Process-wide cached rule of the given order.
    pub fn shared(order: usize) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        if let Some(rule) = guard.get(&order) {
            return Ok(rule.clone());
        }
        let rule = Arc::new(Self::gauss_hermite(order)?);
        guard.insert(order, rule.clone());
        Ok(rule)
    }
}

/// `E f(xi)` under the rule.
pub fn expect_g<F: Fn(f64) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(z);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { node: z });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Fallible variant of [`expect_g`] for integrands that can fail.
pub fn try_expect_g<F: Fn(f64) -> Result<f64>>(f: F, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(z)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { node: z });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `E f(xi, xi')` for independent standard normals under the tensor rule.
pub fn expect_g2<F: Fn(f64, f64) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (&z1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        let mut inner = 0.0;
        for (&z2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            let v = f(z1, z2);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: z1 });
            }
            inner += w2 * v;
        }
        acc += w1 * inner;
    }
    Ok(acc)
}

/// Standard normal density.
#[inline]
pub fn phi(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal distribution function.
#[inline]
pub fn big_phi(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Upper tail `P(xi >= z)`.
#[inline]
pub fn big_phi_c(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Partial moments `T_k(u) = int_u^inf z^k phi(z) dz` for `k < out.len()`.
pub fn upper_tail_moments(u: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    if u == f64::INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (pu, upow_base) = if u == f64::NEG_INFINITY { (0.0, 0.0) } else { (phi(u), u) };
    out[0] = if u == f64::NEG_INFINITY { 1.0 } else { big_phi_c(u) };
    if out.len() > 1 {
        out[1] = pu;
    }
    let mut upow = 1.0;
    for k in 2..out.len() {
        upow *= upow_base;
        let boundary = if pu == 0.0 { 0.0 } else { upow * pu };
        out[k] = boundary + (k - 1) as f64 * out[k - 2];
    }
}

/// Partial moments `int_l^h z^k phi(z) dz`, evaluated without cancellation
/// when both limits lie in the same tail.
pub fn interval_moments(l: f64, h: f64, out: &mut [f64]) {
    let k = out.len();
    if h <= l {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut a = [0.0; 16];
    let mut b = [0.0; 16];
    assert!(k <= 16, "at most 16 moments");
    if h <= 0.0 {
        // Reflect into the upper tail: int_l^h z^k = (-1)^k int_{-h}^{-l} z^k.
        upper_tail_moments(-h, &mut a[..k]);
        upper_tail_moments(-l, &mut b[..k]);
        for (j, v) in out.iter_mut().enumerate() {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            *v = s * (a[j] - b[j]);
        }
    } else {
        upper_tail_moments(l, &mut a[..k]);
        upper_tail_moments(h, &mut b[..k]);
        for (j, v) in out.iter_mut().enumerate() {
            *v = a[j] - b[j];
        }
    }
}

/// Raw Gaussian moments `E xi^k`.
pub fn gaussian_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut m = 1.0;
    let mut j = k as i64 - 1;
    while j > 1 {
        m *= j as f64;
        j -= 2;
    }
    m
}

fn simpson_step<const K: usize>(fa: &[f64; K], fm: &[f64; K], fb: &[f64; K], h: f64) -> [f64; K] {
    let mut s = [0.0; K];
    for j in 0..K {
        s[j] = h / 6.0 * (fa[j] + 4.0 * fm[j] + fb[j]);
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<const K: usize, F: Fn(f64) -> [f64; K]>(
    f: &F,
    a: f64,
    b: f64,
    fa: [f64; K],
    fm: [f64; K],
    fb: [f64; K],
    whole: [f64; K],
    tol: f64,
    depth: usize,
) -> [f64; K] {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_step(&fa, &flm, &fm, m - a);
    let right = simpson_step(&fm, &frm, &fb, b - m);
    let mut err = 0.0f64;
    for j in 0..K {
        err = err.max((left[j] + right[j] - whole[j]).abs());
    }
    if depth == 0 || err <= 15.0 * tol {
        let mut out = [0.0; K];
        for j in 0..K {
            out[j] = left[j] + right[j] + (left[j] + right[j] - whole[j]) / 15.0;
        }
        return out;
    }
    let l = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1);
    let r = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
    let mut out = [0.0; K];
    for j in 0..K {
        out[j] = l[j] + r[j];
    }
    out
}

/// Vector-valued adaptive Simpson integration of `f` over consecutive
/// pieces `[breaks[i], breaks[i+1]]`.
///
/// The tolerance is relative to the largest component of a crude composite
/// estimate so that tiny masses keep their relative accuracy.
pub fn adaptive_simpson<const K: usize, F: Fn(f64) -> [f64; K]>(f: F, breaks: &[f64], rel_tol: f64) -> [f64; K] {
    let mut crude = [0.0; K];
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let panels = 32;
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            let x0 = a + p as f64 * h;
            let s = simpson_step(&f(x0), &f(x0 + 0.5 * h), &f(x0 + h), h);
            for j in 0..K {
                crude[j] += s[j];
            }
        }
    }
    let scale = crude.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol_total = rel_tol * scale;
    let total_len = breaks.last().unwrap() - breaks[0];
    let mut out = [0.0; K];
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = simpson_step(&fa, &fm, &fb, b - a);
        let tol = tol_total * (b - a) / total_len;
        let piece = simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 48);
        for j in 0..K {
            out[j] += piece[j];
        }
    }
    out
}

/// Settings shared by every Gaussian expectation of an activation.
#[derive(Debug, Clone)]
pub struct Integrator {
    /// Gauss-Hermite rule for outer expectations.
    pub rule: Arc<QuadratureRule>,
    /// Relative target of the adaptive Simpson path.
    pub simpson_tol: f64,
    /// Half-width, in standard deviations, of the Simpson range.
    pub simpson_range: f64,
    /// Mass floor on the closed-form path.
    pub eps_den_closed: f64,
    /// Mass floor on the quadrature path.
    pub eps_den_quad: f64,
}

impl Integrator {
    /// Integrator with a Gauss-Hermite rule of the given order and default tolerances.
    pub fn with_order(order: usize) -> Result<Self> {
        Ok(Self {
            rule: QuadratureRule::shared(order)?,
            simpson_tol: 1e-10,
            simpson_range: 10.0,
            eps_den_closed: 1e-300,
            eps_den_quad: 1e-14,
        })
    }
}

impl Default for Integrator {
    fn default() -> Self {
        Self::with_order(DEFAULT_ORDER).expect("default quadrature rule")
    }
}

/// `E_{x,c}(Z^p) = E[xi^p U(x + c xi)] / E[U(x + c xi)]`.
pub fn tilted_moment(spec: &ActivationSpec, x: f64, c: f64, p: usize) -> Result<f64> {
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::InvalidParameter(format!("tilted_moment needs c > 0, got {c}")));
    }
    if p > 12 {
        return Err(Error::InvalidParameter(format!("tilted_moment supports p <= 12, got {p}")));
    }
    let mut raw = [0.0; 13];
    spec.raw_moments(x, c, &mut raw[..=p])?;
    Ok(raw[p] / raw[0])
}

/// Half-normal mean `2 phi(0) = sqrt(2/pi)`.
pub fn half_normal_mean() -> f64 {
    (2.0 / PI).sqrt()
}
