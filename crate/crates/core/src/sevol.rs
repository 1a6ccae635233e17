//! State-evolution recursions `(rho_s, mu_s, lambda_s, gamma_s)` and the
//! lower-triangular matrices `Gamma`, `Lambda` predicting AMP geometry.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{f_fn, ActivationSpec};
use crate::error::{Error, Result};
use crate::gauss::{try_expect_g, QuadratureRule};
use crate::rs::RsSolution;

/// Default convergence threshold on `1 - Gamma_s` and `1 - Lambda_s`.
pub const DEFAULT_EPS_CONV: f64 = 1e-8;

/// Default maximum number of steps.
pub const DEFAULT_T_MAX: usize = 200;

/// Largest excess of `|mu|` over one that is clamped instead of rejected.
pub const CLAMP_SLACK: f64 = 1e-9;

/// A computed state-evolution trajectory; index `s - 1` holds step `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeTrace {
    /// `rho_s`.
    pub rho: Vec<f64>,
    /// `mu_s`.
    pub mu: Vec<f64>,
    /// `lambda_s`.
    pub lambda: Vec<f64>,
    /// `gamma_s`.
    pub gamma: Vec<f64>,
    /// `Gamma_s = sum_{l <= s} gamma_l^2`.
    pub gamma_cum: Vec<f64>,
    /// `Lambda_s = sum_{l <= s} lambda_l^2`.
    pub lambda_cum: Vec<f64>,
    /// `(t-1) x (t-1)` matrix `Gamma`.
    pub gamma_mat: DMatrix<f64>,
    /// `t x t` matrix `Lambda`.
    pub lambda_mat: DMatrix<f64>,
    /// Number of steps computed.
    pub t: usize,
    /// Number of `|rho|`, `|mu|` values clamped to one.
    pub clamped: usize,
}

impl SeTrace {
    /// `Gamma_s`, with `Gamma_0 = 0`.
    pub fn gamma_sum(&self, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.gamma_cum[s - 1]
        }
    }

    /// `Lambda_s`, with `Lambda_0 = 0`.
    pub fn lambda_sum(&self, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.lambda_cum[s - 1]
        }
    }

    /// The `t x t` matrix `Lambda`; needs `t <= self.t + 1`.
    pub fn lambda_matrix(&self, t: usize) -> DMatrix<f64> {
        triangular(t, &self.lambda, &self.lambda_cum)
    }

    /// The `(t-1) x (t-1)` matrix `Gamma`; needs `t <= self.t + 2`.
    pub fn gamma_matrix(&self, t: usize) -> DMatrix<f64> {
        triangular(t.saturating_sub(1), &self.gamma, &self.gamma_cum)
    }

    /// Ratios `(1 - Gamma_{s+1}) / (1 - Gamma_s)` for the computed steps.
    pub fn decay_ratios(&self) -> Vec<f64> {
        self.gamma_cum.windows(2).map(|w| (1.0 - w[1]) / (1.0 - w[0])).collect()
    }

    /// CSV header matching [`SeTrace::csv_rows`].
    pub const CSV_HEADER: &'static str = "step,rho,mu,lambda,gamma,Gamma_cum,Lambda_cum";

    /// One CSV row per step at 17 significant digits.
    pub fn csv_rows(&self) -> Vec<String> {
        (0..self.t)
            .map(|i| {
                format!(
                    "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    i + 1,
                    self.rho[i],
                    self.mu[i],
                    self.lambda[i],
                    self.gamma[i],
                    self.gamma_cum[i],
                    self.lambda_cum[i]
                )
            })
            .collect()
    }
}

/// Row `i` holds `(coef_1, ..., coef_{i-1}, sqrt(1 - cum_{i-1}))`.
fn triangular(n: usize, coef: &[f64], cum: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if j < i {
            coef[j]
        } else if j == i {
            let prev = if i == 0 { 0.0 } else { cum[i - 1] };
            (1.0 - prev).sqrt()
        } else {
            0.0
        }
    })
}

fn check_nondegenerate(sol: &RsSolution) -> Result<()> {
    if !(sol.q > 0.0 && sol.psi > 0.0) {
        return Err(Error::DegenerateFixedPoint { q: sol.q, psi: sol.psi });
    }
    Ok(())
}

/// `(rho_1, mu_1) = (0, sqrt(alpha / psi) E F_q(sqrt(q) Z))`.
pub fn se_init(spec: &ActivationSpec, sol: &RsSolution) -> Result<(f64, f64)> {
    check_nondegenerate(sol)?;
    let sq = sol.q.sqrt();
    let ef = try_expect_g(|z| f_fn(spec, sol.q, sq * z), &spec.integrator.rule)?;
    Ok((0.0, (sol.alpha / sol.psi).sqrt() * ef))
}

/// `E[f(xi) f(corr xi + sqrt(1 - corr^2) xi')]` on the tensor rule.
fn correlated_expectation<F>(f: F, corr: f64, rule: &QuadratureRule) -> Result<f64>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let s = (1.0 - corr * corr).max(0.0).sqrt();
    let outer: Vec<f64> = rule.nodes.iter().map(|&z| f(z)).collect::<Result<_>>()?;
    let rows: Vec<f64> = rule
        .nodes
        .par_iter()
        .map(|&z| {
            let mut acc = 0.0;
            for (&zp, &wp) in rule.nodes.iter().zip(&rule.weights) {
                acc += wp * f(corr * z + s * zp)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for ((&w, &fo), &inner) in rule.weights.iter().zip(&outer).zip(&rows) {
        total += w * fo * inner;
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteIntegrand { node: corr });
    }
    Ok(total)
}

/// `rho(mu) = E[tanh(sqrt(psi) xi) tanh(sqrt(psi) xi_mu)] / q`.
pub fn rho_of(spec: &ActivationSpec, sol: &RsSolution, mu: f64) -> Result<f64> {
    check_nondegenerate(sol)?;
    let sp = sol.psi.sqrt();
    Ok(correlated_expectation(|z| Ok((sp * z).tanh()), mu, &spec.integrator.rule)? / sol.q)
}

/// `mu(rho) = (alpha / psi) E[F_q(sqrt(q) xi) F_q(sqrt(q) xi_rho)]`.
pub fn mu_of(spec: &ActivationSpec, sol: &RsSolution, rho: f64) -> Result<f64> {
    check_nondegenerate(sol)?;
    let sq = sol.q.sqrt();
    let e = correlated_expectation(|z| f_fn(spec, sol.q, sq * z), rho, &spec.integrator.rule)?;
    Ok(sol.alpha / sol.psi * e)
}

/// One step: `(rho(mu_prev), mu(rho_prev))`.
pub fn se_step(spec: &ActivationSpec, sol: &RsSolution, mu_prev: f64, rho_prev: f64) -> Result<(f64, f64)> {
    if mu_prev.abs() > 1.0 || rho_prev.abs() > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "se_step needs |mu|, |rho| <= 1, got mu = {mu_prev}, rho = {rho_prev}"
        )));
    }
    let (rho, mu) = rayon::join(|| rho_of(spec, sol, mu_prev), || mu_of(spec, sol, rho_prev));
    Ok((rho?, mu?))
}

fn clamp_unit(v: f64, step: usize, clamped: &mut usize) -> Result<f64> {
    if v.abs() <= 1.0 {
        Ok(v)
    } else if v.abs() <= 1.0 + CLAMP_SLACK {
        *clamped += 1;
        Ok(v.signum())
    } else {
        Err(Error::StateEvolutionDegeneracy { step, value: v })
    }
}

/// Runs the recursion for up to `t_max` steps, stopping once both
/// `1 - Gamma_s` and `1 - Lambda_s` fall below `eps_conv`.
pub fn se_run(spec: &ActivationSpec, sol: &RsSolution, t_max: usize, eps_conv: f64) -> Result<SeTrace> {
    if t_max < 1 {
        return Err(Error::InvalidParameter("t_max must be at least 1".into()));
    }
    let (rho1, mu1) = se_init(spec, sol)?;
    let mut clamped = 0;
    let mu1 = clamp_unit(mu1, 1, &mut clamped)?;
    let mut rho = vec![rho1];
    let mut mu = vec![mu1];
    let mut lambda = vec![rho1];
    let mut gamma = vec![mu1];
    let mut lambda_cum = vec![rho1 * rho1];
    let mut gamma_cum = vec![mu1 * mu1];
    check_cum(1, gamma_cum[0], lambda_cum[0])?;
    let mut s = 1;
    while s < t_max {
        if 1.0 - gamma_cum[s - 1] < eps_conv && 1.0 - lambda_cum[s - 1] < eps_conv {
            break;
        }
        let step = s + 1;
        let (r, m) = se_step(spec, sol, mu[s - 1], rho[s - 1])?;
        let r = clamp_unit(r, step, &mut clamped)?;
        let m = clamp_unit(m, step, &mut clamped)?;
        let lc = lambda_cum[s - 1];
        let gc = gamma_cum[s - 1];
        let l = (r - lc) / (1.0 - lc).sqrt();
        let g = (m - gc) / (1.0 - gc).sqrt();
        rho.push(r);
        mu.push(m);
        lambda.push(l);
        gamma.push(g);
        lambda_cum.push(lc + l * l);
        gamma_cum.push(gc + g * g);
        check_cum(step, gamma_cum[s], lambda_cum[s])?;
        s += 1;
    }
    let t = rho.len();
    let lambda_mat = triangular(t, &lambda, &lambda_cum);
    let gamma_mat = triangular(t - 1, &gamma, &gamma_cum);
    Ok(SeTrace { rho, mu, lambda, gamma, gamma_cum, lambda_cum, gamma_mat, lambda_mat, t, clamped })
}

fn check_cum(step: usize, gamma_cum: f64, lambda_cum: f64) -> Result<()> {
    for v in [gamma_cum, lambda_cum] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::StateEvolutionDegeneracy { step, value: v });
        }
    }
    Ok(())
}
