//! Overlap parameters of a configuration against the AMP frames.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::amp::{pi_hat_of, pi_of, AmpTrace};
use crate::error::{Error, Result};

/// Relative threshold on `|J''| / sqrt(N)` below which a configuration is degenerate.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// Parameters of a configuration `J` relative to an AMP trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapParams {
    /// `pi = r[t] J / sqrt(N)`.
    pub pi: DVector<f64>,
    /// `varpi = y[t-1] J / N`.
    pub varpi: DVector<f64>,
    /// Coefficients of `J'` on `m[t] / sqrt(q)`.
    pub pi_hat: DVector<f64>,
    /// Solution of `Gamma_N Gamma_N^T delta = H[t-1] v / sqrt(N psi)`.
    pub delta: DVector<f64>,
    /// `sqrt(q) Lambda^T e_t`.
    pub pi_star: DVector<f64>,
    /// `(1-q) sqrt(psi) Gamma^T e_{t-1}`.
    pub varpi_star: DVector<f64>,
    /// `sqrt(q) Lambda_N^T e_t = r[t] m^{(t)} / sqrt(N)`.
    pub pi_star_dot: DVector<f64>,
    /// `y[t-1] m^{(t)} / N`.
    pub varpi_star_dot: DVector<f64>,
    /// `|J''|`.
    pub j_perp_norm: f64,
    /// `lambda(J, K)` when a second configuration was supplied.
    pub lambda_pair: Option<f64>,
    /// Perturbation size `eps_bar`.
    pub eps_bar: f64,
}

/// `pi_*` from the theoretical `Lambda`.
pub fn pi_star(trace: &AmpTrace) -> DVector<f64> {
    trace.lambda_th.row(trace.t - 1).transpose() * trace.sol.q.sqrt()
}

/// `varpi_*` from the theoretical `Gamma`.
pub fn varpi_star(trace: &AmpTrace) -> DVector<f64> {
    let sol = &trace.sol;
    trace.gamma_th.row(trace.t - 2).transpose() * ((1.0 - sol.q) * sol.psi.sqrt())
}

/// `varpi(J) = y[t-1] J / N`.
pub fn varpi_of(trace: &AmpTrace, j: &DVector<f64>) -> DVector<f64> {
    let n = trace.n_spins as f64;
    DVector::from_iterator(trace.t - 1, trace.y.iter().map(|y| y.dot(j) / n))
}

/// `J''`, the component of `J` orthogonal to the `m` iterates.
pub fn j_perp(trace: &AmpTrace, j: &DVector<f64>) -> DVector<f64> {
    let mut out = j.clone();
    for r in &trace.r {
        let p = r.dot(&out);
        out.axpy(-p, r, 1.0);
    }
    out
}

fn unit_perp(trace: &AmpTrace, j: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    check_len(trace, j)?;
    let jp = j_perp(trace, j);
    let norm = jp.norm();
    if !(norm > DEGENERATE_TOL * (trace.n_spins as f64).sqrt()) {
        return Err(Error::DegenerateConfiguration);
    }
    Ok((jp / norm, norm))
}

fn check_len(trace: &AmpTrace, j: &DVector<f64>) -> Result<()> {
    if j.len() != trace.n_spins {
        return Err(Error::InvalidParameter(format!("configuration has length {}, need {}", j.len(), trace.n_spins)));
    }
    if trace.t < 2 {
        return Err(Error::InvalidParameter("overlap parameters need t >= 2".into()));
    }
    Ok(())
}

/// All overlap parameters of `J`.
pub fn overlap_params(trace: &AmpTrace, j: &DVector<f64>, eps_bar: f64) -> Result<OverlapParams> {
    let (v, j_perp_norm) = unit_perp(trace, j)?;
    let pi = pi_of(trace, j);
    let pi_hat = pi_hat_of(trace, &pi);
    let n = trace.n_spins as f64;
    let rhs = trace.big_h_stack() * &v / (n * trace.sol.psi).sqrt();
    let delta = gram_solve(&trace.gamma_n, &rhs);
    let mt = &trace.m[trace.t];
    Ok(OverlapParams {
        varpi: varpi_of(trace, j),
        pi_star: pi_star(trace),
        varpi_star: varpi_star(trace),
        pi_star_dot: pi_of(trace, mt),
        varpi_star_dot: varpi_of(trace, mt),
        pi,
        pi_hat,
        delta,
        j_perp_norm,
        lambda_pair: None,
        eps_bar,
    })
}

/// Solves `L L^T x = b` for lower-triangular `L`.
fn gram_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = l.solve_lower_triangular(b).expect("positive diagonal");
    l.transpose().solve_upper_triangular(&z).expect("positive diagonal")
}

/// `lambda(J, K)` with the unit vector `w` completing `v_J` to a basis of
/// `span(v_J, v_K)`; `w` is `None` when `v_K = +-v_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOverlap {
    /// `(v_J, v_K)`.
    pub lambda: f64,
    /// Normalized `v_K - lambda v_J`.
    pub w: Option<DVector<f64>>,
}

/// Pair overlap of two configurations.
pub fn pair_lambda(trace: &AmpTrace, j: &DVector<f64>, k: &DVector<f64>) -> Result<PairOverlap> {
    let (vj, _) = unit_perp(trace, j)?;
    let (vk, _) = unit_perp(trace, k)?;
    let lambda = vj.dot(&vk).clamp(-1.0, 1.0);
    let rest = &vk - &vj * lambda;
    let norm = rest.norm();
    let w = if norm > 1e-12 { Some(rest / norm) } else { None };
    Ok(PairOverlap { lambda, w })
}

/// [`overlap_params`] of `J` with `lambda(J, K)` filled in.
pub fn overlap_params_pair(
    trace: &AmpTrace,
    j: &DVector<f64>,
    k: &DVector<f64>,
    eps_bar: f64,
) -> Result<OverlapParams> {
    let mut p = overlap_params(trace, j, eps_bar)?;
    p.lambda_pair = Some(pair_lambda(trace, j, k)?.lambda);
    Ok(p)
}
