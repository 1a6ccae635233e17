//! Replica-symmetric fixed point `(q, psi)`, the RS and annealed free
//! energies, Onsager coefficients and the AT scalar.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{f_and_prime, f_fn, l_fn, mean_score, ActivationSpec};
use crate::error::{Error, Result};
use crate::gauss::{expect_g, try_expect_g, QuadratureRule};

/// Tolerance for the identity `beta_acute = 1 - q`.
pub const ONSAGER_TOL: f64 = 1e-8;

/// Mean scores below this magnitude select the symmetric branch.
pub const SYMMETRIC_TOL: f64 = 1e-10;

/// `log(2 cosh x)` without overflow.
pub fn log_2cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// Settings of [`solve_fixed_point`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Right end of the search interval for `q`.
    pub q_max: f64,
    /// Number of scan intervals used to detect sign changes.
    pub scan_points: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { q_max: 1.0 / 25.0, scan_points: 200 }
    }
}

impl SolverOptions {
    /// Whether `q_max` differs from the proven uniqueness interval.
    pub fn q_max_overridden(&self) -> bool {
        self.q_max != 1.0 / 25.0
    }
}

/// Solved fixed point with derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsSolution {
    /// Constraint density `M / N`.
    pub alpha: f64,
    /// Overlap `q = E tanh(sqrt(psi) Z)^2`.
    pub q: f64,
    /// Field variance `psi = alpha E F_q(sqrt(q) Z)^2`.
    pub psi: f64,
    /// RS free energy per spin.
    pub rs_value: f64,
    /// Annealed free energy per spin.
    pub annealed_value: f64,
    /// Column Onsager coefficient `alpha E F_q'(sqrt(q) Z)`.
    pub beta: f64,
    /// Row Onsager coefficient `E tanh'(sqrt(psi) Z)`.
    pub beta_acute: f64,
    /// AT scalar.
    pub at_value: f64,
    /// Whether a root was found.
    pub converged: bool,
    /// `max(|q - qbar(psi)|, |psi - alpha rbar(q)|)`.
    pub residual: f64,
    /// Set when the symmetric shortcut returned `(0, 0)`.
    pub annealed_branch: bool,
}

impl RsSolution {
    /// CSV header matching [`RsSolution::csv_row`].
    pub const CSV_HEADER: &'static str = "alpha,q,psi,rs,annealed,beta,beta_acute,at,converged,residual";

    /// One CSV row at 17 significant digits.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
            self.alpha,
            self.q,
            self.psi,
            self.rs_value,
            self.annealed_value,
            self.beta,
            self.beta_acute,
            self.at_value,
            self.converged,
            self.residual
        )
    }
}

/// `qbar(psi) = E tanh(sqrt(psi) Z)^2`.
pub fn qbar(psi: f64, rule: &QuadratureRule) -> f64 {
    if psi <= 0.0 {
        return 0.0;
    }
    let s = psi.sqrt();
    expect_g(|z| (s * z).tanh().powi(2), rule).unwrap_or(f64::NAN)
}

/// Inverse of [`qbar`] by bisection on a doubling bracket.
pub fn qbar_inv(q: f64, rule: &QuadratureRule) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!("qbar_inv needs q in [0, 1), got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    // qbar(psi) <= psi, so the root is at least q.
    let mut lo = 0.0;
    let mut hi = 2.0 * q;
    while qbar(hi, rule) < q {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::InvalidParameter(format!("qbar_inv: q = {q} not reached")));
        }
    }
    Ok(bisect(|p| qbar(p, rule) - q, lo, hi))
}

/// Bisection of an increasing function to machine precision.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `rbar(q) = E F_q(sqrt(q) Z)^2`.
pub fn rbar(spec: &ActivationSpec, q: f64) -> Result<f64> {
    let s = q.sqrt();
    try_expect_g(|z| Ok(f_fn(spec, q, s * z)?.powi(2)), &spec.integrator.rule)
}

/// Root function `g(q) = qbar^{-1}(q) / alpha - rbar(q)`.
pub fn root_fn(spec: &ActivationSpec, alpha: f64, q: f64) -> Result<f64> {
    Ok(qbar_inv(q, &spec.integrator.rule)? / alpha - rbar(spec, q)?)
}

/// Solves the fixed point on `[0, q_max]` by scan plus bisection.
pub fn solve_fixed_point(spec: &ActivationSpec, alpha: f64, opts: &SolverOptions) -> Result<RsSolution> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    if !(opts.q_max > 0.0 && opts.q_max < 1.0) || opts.scan_points < 2 {
        return Err(Error::InvalidParameter("q_max must lie in (0, 1) with at least two scan points".into()));
    }
    let rule = &spec.integrator.rule;
    if mean_score(spec).abs() < SYMMETRIC_TOL {
        return finish(spec, alpha, 0.0, 0.0, true);
    }
    let grid: Vec<f64> = (0..=opts.scan_points).map(|i| opts.q_max * i as f64 / opts.scan_points as f64).collect();
    let values: Vec<f64> = grid.par_iter().map(|&q| root_fn(spec, alpha, q)).collect::<Result<_>>()?;
    let brackets: Vec<(f64, f64)> = grid
        .windows(2)
        .zip(values.windows(2))
        .filter(|(_, v)| (v[0] > 0.0) != (v[1] > 0.0))
        .map(|(g, _)| (g[0], g[1]))
        .collect();
    match brackets.len() {
        0 => {
            return Err(Error::NoBracketingRoot {
                lo: 0.0,
                hi: opts.q_max,
                g_lo: values[0],
                g_hi: values[values.len() - 1],
            })
        }
        1 => {}
        _ => return Err(Error::MultipleRoots { brackets }),
    }
    let (lo, hi) = brackets[0];
    let increasing = root_fn(spec, alpha, hi)? > 0.0;
    let q = bisect(
        |q| {
            let v = root_fn(spec, alpha, q).unwrap_or(f64::NAN);
            if increasing {
                v
            } else {
                -v
            }
        },
        lo,
        hi,
    );
    let psi = qbar_inv(q, rule)?;
    finish(spec, alpha, q, psi, false)
}

fn finish(spec: &ActivationSpec, alpha: f64, q: f64, psi: f64, annealed_branch: bool) -> Result<RsSolution> {
    let rule = &spec.integrator.rule;
    let residual = (q - qbar(psi, rule)).abs().max((psi - alpha * rbar(spec, q)?).abs());
    let (beta, beta_acute) = onsager(spec, alpha, q, psi)?;
    Ok(RsSolution {
        alpha,
        q,
        psi,
        rs_value: rs_free_energy(spec, alpha, q, psi)?,
        annealed_value: annealed(spec, alpha)?,
        beta,
        beta_acute,
        at_value: at_condition(spec, alpha, q, psi)?,
        converged: true,
        residual,
        annealed_branch,
    })
}

/// `RS = -psi (1-q) / 2 + E[log 2cosh(sqrt(psi) Z) + alpha L_q(sqrt(q) Z)]`.
pub fn rs_free_energy(spec: &ActivationSpec, alpha: f64, q: f64, psi: f64) -> Result<f64> {
    let rule = &spec.integrator.rule;
    let sp = psi.sqrt();
    let sq = q.sqrt();
    let spins = expect_g(|z| log_2cosh(sp * z), rule)?;
    let patterns = try_expect_g(|z| l_fn(spec, q, sq * z), rule)?;
    Ok(-0.5 * psi * (1.0 - q) + spins + alpha * patterns)
}

/// `log 2 + alpha log E U(xi)`.
pub fn annealed(spec: &ActivationSpec, alpha: f64) -> Result<f64> {
    Ok(std::f64::consts::LN_2 + alpha * l_fn(spec, 0.0, 0.0)?)
}

/// `(beta, beta_acute)`; fails when `|beta_acute - (1 - q)| > 1e-8`.
pub fn onsager(spec: &ActivationSpec, alpha: f64, q: f64, psi: f64) -> Result<(f64, f64)> {
    let rule = &spec.integrator.rule;
    let sq = q.sqrt();
    let sp = psi.sqrt();
    let beta = alpha * try_expect_g(|z| Ok(f_and_prime(spec, q, sq * z)?.1), rule)?;
    let beta_acute = expect_g(|z| 1.0 - (sp * z).tanh().powi(2), rule)?;
    if (beta_acute - (1.0 - q)).abs() > ONSAGER_TOL {
        return Err(Error::OnsagerIdentity { beta_acute, one_minus_q: 1.0 - q });
    }
    Ok((beta, beta_acute))
}

/// `AT = alpha E[F_q'(sqrt(q) Z)^2] E[tanh'(sqrt(psi) Z)^2]`.
pub fn at_condition(spec: &ActivationSpec, alpha: f64, q: f64, psi: f64) -> Result<f64> {
    let rule = &spec.integrator.rule;
    let sq = q.sqrt();
    let sp = psi.sqrt();
    let f2 = try_expect_g(|z| Ok(f_and_prime(spec, q, sq * z)?.1.powi(2)), rule)?;
    let t2 = expect_g(|z| (1.0 - (sp * z).tanh().powi(2)).powi(2), rule)?;
    Ok(alpha * f2 * t2)
}

/// Whether `mean_score^2 / 2 <= q / alpha <= psi / alpha` holds.
pub fn fp_bounds_hold(spec: &ActivationSpec, sol: &RsSolution) -> bool {
    let lower = 0.5 * mean_score(spec).powi(2);
    let ratio_q = sol.q / sol.alpha;
    let ratio_psi = sol.psi / sol.alpha;
    lower <= ratio_q + 1e-12 && ratio_q <= ratio_psi + 1e-12
}

/// One row of [`rs_eta_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct EtaRow {
    /// Smoothing width.
    pub eta: f64,
    /// Solution, or the solver error for this row.
    pub solution: Result<RsSolution>,
}

/// Solves the fixed point for each `U_eta` in `etas`; failures are kept per row.
pub fn rs_eta_sweep(spec: &ActivationSpec, alpha: f64, etas: &[f64], opts: &SolverOptions) -> Vec<EtaRow> {
    etas.par_iter()
        .map(|&eta| {
            let solution = spec.clone().with_eta(eta).and_then(|s| solve_fixed_point(&s, alpha, opts));
            EtaRow { eta, solution }
        })
        .collect()
}

/// Solves the fixed point for each `alpha`; output order follows the input.
pub fn rs_alpha_sweep(spec: &ActivationSpec, alphas: &[f64], opts: &SolverOptions) -> Vec<Result<RsSolution>> {
    alphas.par_iter().map(|&a| solve_fixed_point(spec, a, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{LN_2, PI};

    fn halfspace() -> ActivationSpec {
        ActivationSpec::halfspace(0.0).unwrap()
    }

    #[test]
    fn qbar_examples() {
        let rule = QuadratureRule::shared(201).unwrap();
        assert_eq!(qbar(0.0, &rule), 0.0);
        let v = qbar(0.01, &rule);
        assert!((0.0098..=0.01).contains(&v), "{v}");
        // Order-1001 rule oracle, computed offline.
        assert_abs_diff_eq!(qbar(1.0, &rule), 0.394_294_490_397_841_3, epsilon = 1e-12);
    }

    #[test]
    fn qbar_inv_round_trips() {
        let rule = QuadratureRule::shared(201).unwrap();
        for &psi in &[1e-4, 0.01, 0.3, 2.0, 10.0] {
            let q = qbar(psi, &rule);
            assert_abs_diff_eq!(qbar_inv(q, &rule).unwrap(), psi, epsilon = 1e-10 * psi.max(1.0));
        }
    }

    #[test]
    fn rbar_examples() {
        assert_abs_diff_eq!(rbar(&halfspace(), 0.0).unwrap(), 2.0 / PI, epsilon = 1e-14);
        let band = ActivationSpec::band(-1.0, 1.0).unwrap();
        assert_abs_diff_eq!(rbar(&band, 0.0).unwrap(), 0.0, epsilon = 1e-15);
        // Dense quadrature oracle, computed offline.
        assert_abs_diff_eq!(rbar(&halfspace(), 0.01).unwrap(), 0.648_956_301_136_048_4, epsilon = 1e-10);
    }

    #[test]
    fn halfspace_fixed_point_matches_picard_oracle() {
        // Damped Picard iteration (damping 0.5) to 1e-12, computed offline.
        let sol = solve_fixed_point(&halfspace(), 0.01, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.q, 0.006_362_700_508_415_5, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.psi, 0.006_444_276_020_440_195, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.rs_value, 0.686_205_539_168_287_4, epsilon = 1e-10);
        assert!(sol.residual <= 1e-12);
        assert!(!sol.annealed_branch);
        assert!(fp_bounds_hold(&halfspace(), &sol));
        assert!((sol.psi / 0.01 - 2.0 / PI).abs() < 0.02);
    }

    #[test]
    fn symmetric_band_takes_annealed_branch() {
        let band = ActivationSpec::band(-1.0, 1.0).unwrap();
        let sol = solve_fixed_point(&band, 0.1, &SolverOptions::default()).unwrap();
        assert_eq!((sol.q, sol.psi), (0.0, 0.0));
        assert!(sol.annealed_branch);
        assert_abs_diff_eq!(sol.rs_value, sol.annealed_value, epsilon = 1e-15);
    }

    #[test]
    fn free_energies_at_zero_density() {
        let h = halfspace();
        assert_abs_diff_eq!(rs_free_energy(&h, 0.0, 0.0, 0.0).unwrap(), LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(annealed(&h, 0.0).unwrap(), LN_2, epsilon = 1e-15);
    }

    #[test]
    fn constant_activation_is_free() {
        let one = ActivationSpec::constant_one();
        let sol = solve_fixed_point(&one, 0.2, &SolverOptions::default()).unwrap();
        assert_eq!((sol.q, sol.psi), (0.0, 0.0));
        assert_abs_diff_eq!(sol.rs_value, LN_2, epsilon = 1e-12);
    }

    #[test]
    fn onsager_examples() {
        let h = halfspace();
        let (b, ba) = onsager(&h, 0.0, 0.0, 0.0).unwrap();
        assert_eq!((b, ba), (0.0, 1.0));
        let (b, _) = onsager(&h, 0.01, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(b, -0.01 * 2.0 / PI, epsilon = 1e-15);
        assert!(matches!(onsager(&h, 0.01, 0.1, 0.0), Err(Error::OnsagerIdentity { .. })));
    }

    #[test]
    fn at_examples() {
        let h = halfspace();
        assert_eq!(at_condition(&h, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(at_condition(&h, 0.01, 0.0, 0.0).unwrap(), 0.01 * (2.0 / PI).powi(2), epsilon = 1e-15);
        let opts = SolverOptions { q_max: 0.5, ..Default::default() };
        let sol = solve_fixed_point(&h, 0.3, &opts).unwrap();
        assert!(sol.at_value < 1.0);
    }

    #[test]
    fn large_alpha_has_no_bracket_on_default_interval() {
        let err = solve_fixed_point(&halfspace(), 0.1, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoBracketingRoot { .. }));
    }

    #[test]
    fn eta_sweep_zero_row_is_exact() {
        let h = halfspace();
        let rows = rs_eta_sweep(&h, 0.01, &[0.0, 0.1], &SolverOptions::default());
        let direct = solve_fixed_point(&h, 0.01, &SolverOptions::default()).unwrap();
        assert_eq!(rows[0].solution.as_ref().unwrap(), &direct);
        let band = ActivationSpec::band(-1.0, 1.0).unwrap();
        for row in rs_eta_sweep(&band, 0.1, &[0.0, 0.2, 1.0], &SolverOptions::default()) {
            let s = row.solution.unwrap();
            assert_abs_diff_eq!(s.rs_value, s.annealed_value, epsilon = 1e-15);
        }
    }

    #[test]
    fn csv_row_has_ten_fields() {
        let sol = solve_fixed_point(&halfspace(), 0.01, &SolverOptions::default()).unwrap();
        assert_eq!(sol.csv_row().split(',').count(), 10);
        assert_eq!(RsSolution::CSV_HEADER.split(',').count(), 10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn fixed_point_invariants(alpha in 0.001f64..0.05, kappa in -0.5f64..0.5) {
            let spec = ActivationSpec::halfspace(kappa).unwrap();
            if let Ok(sol) = solve_fixed_point(&spec, alpha, &SolverOptions::default()) {
                prop_assert!(sol.residual <= 1e-10);
                prop_assert!((sol.beta_acute - (1.0 - sol.q)).abs() <= ONSAGER_TOL);
                prop_assert!(fp_bounds_hold(&spec, &sol));
                prop_assert!(sol.rs_value <= LN_2 + 1e-12);
            }
        }

        #[test]
        fn qbar_slope_bounds(psi in 0.0f64..0.2) {
            let rule = QuadratureRule::shared(201).unwrap();
            let v = qbar(psi, &rule);
            prop_assert!(v <= psi + 1e-15);
            prop_assert!(v >= psi - 2.0 * psi * psi - 1e-15);
        }
    }
}
