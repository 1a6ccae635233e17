//! The first-moment functional `Psi(pi, varpi)` with analytic derivatives,
//! and the pair functional `A_2(lambda | zeta)`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::activation::{ingredients_from, l_fn, ActivationSpec, Tilted};
use crate::amp::{gaussian_vector, AmpTrace};
use crate::error::{Error, Result};

use super::overlap::{pi_star, varpi_star};

/// `Psi` bound to one AMP trace.
///
/// `X(pi, varpi) = x[t]^T pi + sqrt(N) eps_bar c[t-1]^T (varpi - varpi_*)`
/// and `Psi = |w|^2 / (2 c^2) - (varpi_*, varpi) / (1-q) + (1/N) sum_a
/// log N_0(X_a, c)` with `w = (1 - eps_bar) varpi + eps_bar varpi_*`,
/// `c = sqrt(1 - |pi|^2)`.
#[derive(Debug, Clone)]
pub struct PsiFunctional<'a> {
    spec: &'a ActivationSpec,
    /// `x[t]`, `t x M`.
    x: DMatrix<f64>,
    /// `c[t-1]`, `(t-1) x M`.
    cf: DMatrix<f64>,
    /// `pi_*`.
    pub pi_star: DVector<f64>,
    /// `varpi_*`.
    pub varpi_star: DVector<f64>,
    /// Perturbation size.
    pub eps_bar: f64,
    q: f64,
    n: f64,
}

/// Per-coordinate data shared by the value and its derivatives.
struct Fields {
    x: DVector<f64>,
    c: f64,
    w: DVector<f64>,
    tilted: Vec<Tilted>,
}

impl<'a> PsiFunctional<'a> {
    /// Binds `Psi` to a trace.
    pub fn new(spec: &'a ActivationSpec, trace: &AmpTrace, eps_bar: f64) -> Result<Self> {
        if trace.t < 2 {
            return Err(Error::InvalidParameter("Psi needs t >= 2".into()));
        }
        if !eps_bar.is_finite() {
            return Err(Error::InvalidParameter(format!("eps_bar must be finite, got {eps_bar}")));
        }
        Ok(Self {
            spec,
            x: trace.x_stack(),
            cf: trace.c_stack(trace.t - 1),
            pi_star: pi_star(trace),
            varpi_star: varpi_star(trace),
            eps_bar,
            q: trace.sol.q,
            n: trace.n_spins as f64,
        })
    }

    /// Length of `pi`.
    pub fn t(&self) -> usize {
        self.x.nrows()
    }

    /// Field `X(pi, varpi)` in `R^M`.
    pub fn field(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(pi, varpi)?;
        let shift = varpi - &self.varpi_star;
        Ok(self.x.tr_mul(pi) + self.cf.tr_mul(&shift) * (self.n.sqrt() * self.eps_bar))
    }

    fn check_dims(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<()> {
        let t = self.t();
        if pi.len() != t || varpi.len() != t - 1 {
            return Err(Error::InvalidParameter(format!(
                "Psi needs pi in R^{t} and varpi in R^{}, got {} and {}",
                t - 1,
                pi.len(),
                varpi.len()
            )));
        }
        Ok(())
    }

    fn fields(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<Fields> {
        let x = self.field(pi, varpi)?;
        let p2 = pi.norm_squared();
        if !(p2 < 1.0) {
            return Err(Error::InvalidParameter(format!("Psi needs |pi| < 1, got {}", p2.sqrt())));
        }
        let c = (1.0 - p2).sqrt();
        let tilted = x
            .iter()
            .enumerate()
            .map(|(a, &xa)| {
                self.spec.tilted(xa, c).map_err(|e| match e {
                    Error::VanishingMass { .. } => Error::FunctionalInfinite { coord: a },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = varpi * (1.0 - self.eps_bar) + &self.varpi_star * self.eps_bar;
        Ok(Fields { x, c, w, tilted })
    }

    /// `Psi(pi, varpi)`.
    pub fn value(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<f64> {
        let f = self.fields(pi, varpi)?;
        let l_sum: f64 = f.tilted.iter().map(|t| t.mass.ln()).sum();
        Ok(f.w.norm_squared() / (2.0 * f.c * f.c) - self.varpi_star.dot(varpi) / (1.0 - self.q) + l_sum / self.n)
    }

    /// `(d Psi / d pi, d Psi / d varpi)`.
    pub fn gradient(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = self.fields(pi, varpi)?;
        let c2 = f.c * f.c;
        let gx = DVector::from_iterator(f.x.len(), f.tilted.iter().map(|t| t.m1 / f.c));
        let mean_a: f64 = f.tilted.iter().map(|t| t.m2 - 1.0).sum::<f64>() / self.n;
        let w2 = f.w.norm_squared();
        let d_pi = pi * (w2 / (c2 * c2)) + &self.x * &gx / self.n - pi * (mean_a / c2);
        let d_varpi = &f.w * ((1.0 - self.eps_bar) / c2) - &self.varpi_star / (1.0 - self.q)
            + &self.cf * &gx * (self.eps_bar / self.n.sqrt());
        Ok((d_pi, d_varpi))
    }

    /// Hessian in the coordinates `(pi, varpi)`, size `2t - 1`.
    pub fn hessian(&self, pi: &DVector<f64>, varpi: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.fields(pi, varpi)?;
        let t = self.t();
        let d = 2 * t - 1;
        let c = f.c;
        let c2 = c * c;
        let w2 = f.w.norm_squared();
        let e = self.eps_bar;

        let mut h = DMatrix::zeros(d, d);
        let ppt = pi * pi.transpose();
        let p_pp = (DMatrix::identity(t, t) / (c2 * c2) + &ppt * (4.0 / (c2 * c2 * c2))) * w2;
        let p_pv = pi * f.w.transpose() * (2.0 * (1.0 - e) / (c2 * c2));
        h.view_mut((0, 0), (t, t)).copy_from(&p_pp);
        h.view_mut((0, t), (t, t - 1)).copy_from(&p_pv);
        h.view_mut((t, 0), (t - 1, t)).copy_from(&p_pv.transpose());
        h.view_mut((t, t), (t - 1, t - 1)).fill_diagonal((1.0 - e).powi(2) / c2);

        // grad X_a is column a of `dx`; grad c = (-pi / c, 0).
        let mut dx = DMatrix::zeros(d, f.x.len());
        dx.view_mut((0, 0), (t, f.x.len())).copy_from(&self.x);
        dx.view_mut((t, 0), (t - 1, f.x.len())).copy_from(&(&self.cf * (self.n.sqrt() * e)));
        let mut dc = DVector::zeros(d);
        dc.rows_mut(0, t).copy_from(&(-pi / c));

        let mut big_a = DVector::zeros(f.x.len());
        let mut big_b = DVector::zeros(f.x.len());
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for (k, tl) in f.tilted.iter().enumerate() {
            let ing = ingredients_from(tl, c);
            big_a[k] = ing.big_a;
            big_b[k] = ing.big_b;
            sum_a += ing.small_a;
            sum_b += ing.small_b;
        }
        let dxa = DMatrix::from_fn(d, f.x.len(), |i, k| dx[(i, k)] * big_a[k]);
        let mut l_part = &dxa * dx.transpose();
        let xb = &dx * &big_b;
        l_part += &xb * dc.transpose() + &dc * xb.transpose();
        l_part += &dc * dc.transpose() * sum_b;
        let hess_c = -(DMatrix::identity(t, t) / c + &ppt / (c2 * c));
        let mut pp = l_part.view_mut((0, 0), (t, t));
        pp += hess_c * (sum_a / c);
        h += l_part / self.n;
        Ok(h)
    }
}

/// `Psi(pi, varpi)` for a single evaluation.
pub fn psi_functional(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    eps_bar: f64,
    pi: &DVector<f64>,
    varpi: &DVector<f64>,
) -> Result<f64> {
    PsiFunctional::new(spec, trace, eps_bar)?.value(pi, varpi)
}

/// Gradient of [`psi_functional`].
pub fn psi_gradient(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    eps_bar: f64,
    pi: &DVector<f64>,
    varpi: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    PsiFunctional::new(spec, trace, eps_bar)?.gradient(pi, varpi)
}

/// Hessian of [`psi_functional`].
pub fn psi_hessian(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    eps_bar: f64,
    pi: &DVector<f64>,
    varpi: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    PsiFunctional::new(spec, trace, eps_bar)?.hessian(pi, varpi)
}

/// Limit of `d Psi / d varpi_{t-1}` at `(pi_*, varpi_*)`:
/// `eps_bar sqrt(psi) (gamma_{t-1} - sqrt(1 - Gamma_{t-2}))`.
pub fn varpi_stationarity_target(trace: &AmpTrace, eps_bar: f64) -> f64 {
    let t = trace.t;
    let gamma = trace.se.gamma[t - 2];
    let rest = (1.0 - trace.se.gamma_sum(t - 2)).sqrt();
    eps_bar * trace.sol.psi.sqrt() * (gamma - rest)
}

/// Radius `16 c1 sqrt(alpha)` of the neighborhood `N_o` of `(pi_*, varpi_*)`.
pub fn n_circ_radius(c1: f64, alpha: f64) -> f64 {
    16.0 * c1 * alpha.sqrt()
}

/// Whether `max(|pi - pi_*|, |varpi - varpi_*|) <= radius`.
pub fn in_n_circ(
    pi: &DVector<f64>,
    varpi: &DVector<f64>,
    pi_star: &DVector<f64>,
    varpi_star: &DVector<f64>,
    radius: f64,
) -> bool {
    (pi - pi_star).norm().max((varpi - varpi_star).norm()) <= radius
}

/// Default cap `L = 5 c1^2` on `|zeta|^2 / M`.
pub fn default_l_cap(c1: f64) -> f64 {
    5.0 * c1 * c1
}

fn check_cap(zeta: &DVector<f64>, trace: &AmpTrace, l_cap: f64) -> Result<()> {
    if zeta.len() != trace.m_constraints {
        return Err(Error::InvalidParameter(format!(
            "zeta has length {}, need M = {}",
            zeta.len(),
            trace.m_constraints
        )));
    }
    let value = zeta.norm_squared() / trace.m_constraints as f64;
    if value > l_cap {
        return Err(Error::CapViolation { value, cap: l_cap });
    }
    Ok(())
}

/// `A_2(lambda | zeta) = psi (1-q) / (2 (1 - lambda^2)) + (1/N) sum_a
/// L_{q + lambda^2 (1-q)}(h^{(t+1)}_a + sqrt(1-q) lambda zeta_a)`.
pub fn a2_functional(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    lambda: f64,
    zeta: &DVector<f64>,
    l_cap: f64,
) -> Result<f64> {
    if !(lambda.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("A_2 needs |lambda| < 1, got {lambda}")));
    }
    check_cap(zeta, trace, l_cap)?;
    let (q, psi) = (trace.sol.q, trace.sol.psi);
    let q_mod = q + lambda * lambda * (1.0 - q);
    let shift = (1.0 - q).sqrt() * lambda;
    let h = &trace.h[trace.t + 1];
    let mut l_sum = 0.0;
    for (a, (&ha, &za)) in h.iter().zip(zeta.iter()).enumerate() {
        l_sum += l_fn(spec, q_mod, ha + shift * za).map_err(|e| match e {
            Error::VanishingMass { .. } => Error::FunctionalInfinite { coord: a },
            other => other,
        })?;
    }
    Ok(psi * (1.0 - q) / (2.0 * (1.0 - lambda * lambda)) + l_sum / trace.n_spins as f64)
}

/// `d A_2 / d lambda` at zero: `sqrt(1-q) (n^{(t+1)}, zeta) / N`.
pub fn a2_derivative0(trace: &AmpTrace, zeta: &DVector<f64>, l_cap: f64) -> Result<f64> {
    check_cap(zeta, trace, l_cap)?;
    let q = trace.sol.q;
    Ok((1.0 - q).sqrt() * trace.n[trace.t + 1].dot(zeta) / trace.n_spins as f64)
}

/// `Psi_2(lambda | zeta) = Psi(pi_*, varpi_*) - psi (1-q) + A_2(lambda | zeta)`.
pub fn psi2(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    eps_bar: f64,
    lambda: f64,
    zeta: &DVector<f64>,
    l_cap: f64,
) -> Result<f64> {
    let f = PsiFunctional::new(spec, trace, eps_bar)?;
    let base = f.value(&f.pi_star.clone(), &f.varpi_star.clone())?;
    let sol = &trace.sol;
    Ok(base - sol.psi * (1.0 - sol.q) + a2_functional(spec, trace, lambda, zeta, l_cap)?)
}

/// Standard Gaussian in `R^M` with its `c[t-1]` components removed,
/// rescaled onto the cap boundary when `|zeta|^2 / M` exceeds `l_cap`.
pub fn admissible_zeta(trace: &AmpTrace, l_cap: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut z = gaussian_vector(trace.m_constraints, rng);
    for c in &trace.c[..trace.t - 1] {
        let p = c.dot(&z);
        z.axpy(-p, c, 1.0);
    }
    let m = trace.m_constraints as f64;
    let value = z.norm_squared() / m;
    if value > l_cap {
        z *= (l_cap / value).sqrt();
    }
    z
}
