//! AMP on sampled Gaussian disorder, Gram-Schmidt frames, whitened
//! coordinates, and Monte Carlo checks of the Gaussian conditioning
//! identities and of the local-CLT covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};
use crate::gauss::phi;
use crate::rs::RsSolution;
use crate::sevol::{se_run, SeTrace};

/// Identifier of the random source, recorded with every trace.
pub const SAMPLER_ID: &str = "rand_chacha::ChaCha8Rng/rand_distr::StandardNormal(ziggurat)";

/// Pivot threshold factor: Gram-Schmidt fails below `PIVOT_TOL * sqrt(N)`.
pub const PIVOT_TOL: f64 = 1e-10;

/// Deterministic generator for a seed and a stream index.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `M x N` matrix of i.i.d. standard Gaussians, filled row-major.
pub fn sample_gaussian_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, 0);
    DMatrix::from_row_iterator(m, n, (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// A completed AMP run with its frames and whitened coordinates.
///
/// Iterates are indexed by their step: `m[s]` is `m^{(s)}`. Entries of
/// `big_h` and `h` below index 2 are zero placeholders.
#[derive(Debug, Clone)]
pub struct AmpTrace {
    /// Disorder matrix `G`, `M x N`.
    pub g: DMatrix<f64>,
    /// `m^{(0..=t)}`.
    pub m: Vec<DVector<f64>>,
    /// `n^{(0..=t+1)}`.
    pub n: Vec<DVector<f64>>,
    /// `H^{(0..=t)}`.
    pub big_h: Vec<DVector<f64>>,
    /// `h^{(0..=t+1)}`.
    pub h: Vec<DVector<f64>>,
    /// `r^{(1..=t)}`, stored from index 0.
    pub r: Vec<DVector<f64>>,
    /// `c^{(1..=t)}`, stored from index 0.
    pub c: Vec<DVector<f64>>,
    /// Empirical `Lambda_N`, `t x t`.
    pub lambda_n: DMatrix<f64>,
    /// Empirical `Gamma_N`, `(t-1) x (t-1)`.
    pub gamma_n: DMatrix<f64>,
    /// Coefficients of all `t` c-frame vectors, `t x t`.
    pub gamma_n_full: DMatrix<f64>,
    /// Theoretical `Lambda`, `t x t`.
    pub lambda_th: DMatrix<f64>,
    /// Theoretical `Gamma`, `(t-1) x (t-1)`.
    pub gamma_th: DMatrix<f64>,
    /// `x^{(1..=t)}` in `R^M`, stored from index 0.
    pub x: Vec<DVector<f64>>,
    /// `y^{(1..=t-1)}` in `R^N`, stored from index 0.
    pub y: Vec<DVector<f64>>,
    /// State evolution used for whitening.
    pub se: SeTrace,
    /// Fixed point driving the iteration.
    pub sol: RsSolution,
    /// Seed of the disorder.
    pub seed: u64,
    /// Number of spins.
    pub n_spins: usize,
    /// Number of constraints.
    pub m_constraints: usize,
    /// Number of AMP steps.
    pub t: usize,
}

fn stack(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, |v| v.len());
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

impl AmpTrace {
    /// `r[t]`, `t x N`.
    pub fn r_stack(&self) -> DMatrix<f64> {
        stack(&self.r)
    }

    /// `c[k]`, `k x M`.
    pub fn c_stack(&self, k: usize) -> DMatrix<f64> {
        stack(&self.c[..k])
    }

    /// `n[k]` with rows `n^{(1..=k)}`, `k x M`.
    pub fn n_stack(&self, k: usize) -> DMatrix<f64> {
        stack(&self.n[1..=k])
    }

    /// `m[k]` with rows `m^{(1..=k)}`, `k x N`.
    pub fn m_stack(&self, k: usize) -> DMatrix<f64> {
        stack(&self.m[1..=k])
    }

    /// `h[t]` with rows `h^{(2..=t+1)}`, `t x M`.
    pub fn h_stack(&self) -> DMatrix<f64> {
        stack(&self.h[2..=self.t + 1])
    }

    /// `H[t-1]` with rows `H^{(2..=t)}`, `(t-1) x N`.
    pub fn big_h_stack(&self) -> DMatrix<f64> {
        stack(&self.big_h[2..=self.t])
    }

    /// `x[t]`, `t x M`.
    pub fn x_stack(&self) -> DMatrix<f64> {
        stack(&self.x)
    }

    /// `y[t-1]`, `(t-1) x N`.
    pub fn y_stack(&self) -> DMatrix<f64> {
        stack(&self.y)
    }
}

/// Modified Gram-Schmidt with one reorthogonalization pass.
///
/// Returns the orthonormal vectors and the lower-triangular coefficient
/// matrix `C` with `v_i = sum_j C_ij e_j`.
pub fn gram_schmidt(vs: &[DVector<f64>], pivot: f64) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    let k = vs.len();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut coef = DMatrix::zeros(k, k);
    for (i, v) in vs.iter().enumerate() {
        let mut w = v.clone();
        for _ in 0..2 {
            for (j, e) in basis.iter().enumerate() {
                let p = w.dot(e);
                w.axpy(-p, e, 1.0);
                coef[(i, j)] += p;
            }
        }
        let norm = w.norm();
        if !(norm >= pivot) {
            return Err(Error::Collinearity { step: i + 1, residual: norm });
        }
        coef[(i, i)] = norm;
        basis.push(w / norm);
    }
    Ok((basis, coef))
}

/// Solves `L X = B` for lower-triangular `L`.
fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular matrix with positive diagonal")
}

/// Runs AMP for `t` steps on a fresh `G` after computing state evolution.
pub fn amp_run(spec: &ActivationSpec, sol: &RsSolution, n: usize, t: usize, seed: u64) -> Result<AmpTrace> {
    let se = se_run(spec, sol, t.max(2), 0.0)?;
    amp_run_with_se(spec, sol, &se, n, t, seed)
}

/// Runs AMP for `t` steps using a precomputed state evolution of length `>= t`.
pub fn amp_run_with_se(
    spec: &ActivationSpec,
    sol: &RsSolution,
    se: &SeTrace,
    n: usize,
    t: usize,
    seed: u64,
) -> Result<AmpTrace> {
    let m_count = (sol.alpha * n as f64).round() as usize;
    if n < 16 || m_count < 1 {
        return Err(Error::InvalidParameter(format!("AMP needs N >= 16 and M >= 1, got N = {n}, M = {m_count}")));
    }
    if t < 2 {
        return Err(Error::InvalidParameter(format!("AMP needs t >= 2, got {t}")));
    }
    if !(sol.q > 0.0 && sol.psi > 0.0) {
        return Err(Error::DegenerateFixedPoint { q: sol.q, psi: sol.psi });
    }
    if se.t + 1 < t {
        return Err(Error::InvalidParameter(format!("state evolution has {} steps, need {}", se.t, t - 1)));
    }
    let g = sample_gaussian_matrix(m_count, n, seed);
    let gt = g.transpose();
    let sqrt_n = (n as f64).sqrt();
    let f = |x: f64| crate::activation::f_fn(spec, sol.q, x);

    let mut m = vec![DVector::zeros(n), DVector::from_element(n, sol.q.sqrt())];
    let mut nn = vec![DVector::zeros(m_count), DVector::from_element(m_count, (sol.psi / sol.alpha).sqrt())];
    let mut big_h = vec![DVector::zeros(n), DVector::zeros(n)];
    let mut h = vec![DVector::zeros(m_count), DVector::zeros(m_count)];
    for s in 1..=t {
        let hs = &g * &m[s] / sqrt_n - &nn[s - 1] * sol.beta_acute;
        let ns: Vec<f64> = hs.iter().map(|&v| f(v)).collect::<Result<_>>()?;
        h.push(hs);
        nn.push(DVector::from_vec(ns));
        if s < t {
            let hs_big = &gt * &nn[s] / sqrt_n - &m[s - 1] * sol.beta;
            m.push(hs_big.map(f64::tanh));
            big_h.push(hs_big);
        }
    }

    let pivot = PIVOT_TOL * sqrt_n;
    let (r, coef_m) = gram_schmidt(&m[1..=t], pivot)?;
    let (c, coef_n) = gram_schmidt(&nn[1..=t], pivot)?;
    let lambda_n = coef_m / (n as f64 * sol.q).sqrt();
    let gamma_n_full = coef_n / (n as f64 * sol.psi).sqrt();
    let gamma_n = gamma_n_full.view((0, 0), (t - 1, t - 1)).into_owned();

    let lambda_th = se.lambda_matrix(t);
    let gamma_th = se.gamma_matrix(t);
    let h_stack = stack(&h[2..=t + 1]) / sol.q.sqrt();
    let x_mat = solve_lower(&lambda_th, &h_stack);
    let big_h_stack = stack(&big_h[2..=t]) / sol.psi.sqrt();
    let y_mat = solve_lower(&gamma_th, &big_h_stack);
    let x = (0..t).map(|i| x_mat.row(i).transpose()).collect();
    let y = (0..t - 1).map(|i| y_mat.row(i).transpose()).collect();

    Ok(AmpTrace {
        g,
        m,
        n: nn,
        big_h,
        h,
        r,
        c,
        lambda_n,
        gamma_n,
        gamma_n_full,
        lambda_th,
        gamma_th,
        x,
        y,
        se: se.clone(),
        sol: sol.clone(),
        seed,
        n_spins: n,
        m_constraints: m_count,
        t,
    })
}

/// One line of a deviation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    /// Name of the compared quantity.
    pub quantity: String,
    /// State-evolution prediction.
    pub predicted: f64,
    /// Value measured on the trace.
    pub empirical: f64,
    /// `|predicted - empirical|`.
    pub abs_dev: f64,
}

impl CheckRow {
    fn new(quantity: String, predicted: f64, empirical: f64) -> Self {
        Self { quantity, predicted, empirical, abs_dev: (predicted - empirical).abs() }
    }

    /// CSV header matching [`CheckRow::csv_row`].
    pub const CSV_HEADER: &'static str = "quantity,predicted,empirical,abs_dev";

    /// One CSV row at 17 significant digits.
    pub fn csv_row(&self) -> String {
        format!("{},{:.16e},{:.16e},{:.16e}", self.quantity, self.predicted, self.empirical, self.abs_dev)
    }
}

/// Largest deviation among rows whose name starts with `prefix`.
pub fn max_dev(rows: &[CheckRow], prefix: &str) -> f64 {
    rows.iter().filter(|r| r.quantity.starts_with(prefix)).map(|r| r.abs_dev).fold(0.0, f64::max)
}

/// Compares a trace with its state-evolution predictions.
pub fn se_check(trace: &AmpTrace) -> Vec<CheckRow> {
    let t = trace.t;
    let nf = trace.n_spins as f64;
    let (q, psi) = (trace.sol.q, trace.sol.psi);
    let mut rows = Vec::new();
    let llt = &trace.lambda_th * trace.lambda_th.transpose();
    for r in 1..=t {
        for s in r..=t {
            let emp = trace.m[r].dot(&trace.m[s]) / (nf * q);
            let name = if r == s { format!("m_norm_{r}") } else { format!("m_overlap_{r}_{s}") };
            rows.push(CheckRow::new(name, llt[(r - 1, s - 1)], emp));
        }
    }
    let ggt = &trace.gamma_th * trace.gamma_th.transpose();
    for r in 1..t {
        for s in r..t {
            let emp = trace.n[r].dot(&trace.n[s]) / (nf * psi);
            let name = if r == s { format!("n_norm_{r}") } else { format!("n_overlap_{r}_{s}") };
            rows.push(CheckRow::new(name, ggt[(r - 1, s - 1)], emp));
        }
    }
    for i in 0..t {
        for j in 0..=i {
            rows.push(CheckRow::new(
                format!("lambda_n_{}_{}", i + 1, j + 1),
                trace.lambda_th[(i, j)],
                trace.lambda_n[(i, j)],
            ));
        }
    }
    for i in 0..t - 1 {
        for j in 0..=i {
            rows.push(CheckRow::new(
                format!("gamma_n_{}_{}", i + 1, j + 1),
                trace.gamma_th[(i, j)],
                trace.gamma_n[(i, j)],
            ));
        }
    }
    // y[t-1] m[t]^T / (N sqrt(q)) against (0, sqrt(psi/q) (1-q) Gamma^T).
    let scale = (psi / q).sqrt() * (1.0 - q);
    for l in 0..t - 1 {
        for k in 1..=t {
            let emp = trace.y[l].dot(&trace.m[k]) / (nf * q.sqrt());
            let pred = if k == 1 { 0.0 } else { scale * trace.gamma_th[(k - 2, l)] };
            rows.push(CheckRow::new(format!("m_dot_y_{}_{}", k, l + 1), pred, emp));
        }
    }
    let mf = trace.m_constraints as f64;
    for i in 0..t {
        for j in i..t {
            let emp = trace.x[i].dot(&trace.x[j]) / mf;
            rows.push(CheckRow::new(format!("x_cov_{}_{}", i + 1, j + 1), f64::from(u8::from(i == j)), emp));
        }
    }
    rows
}

/// `Gamma(r, c, G r, G^T c) = (G r) r^T + c (G^T c)^T - (c^T G r) c r^T`.
pub fn condition_project(g: &DMatrix<f64>, r: &DVector<f64>, c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (nr, nc) = (r.norm(), c.norm());
    if (nr - 1.0).abs() > 1e-10 || (nc - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm_r: nr, norm_c: nc });
    }
    let gr = g * r;
    let gtc = g.transpose() * c;
    let cgr = c.dot(&gr);
    Ok(&gr * r.transpose() + c * gtc.transpose() - c * r.transpose() * cgr)
}

/// Outcome of [`conditioning_mc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    /// Number of fresh matrices.
    pub samples: usize,
    /// Largest `|mean| / SE` of the residual `G - Gamma` entries.
    pub max_z_mean: f64,
    /// Largest `|cov| / SE` between residual entries and `(G r, G^T c)`.
    pub max_z_cov: f64,
    /// Number of standardized statistics examined.
    pub tests: usize,
}

impl ConditioningReport {
    /// Whether every statistic is within `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.max_z_mean <= k && self.max_z_cov <= k
    }
}

fn random_unit(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v / norm
}

/// Monte Carlo check that `E[G | G r, G^T c] = Gamma(r, c, G r, G^T c)`.
///
/// For Gaussian `G` the residual `G - Gamma` must have zero mean and be
/// uncorrelated with every coordinate of `G r` and `G^T c`; joint Gaussianity
/// then makes it independent, which is the conditional-mean statement.
pub fn conditioning_mc(m: usize, n: usize, samples: usize, seed: u64) -> Result<ConditioningReport> {
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let mut rng = rng_for(seed, 0);
    let r = random_unit(n, &mut rng);
    let c = random_unit(m, &mut rng);
    let k = m + n;
    let chunks = 64usize;
    let per = samples.div_ceil(chunks);
    // Per-chunk sums of residual, residual^2, and residual x conditioning vector.
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>, usize)> = (0
        ..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut rng = rng_for(seed, 1 + ch as u64);
            let count = per.min(samples.saturating_sub(ch * per));
            let mut s1 = DMatrix::zeros(m, n);
            let mut s2 = DMatrix::zeros(m, n);
            let mut sxy = DMatrix::zeros(m * n, k);
            let mut sxy2 = DMatrix::zeros(m * n, k);
            let mut sc = DVector::zeros(k);
            let mut sc2 = DVector::zeros(k);
            for _ in 0..count {
                let g = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let res = &g - condition_project(&g, &r, &c).expect("unit vectors");
                let cond = DVector::from_iterator(k, (&g * &r).iter().chain((g.transpose() * &c).iter()).copied());
                for (idx, &e) in res.iter().enumerate() {
                    s1[idx] += e;
                    s2[idx] += e * e;
                    for (j, &v) in cond.iter().enumerate() {
                        let p = e * v;
                        sxy[(idx, j)] += p;
                        sxy2[(idx, j)] += p * p;
                    }
                }
                sc += &cond;
                sc2 += cond.component_mul(&cond);
            }
            (s1, s2, sxy, sxy2, sc, sc2, count)
        })
        .collect();
    let mut s1 = DMatrix::zeros(m, n);
    let mut s2 = DMatrix::zeros(m, n);
    let mut sxy = DMatrix::zeros(m * n, k);
    let mut sxy2 = DMatrix::zeros(m * n, k);
    let mut total = 0usize;
    for (a, b, c1, d, _, _, cnt) in &partial {
        s1 += a;
        s2 += b;
        sxy += c1;
        sxy2 += d;
        total += cnt;
    }
    let nf = total as f64;
    let mut max_z_mean: f64 = 0.0;
    for (a, b) in s1.iter().zip(s2.iter()) {
        let mean = a / nf;
        let var = b / nf - mean * mean;
        if var > 1e-24 {
            max_z_mean = max_z_mean.max(mean.abs() / (var / nf).sqrt());
        }
    }
    // The conditioning variables and residuals have mean zero by symmetry,
    // so E[res * cond] is the covariance.
    let mut max_z_cov: f64 = 0.0;
    for (a, b) in sxy.iter().zip(sxy2.iter()) {
        let mean = a / nf;
        let var = b / nf - mean * mean;
        if var > 1e-24 {
            max_z_cov = max_z_cov.max(mean.abs() / (var / nf).sqrt());
        }
    }
    Ok(ConditioningReport { samples: total, max_z_mean, max_z_cov, tests: m * n * (1 + k) })
}

/// Outcome of [`resample_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    /// `max_s |R r^{(s)}|_inf` and `max_s |R^T c^{(s)}|_inf`.
    pub annihilation: f64,
    /// Mean of `(u^T R v)^2` over random unit `u`, `v` orthogonal to the frames.
    pub second_moment: f64,
    /// Number of random direction pairs.
    pub samples: usize,
}

impl ResampleReport {
    /// `|second_moment - 1| <= 5 / sqrt(samples)` and annihilation below `1e-8`.
    pub fn passes(&self) -> bool {
        self.annihilation <= 1e-8 && (self.second_moment - 1.0).abs() <= 5.0 / (self.samples as f64).sqrt()
    }
}

fn project_out(v: &mut DVector<f64>, frame: &[DVector<f64>]) {
    for _ in 0..2 {
        for e in frame {
            let p = v.dot(e);
            v.axpy(-p, e, 1.0);
        }
    }
}

/// Residual `G - sum_s Gamma^{(s)}` after peeling off every frame pair.
pub fn resample_residual(trace: &AmpTrace) -> DMatrix<f64> {
    let mut g = trace.g.clone();
    for (r, c) in trace.r.iter().zip(&trace.c) {
        let p = condition_project(&g, r, c).expect("orthonormal frames");
        g -= p;
    }
    g
}

/// Checks that the residual annihilates the frames and behaves like an
/// independent standard Gaussian matrix on their orthogonal complement.
pub fn resample_check(trace: &AmpTrace, samples: usize, seed: u64) -> ResampleReport {
    let res = resample_residual(trace);
    let mut annihilation: f64 = 0.0;
    for r in &trace.r {
        annihilation = annihilation.max((&res * r).amax());
    }
    for c in &trace.c {
        annihilation = annihilation.max((res.transpose() * c).amax());
    }
    let chunks = 64usize;
    let per = samples.div_ceil(chunks);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut rng = rng_for(seed, 1 + ch as u64);
            let count = per.min(samples.saturating_sub(ch * per));
            let mut acc = 0.0;
            for _ in 0..count {
                let mut u = DVector::from_fn(trace.m_constraints, |_, _| rng.sample::<f64, _>(StandardNormal));
                project_out(&mut u, &trace.c);
                u /= u.norm();
                let mut v = DVector::from_fn(trace.n_spins, |_, _| rng.sample::<f64, _>(StandardNormal));
                project_out(&mut v, &trace.r);
                v /= v.norm();
                let w = res.tr_mul(&u);
                acc += w.dot(&v).powi(2);
            }
            acc
        })
        .collect();
    let total: f64 = sums.iter().sum();
    ResampleReport { annihilation, second_moment: total / samples as f64, samples }
}

/// Overlap vector `pi(J) = r[t] J / sqrt(N)`.
pub fn pi_of(trace: &AmpTrace, j: &DVector<f64>) -> DVector<f64> {
    let sn = (trace.n_spins as f64).sqrt();
    DVector::from_iterator(trace.t, trace.r.iter().map(|r| r.dot(j) / sn))
}

/// `pi_hat = Lambda_N^{-T} pi`.
pub fn pi_hat_of(trace: &AmpTrace, pi: &DVector<f64>) -> DVector<f64> {
    trace.lambda_n.transpose().solve_upper_triangular(pi).expect("positive diagonal")
}

/// Field `X_{J,tau}` and width `c(pi(J))` of the local CLT.
pub fn clt_field(trace: &AmpTrace, j: &DVector<f64>, tau: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let t = trace.t;
    if tau.len() != t - 1 {
        return Err(Error::InvalidParameter(format!("tau must have length {}", t - 1)));
    }
    let pi = pi_of(trace, j);
    let pn2 = pi.norm_squared();
    if pn2 > 0.64 + 1e-12 {
        return Err(Error::InvalidParameter(format!("local CLT needs |pi(J)| <= 4/5, got {}", pn2.sqrt())));
    }
    let c = (1.0 - pn2).sqrt();
    let (q, psi) = (trace.sol.q, trace.sol.psi);
    let pi_hat = pi_hat_of(trace, &pi);
    let pi_acute = pi_hat.rows(1, t - 1).into_owned();
    let tau_part = trace.gamma_n.solve_lower_triangular(tau).expect("positive diagonal");
    let coef = pi_acute * ((1.0 - q) / q.sqrt()) + tau_part * (c / psi.sqrt());
    let x = trace.h_stack().tr_mul(&pi_hat) / q.sqrt() + trace.n_stack(t - 1).tr_mul(&coef);
    Ok((x, c))
}

/// `Sigma = (1/N) sum_a Var(zeta_a) n_a n_a^T`; coordinates with vanishing
/// mass are skipped, failing when more than 1% are.
pub fn sigma_cov(spec: &ActivationSpec, trace: &AmpTrace, j: &DVector<f64>, tau: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (x, c) = clt_field(trace, j, tau)?;
    let t = trace.t;
    let ns = trace.n_stack(t - 1);
    let mut sigma = DMatrix::zeros(t - 1, t - 1);
    let mut skipped = 0;
    for a in 0..trace.m_constraints {
        match spec.tilted(x[a], c) {
            Ok(tl) => {
                let col = ns.column(a);
                sigma += col * col.transpose() * tl.var();
            }
            Err(Error::VanishingMass { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    check_skipped(skipped, trace.m_constraints)?;
    Ok(sigma / trace.n_spins as f64)
}

fn check_skipped(skipped: usize, total: usize) -> Result<()> {
    if skipped * 100 > total {
        return Err(Error::TooManySkipped { skipped, total });
    }
    Ok(())
}

/// Tabulated inverse CDF of the density proportional to `U(x + c z) phi(z)`.
struct InverseCdf {
    zs: Vec<f64>,
    cdf: Vec<f64>,
}

const CDF_POINTS: usize = 4096;
const CDF_RANGE: f64 = 10.0;

impl InverseCdf {
    fn new(spec: &ActivationSpec, x: f64, c: f64) -> Option<Self> {
        let step = 2.0 * CDF_RANGE / (CDF_POINTS - 1) as f64;
        let zs: Vec<f64> = (0..CDF_POINTS).map(|i| -CDF_RANGE + step * i as f64).collect();
        let dens: Vec<f64> = zs.iter().map(|&z| crate::activation::eval_u(spec, x + c * z) * phi(z)).collect();
        let mut cdf = vec![0.0; CDF_POINTS];
        for i in 1..CDF_POINTS {
            cdf[i] = cdf[i - 1] + 0.5 * step * (dens[i] + dens[i - 1]);
        }
        let total = cdf[CDF_POINTS - 1];
        if !(total >= spec.mass_floor()) || total < 1e-14 {
            return None;
        }
        for v in cdf.iter_mut() {
            *v /= total;
        }
        Some(Self { zs, cdf })
    }

    fn sample(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&v| v < u).clamp(1, CDF_POINTS - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.zs[i - 1] + w * (self.zs[i] - self.zs[i - 1])
    }
}

/// Outcome of [`clt_cov_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    /// Predicted covariance `Sigma`.
    pub sigma: DMatrix<f64>,
    /// Empirical covariance of `W`.
    pub empirical: DMatrix<f64>,
    /// `max |Cov_emp(W) - Sigma|`.
    pub max_abs_dev: f64,
    /// Smallest eigenvalue of `Sigma`.
    pub min_eig: f64,
    /// Largest eigenvalue of `Sigma`.
    pub max_eig: f64,
    /// Coordinates skipped for vanishing mass.
    pub skipped: usize,
    /// Number of samples of `W`.
    pub samples: usize,
}

/// Samples `W = n[t-1](zeta - E zeta) / sqrt(N)` with independent
/// `zeta_a` drawn by inverse CDF, and compares its covariance with `Sigma`.
pub fn clt_cov_check(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    j: &DVector<f64>,
    tau: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<CltReport> {
    let (x, c) = clt_field(trace, j, tau)?;
    let t = trace.t;
    let k = t - 1;
    let ns = trace.n_stack(k);
    let mut tables: std::collections::BTreeMap<i64, Option<InverseCdf>> = std::collections::BTreeMap::new();
    let mut coords = Vec::new();
    let mut skipped = 0;
    for a in 0..trace.m_constraints {
        let key = (x[a] * 1e3).round() as i64;
        let table = tables.entry(key).or_insert_with(|| InverseCdf::new(spec, key as f64 * 1e-3, c));
        match (table.is_some(), spec.tilted(x[a], c)) {
            (true, Ok(tl)) => coords.push((a, key, tl.m1)),
            _ => skipped += 1,
        }
    }
    check_skipped(skipped, trace.m_constraints)?;
    let sigma = sigma_cov(spec, trace, j, tau)?;
    let sn = (trace.n_spins as f64).sqrt();
    let chunks = 64usize;
    let per = samples.div_ceil(chunks);
    let partial: Vec<(DVector<f64>, DMatrix<f64>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut rng = rng_for(seed, 1 + ch as u64);
            let count = per.min(samples.saturating_sub(ch * per));
            let mut s1 = DVector::zeros(k);
            let mut s2 = DMatrix::zeros(k, k);
            for _ in 0..count {
                let mut w = DVector::zeros(k);
                for &(a, key, mean) in &coords {
                    let table = tables[&key].as_ref().expect("checked above");
                    let z = table.sample(rng.random::<f64>());
                    w.axpy((z - mean) / sn, &ns.column(a), 1.0);
                }
                s1 += &w;
                s2 += &w * w.transpose();
            }
            (s1, s2, count)
        })
        .collect();
    let mut s1 = DVector::zeros(k);
    let mut s2 = DMatrix::zeros(k, k);
    for (a, b, _) in &partial {
        s1 += a;
        s2 += b;
    }
    let nf = samples as f64;
    let mean = s1 / nf;
    let empirical = s2 / nf - &mean * mean.transpose();
    let max_abs_dev = (&empirical - &sigma).amax();
    let eig = sigma.clone().symmetric_eigenvalues();
    Ok(CltReport {
        min_eig: eig.min(),
        max_eig: eig.max(),
        sigma,
        empirical,
        max_abs_dev,
        skipped,
        samples,
    })
}

/// Samples `n` independent standard normals into a vector.
pub fn gaussian_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rs::{solve_fixed_point, SolverOptions};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn small_trace(n: usize, seed: u64) -> (ActivationSpec, AmpTrace) {
        let spec = ActivationSpec::halfspace(0.0).unwrap();
        let sol = solve_fixed_point(&spec, 0.05, &SolverOptions::default()).unwrap();
        let trace = amp_run(&spec, &sol, n, 4, seed).unwrap();
        (spec, trace)
    }

    #[test]
    fn first_step_has_no_correction() {
        let (_, tr) = small_trace(400, 1);
        let want = tr.g.transpose() * &tr.n[1] / (400f64).sqrt();
        assert!((&tr.big_h[2] - want).amax() == 0.0);
        assert_eq!(tr.m[0].amax(), 0.0);
        assert_abs_diff_eq!(tr.m[1][0], tr.sol.q.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn frames_are_orthonormal_and_reconstruct() {
        let (_, tr) = small_trace(400, 2);
        for (i, a) in tr.r.iter().enumerate() {
            for (j, b) in tr.r.iter().enumerate() {
                assert_abs_diff_eq!(a.dot(b), f64::from(u8::from(i == j)), epsilon = 1e-10);
            }
        }
        for (i, a) in tr.c.iter().enumerate() {
            for (j, b) in tr.c.iter().enumerate() {
                assert_abs_diff_eq!(a.dot(b), f64::from(u8::from(i == j)), epsilon = 1e-10);
            }
        }
        let recon = &tr.lambda_n * tr.r_stack();
        let direct = tr.m_stack(tr.t) / (tr.n_spins as f64 * tr.sol.q).sqrt();
        assert!((recon - direct).amax() < 1e-12);
        for s in 1..=tr.t {
            assert!(tr.m[s].amax() < 1.0);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, a) = small_trace(200, 9);
        let (_, b) = small_trace(200, 9);
        assert_eq!(a.g, b.g);
        assert_eq!(a.m, b.m);
    }

    #[test]
    fn whitening_inverts_theoretical_matrices() {
        let (_, tr) = small_trace(400, 3);
        let back = &tr.lambda_th * tr.x_stack() * tr.sol.q.sqrt();
        assert!((back - tr.h_stack()).amax() < 1e-9);
        let back = &tr.gamma_th * tr.y_stack() * tr.sol.psi.sqrt();
        assert!((back - tr.big_h_stack()).amax() < 1e-9);
    }

    #[test]
    fn gram_schmidt_detects_collinearity() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let err = gram_schmidt(&[v.clone(), v * 2.0], 1e-8).unwrap_err();
        assert!(matches!(err, Error::Collinearity { step: 2, .. }));
    }

    #[test]
    fn condition_project_coordinate_case() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let p = condition_project(&g, &r, &c).unwrap();
        let want = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(p, want);
        let bad = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        assert!(matches!(condition_project(&g, &bad, &c), Err(Error::NotUnit { .. })));
    }

    #[test]
    fn conditioning_mc_small() {
        let rep = conditioning_mc(2, 3, 20_000, 5).unwrap();
        assert!(rep.within(4.5), "{rep:?}");
    }

    #[test]
    fn resample_residual_annihilates_frames() {
        let (_, tr) = small_trace(400, 4);
        let rep = resample_check(&tr, 2000, 7);
        assert!(rep.annihilation <= 1e-8, "{}", rep.annihilation);
        assert!(rep.passes(), "{rep:?}");
    }

    #[test]
    fn clt_sigma_for_constant_activation_is_gram() {
        let (_, tr) = small_trace(400, 5);
        let one = ActivationSpec::constant_one();
        let j = DVector::from_fn(400, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
        let tau = DVector::zeros(tr.t - 1);
        let sigma = sigma_cov(&one, &tr, &j, &tau).unwrap();
        let ns = tr.n_stack(tr.t - 1);
        let want = &ns * ns.transpose() / 400.0;
        assert!((sigma - want).amax() < 1e-9);
    }

    #[test]
    fn se_check_reports_first_iterate_norm() {
        let (_, tr) = small_trace(400, 6);
        let rows = se_check(&tr);
        let first = rows.iter().find(|r| r.quantity == "m_norm_1").unwrap();
        assert_abs_diff_eq!(first.empirical, 1.0, epsilon = 1e-12);
        assert_eq!(max_dev(&rows, "m_dot_y_1_"), rows.iter().filter(|r| r.quantity.starts_with("m_dot_y_1_")).map(|r| r.abs_dev).fold(0.0, f64::max));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn projection_reproduces_conditioning_data(seed in 0u64..1000) {
            let mut rng = rng_for(seed, 3);
            let g = DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = random_unit(5, &mut rng);
            let c = random_unit(3, &mut rng);
            let p = condition_project(&g, &r, &c).unwrap();
            prop_assert!((&p * &r - &g * &r).amax() < 1e-12);
            prop_assert!((p.transpose() * &c - g.transpose() * &c).amax() < 1e-12);
        }
    }
}
