//! The product measure `Q` tilted by `H^{(t)}` and the Monte Carlo
//! estimate of the conditional first moment.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSpec;
use crate::amp::{rng_for, AmpTrace};
use crate::error::{Error, Result};
use crate::rs::log_2cosh;

use super::functional::{in_n_circ, PsiFunctional};
use super::LogSumExp;

/// Samples per random stream.
const CHUNK: usize = 1024;

/// `P(J_i = +1) = (1 + tanh H^{(t)}_i) / 2`.
fn plus_probabilities(trace: &AmpTrace) -> Vec<f64> {
    trace.big_h[trace.t].iter().map(|h| 0.5 * (1.0 + h.tanh())).collect()
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(probs) {
        *o = if rng.random::<f64>() < p { 1.0 } else { -1.0 };
    }
}

/// Runs `f` on every sample, chunk by chunk, each chunk with its own stream.
fn for_each_chunk<T, F>(trace: &AmpTrace, n_samples: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut dyn FnMut() -> DVector<f64>, usize) -> T + Sync,
{
    let probs = plus_probabilities(trace);
    let chunks = n_samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut rng = rng_for(seed, 100 + ch as u64);
            let count = CHUNK.min(n_samples - ch * CHUNK);
            let mut buf = DVector::zeros(probs.len());
            let mut next = || {
                draw(&probs, &mut rng, buf.as_mut_slice());
                buf.clone()
            };
            f(&mut next, count)
        })
        .collect()
}

/// Independent samples from `Q`.
pub fn q_measure_sample(trace: &AmpTrace, n_samples: usize, seed: u64) -> Vec<DVector<f64>> {
    for_each_chunk(trace, n_samples, seed, |next, count| (0..count).map(|_| next()).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}

/// Outcome of [`conditional_first_moment_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstMomentEstimate {
    /// Per-spin log estimate, comparable to the RS value.
    pub estimate: f64,
    /// `(1/N) sum_i log 2cosh H^{(t)}_i`.
    pub spin_term: f64,
    /// `(1/N) log mean_Q exp(N Psi(pi(J), varpi(J)))`.
    pub psi_term: f64,
    /// Number of `Q` samples.
    pub samples: usize,
    /// Samples where `Psi` is minus infinity.
    pub infinite: usize,
    /// Mean of `Psi(pi(J), varpi(J))` over the finite samples.
    pub mean_psi: f64,
    /// Perturbation size used.
    pub eps_bar: f64,
    /// Seed of the `Q` samples.
    pub seed: u64,
}

/// Projections `(r[t] / sqrt(N), y[t-1] / N)` stacked into one matrix.
fn projector(trace: &AmpTrace) -> DMatrix<f64> {
    let n = trace.n_spins as f64;
    let t = trace.t;
    let mut p = DMatrix::zeros(2 * t - 1, trace.n_spins);
    for (s, r) in trace.r.iter().enumerate() {
        p.set_row(s, &(r.transpose() / n.sqrt()));
    }
    for (l, y) in trace.y.iter().enumerate() {
        p.set_row(t + l, &(y.transpose() / n));
    }
    p
}

fn split(v: &DVector<f64>, t: usize) -> (DVector<f64>, DVector<f64>) {
    (v.rows(0, t).into_owned(), v.rows(t, t - 1).into_owned())
}

/// Log-domain Monte Carlo estimate of
/// `(1/N) log [prod_i 2cosh H_i  E_Q exp(N Psi(pi(J), varpi(J)))]`.
pub fn conditional_first_moment_estimate(
    spec: &ActivationSpec,
    trace: &AmpTrace,
    eps_bar: f64,
    n_samples: usize,
    seed: u64,
) -> Result<FirstMomentEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("first-moment estimate needs at least one sample".into()));
    }
    let f = PsiFunctional::new(spec, trace, eps_bar)?;
    let proj = projector(trace);
    let n = trace.n_spins as f64;
    let t = trace.t;
    let parts = for_each_chunk(trace, n_samples, seed, |next, count| {
        let mut acc = LogSumExp::new();
        let mut infinite = 0usize;
        let mut psi_sum = 0.0;
        for _ in 0..count {
            let (pi, varpi) = split(&(&proj * next()), t);
            match f.value(&pi, &varpi) {
                Ok(v) => {
                    acc.push(n * v);
                    psi_sum += v;
                }
                Err(Error::FunctionalInfinite { .. }) => infinite += 1,
                Err(Error::InvalidParameter(_)) if pi.norm() >= 1.0 => infinite += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((acc, infinite, psi_sum))
    });
    let mut acc = LogSumExp::new();
    let mut infinite = 0;
    let mut psi_sum = 0.0;
    for part in parts {
        let (a, i, s) = part?;
        acc.merge(&a);
        infinite += i;
        psi_sum += s;
    }
    if infinite == n_samples {
        return Err(Error::FirstMomentDegenerate { samples: n_samples });
    }
    let spin_term = trace.big_h[t].iter().map(|&h| log_2cosh(h)).sum::<f64>() / n;
    let psi_term = (acc.value() - (n_samples as f64).ln()) / n;
    Ok(FirstMomentEstimate {
        estimate: spin_term + psi_term,
        spin_term,
        psi_term,
        samples: n_samples,
        infinite,
        mean_psi: psi_sum / (n_samples - infinite) as f64,
        eps_bar,
        seed,
    })
}

/// Fraction of `Q` samples whose `(pi(J), varpi(J))` lies within `radius`
/// of `(pi_*, varpi_*)`.
pub fn n_circ_fraction(trace: &AmpTrace, radius: f64, n_samples: usize, seed: u64) -> f64 {
    let proj = projector(trace);
    let t = trace.t;
    let ps = super::overlap::pi_star(trace);
    let vs = super::overlap::varpi_star(trace);
    let inside: usize = for_each_chunk(trace, n_samples, seed, |next, count| {
        (0..count)
            .filter(|_| {
                let (pi, varpi) = split(&(&proj * next()), t);
                in_n_circ(&pi, &varpi, &ps, &vs, radius)
            })
            .count()
    })
    .into_iter()
    .sum();
    inside as f64 / n_samples.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::amp_run;
    use crate::rs::{solve_fixed_point, SolverOptions};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn setup(spec: &ActivationSpec, n: usize, seed: u64) -> AmpTrace {
        let sol = solve_fixed_point(spec, 0.05, &SolverOptions::default()).unwrap();
        amp_run(spec, &sol, n, 4, seed).unwrap()
    }

    #[test]
    fn zero_field_is_uniform() {
        let spec = ActivationSpec::halfspace(0.0).unwrap();
        let mut tr = setup(&spec, 200, 1);
        tr.big_h[tr.t] = DVector::zeros(200);
        let samples = q_measure_sample(&tr, 4000, 3);
        let plus: usize = samples.iter().map(|j| j.iter().filter(|&&v| v > 0.0).count()).sum();
        let frac = plus as f64 / (4000.0 * 200.0);
        assert!((frac - 0.5).abs() < 0.005, "{frac}");
    }

    #[test]
    fn sample_means_match_magnetization() {
        let spec = ActivationSpec::halfspace(0.0).unwrap();
        let tr = setup(&spec, 100, 2);
        let n = 100_000;
        let samples = q_measure_sample(&tr, n, 5);
        assert_eq!(samples.len(), n);
        let mut mean = DVector::zeros(100);
        for j in &samples {
            mean += j;
        }
        mean /= n as f64;
        let dev = (&mean - &tr.m[tr.t]).amax();
        assert!(dev <= 4.0 / (n as f64).sqrt(), "{dev}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ActivationSpec::halfspace(0.0).unwrap();
        let tr = setup(&spec, 200, 2);
        assert_eq!(q_measure_sample(&tr, 3000, 9), q_measure_sample(&tr, 3000, 9));
    }

    #[test]
    fn constant_activation_gives_log_two() {
        // U = 1 has no fixed point away from zero, so the halfspace trace supplies the frames.
        let half = ActivationSpec::halfspace(0.0).unwrap();
        let mut tr = setup(&half, 300, 4);
        tr.big_h[tr.t] = DVector::zeros(300);
        let one = ActivationSpec::constant_one();
        let est = conditional_first_moment_estimate(&one, &tr, 0.0, 200, 1).unwrap();
        assert_abs_diff_eq!(est.spin_term, LN_2, epsilon = 1e-13);
        assert_eq!(est.infinite, 0);
        // Only the quadratic terms in varpi survive, and they are O(1/N).
        assert!(est.psi_term.abs() < 0.05, "{}", est.psi_term);
    }

    #[test]
    fn fractions_and_estimates_are_finite() {
        let spec = ActivationSpec::halfspace(0.0).unwrap();
        let tr = setup(&spec, 1000, 6);
        let est = conditional_first_moment_estimate(&spec, &tr, 0.1, 500, 2).unwrap();
        assert!(est.estimate.is_finite());
        assert!(est.estimate <= LN_2 + 0.05);
        assert_eq!(n_circ_fraction(&tr, 10.0, 200, 1), 1.0);
        assert_eq!(n_circ_fraction(&tr, 0.0, 200, 1), 0.0);
    }
}
