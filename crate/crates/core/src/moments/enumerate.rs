//! Exact partition functions by Gray-code enumeration of the hypercube, and
//! the finite-size free-energy experiment built on them.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{eval_u, ActivationSpec};
use crate::amp::rng_for;
use crate::error::{Error, Result};
use crate::rs::{solve_fixed_point, SolverOptions};

use super::LogSumExp;

/// `tau = e^{-12}` of the truncated logarithm `log_{N tau}`.
pub const TAU_TRUNC: f64 = 6.144_212_353_328_21e-6;

/// Default hard cap on `N`.
pub const DEFAULT_ENUM_CAP: usize = 26;

/// Settings of [`enumerate_logz`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumOptions {
    /// Largest admissible `N`.
    pub cap: usize,
    /// Number `k` of leading spins fixed per block; `2^k` blocks.
    pub block_bits: usize,
    /// Seed recorded in the result.
    pub seed: Option<u64>,
}

impl Default for EnumOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_ENUM_CAP, block_bits: 6, seed: None }
    }
}

/// Exact `log Z` of one disorder instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationResult {
    /// Number of spins.
    pub n: usize,
    /// Number of constraints.
    pub m: usize,
    /// Seed of `G`, when known.
    pub seed: Option<u64>,
    /// Activation descriptor.
    pub activation: String,
    /// `log Z`; minus infinity when `Z = 0`.
    pub log_z: f64,
    /// Set when `Z = 0`.
    pub z_is_zero: bool,
    /// `max(-N tau, log Z - N log 2) + N log 2`.
    pub log_z_truncated: f64,
    /// Number of feasible configurations, for indicator activations.
    pub count_feasible: Option<u64>,
    /// Largest single-configuration weight `prod_a U`.
    pub per_config_max_weight: f64,
    /// Elapsed seconds.
    pub wall_time: f64,
}

/// `log_A(x) = max(-A, log x)`.
pub fn truncated_log(log_x: f64, a: f64) -> f64 {
    log_x.max(-a)
}

/// Per-block accumulator.
#[derive(Debug, Clone, Copy)]
struct Block {
    count: u64,
    lse: LogSumExp,
    max_log_w: f64,
}

/// Enumerates every `J` in `{-1, +1}^N` and sums `prod_a U((GJ)_a / sqrt(N))`.
///
/// The last `block_bits` spins are fixed per block; inside a block the
/// remaining spins follow a reflected Gray code so each step flips one spin
/// and updates `GJ` in `O(M)`. Indicator activations are counted exactly.
pub fn enumerate_logz(
    spec: &ActivationSpec,
    g: &DMatrix<f64>,
    tau: f64,
    opts: &EnumOptions,
) -> Result<EnumerationResult> {
    let start = Instant::now();
    let (m, n) = g.shape();
    if n > opts.cap {
        return Err(Error::EnumerationCap { n, cap: opts.cap });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("enumeration needs N >= 1".into()));
    }
    let k = opts.block_bits.min(n);
    let low = n - k;
    let cols: Vec<Vec<f64>> = (0..n).map(|i| g.column(i).iter().copied().collect()).collect();
    let sqrt_n = (n as f64).sqrt();
    let counting = spec.is_indicator();

    let blocks: Vec<Block> = (0..1u64 << k)
        .into_par_iter()
        .map(|b| {
            let mut j = vec![-1.0f64; n];
            for bit in 0..k {
                if b >> bit & 1 == 1 {
                    j[low + bit] = 1.0;
                }
            }
            let mut s = vec![0.0f64; m];
            for (i, col) in cols.iter().enumerate() {
                for (sa, &ga) in s.iter_mut().zip(col) {
                    *sa += ga * j[i];
                }
            }
            let mut block = Block { count: 0, lse: LogSumExp::new(), max_log_w: f64::NEG_INFINITY };
            let mut visit = |s: &[f64]| {
                if counting {
                    if s.iter().all(|&sa| spec.base_eval(sa / sqrt_n) > 0.0) {
                        block.count += 1;
                        block.max_log_w = 0.0;
                    }
                } else {
                    let mut lw = 0.0;
                    for &sa in s {
                        lw += eval_u(spec, sa / sqrt_n).ln();
                    }
                    block.lse.push(lw);
                    block.max_log_w = block.max_log_w.max(lw);
                }
            };
            visit(&s);
            for step in 1..1u64 << low {
                let i = step.trailing_zeros() as usize;
                j[i] = -j[i];
                let d = 2.0 * j[i];
                for (sa, &ga) in s.iter_mut().zip(&cols[i]) {
                    *sa += d * ga;
                }
                visit(&s);
            }
            block
        })
        .collect();

    let mut count = 0u64;
    let mut lse = LogSumExp::new();
    let mut max_log_w = f64::NEG_INFINITY;
    for b in &blocks {
        count += b.count;
        lse.merge(&b.lse);
        max_log_w = max_log_w.max(b.max_log_w);
    }
    let log_z = if counting {
        if count == 0 {
            f64::NEG_INFINITY
        } else {
            (count as f64).ln()
        }
    } else {
        lse.value()
    };
    let nf = n as f64;
    let ln2n = nf * std::f64::consts::LN_2;
    Ok(EnumerationResult {
        n,
        m,
        seed: opts.seed,
        activation: spec.descriptor(),
        log_z,
        z_is_zero: log_z == f64::NEG_INFINITY,
        log_z_truncated: truncated_log(log_z - ln2n, nf * tau) + ln2n,
        count_feasible: counting.then_some(count),
        per_config_max_weight: max_log_w.exp(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// `M x N` Gaussian disorder for sample `index` of size `n` in an experiment.
pub fn experiment_disorder(m: usize, n: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, ((n as u64) << 40) | index);
    DMatrix::from_row_iterator(m, n, (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Settings of [`free_energy_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    /// Truncation depth per spin: samples use `log_{A N}(Z / 2^N)`.
    pub floor_per_spin: f64,
    /// Solver settings for the RS reference.
    pub solver: SolverOptions,
    /// Enumeration settings; the seed field is overwritten per sample.
    pub enumeration: EnumOptions,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { floor_per_spin: 12.0, solver: SolverOptions::default(), enumeration: EnumOptions::default() }
    }
}

/// One row of the free-energy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    /// Number of spins.
    pub n: usize,
    /// `round(alpha N)`.
    pub m: usize,
    /// Disorder samples.
    pub samples: usize,
    /// Mean of `(1/N) log_{A N}(Z / 2^N) + log 2`.
    pub mean_logz_per_spin: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    /// RS free energy at `alpha`.
    pub rs_reference: f64,
    /// `mean - rs_reference`.
    pub deviation: f64,
    /// Samples with `Z = 0`.
    pub zero_z_events: usize,
}

impl ExperimentRow {
    /// CSV header matching [`ExperimentRow::csv_row`].
    pub const CSV_HEADER: &'static str = "N,M,samples,mean_logZ_per_spin,stderr,rs_reference,deviation,zero_Z_events";

    /// One CSV row at 17 significant digits.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            self.n,
            self.m,
            self.samples,
            self.mean_logz_per_spin,
            self.stderr,
            self.rs_reference,
            self.deviation,
            self.zero_z_events
        )
    }
}

/// Mean truncated free energy over fresh disorder for each `N` in `n_list`.
pub fn free_energy_experiment(
    spec: &ActivationSpec,
    alpha: f64,
    n_list: &[usize],
    samples_per_n: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<Vec<ExperimentRow>> {
    if samples_per_n == 0 {
        return Err(Error::InvalidParameter("experiment needs at least one sample per N".into()));
    }
    let rs_reference = solve_fixed_point(spec, alpha, &opts.solver)?.rs_value;
    let ln2 = std::f64::consts::LN_2;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        if n > opts.enumeration.cap {
            return Err(Error::EnumerationCap { n, cap: opts.enumeration.cap });
        }
        let m = (alpha * n as f64).round() as usize;
        let values: Vec<(f64, bool)> = if m == 0 {
            vec![(ln2, false); samples_per_n]
        } else {
            (0..samples_per_n as u64)
                .into_par_iter()
                .map(|s| {
                    let g = experiment_disorder(m, n, seed, s);
                    let eo = EnumOptions { seed: Some(seed), ..opts.enumeration.clone() };
                    let res = enumerate_logz(spec, &g, TAU_TRUNC, &eo)?;
                    let nf = n as f64;
                    let v = truncated_log(res.log_z - nf * ln2, opts.floor_per_spin * nf) / nf + ln2;
                    Ok((v, res.z_is_zero))
                })
                .collect::<Result<_>>()?
        };
        let k = values.len() as f64;
        let mean = values.iter().map(|v| v.0).sum::<f64>() / k;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        rows.push(ExperimentRow {
            n,
            m,
            samples: samples_per_n,
            mean_logz_per_spin: mean,
            stderr: (var / k).sqrt(),
            rs_reference,
            deviation: mean - rs_reference,
            zero_z_events: values.iter().filter(|v| v.1).count(),
        });
    }
    Ok(rows)
}
