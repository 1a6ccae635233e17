//! Conditional-moment functionals, overlap parameters, the tilted measure
//! `Q`, and exact enumeration of the partition function.

mod enumerate;
mod functional;
mod measure;
mod overlap;

use serde::{Deserialize, Serialize};

pub use enumerate::{
    enumerate_logz, experiment_disorder, free_energy_experiment, truncated_log, EnumOptions, EnumerationResult,
    ExperimentOptions, ExperimentRow, DEFAULT_ENUM_CAP, TAU_TRUNC,
};
pub use functional::{
    a2_derivative0, a2_functional, admissible_zeta, default_l_cap, in_n_circ, n_circ_radius, psi2, psi_functional,
    psi_gradient, psi_hessian, varpi_stationarity_target, PsiFunctional,
};
pub use measure::{conditional_first_moment_estimate, n_circ_fraction, q_measure_sample, FirstMomentEstimate};
pub use overlap::{
    j_perp, overlap_params, overlap_params_pair, pair_lambda, pi_star, varpi_of, varpi_star, OverlapParams,
    PairOverlap, DEGENERATE_TOL,
};

/// `eps_bar = e^5 c1 sqrt(alpha)`, capped at `1 / (c1^2 k2)`.
pub fn default_eps_bar(c1: f64, k2: f64, alpha: f64) -> f64 {
    let raw = 5f64.exp() * c1 * alpha.sqrt();
    raw.min(1.0 / (c1 * c1 * k2))
}

/// Streaming `log sum exp` accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    /// Empty accumulator, whose value is minus infinity.
    pub fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    /// Adds `exp(x)`.
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    /// Adds every term of `other`.
    pub fn merge(&mut self, other: &Self) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    /// `log sum exp` of the pushed terms.
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_sum_exp_examples() {
        let mut a = LogSumExp::new();
        assert_eq!(a.value(), f64::NEG_INFINITY);
        a.push(0.0);
        a.push(0.0);
        assert_abs_diff_eq!(a.value(), 2f64.ln(), epsilon = 1e-15);
        let mut b = LogSumExp::new();
        b.push(1000.0);
        b.push(f64::NEG_INFINITY);
        a.merge(&b);
        assert_abs_diff_eq!(a.value(), 1000.0, epsilon = 1e-12);
    }

    #[test]
    fn eps_bar_default() {
        assert_abs_diff_eq!(default_eps_bar(1.0, 1.0, 1e-10), 5f64.exp() * 1e-5, epsilon = 1e-15);
        assert_abs_diff_eq!(default_eps_bar(2.0, 1.0, 0.01), 0.25, epsilon = 1e-15);
    }
}
