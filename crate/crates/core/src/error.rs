//! Error type shared by every module.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failures reported by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An integrand returned NaN or an infinity at a quadrature node.
    #[error("non-finite integrand at node {node}")]
    NonFiniteIntegrand { node: f64 },

    /// The Gaussian mass `E U(x + c xi)` fell below the configured floor.
    #[error("vanishing tilted mass: denominator {mass:e} below floor {floor:e} (x = {x}, c = {c})")]
    VanishingMass { mass: f64, floor: f64, x: f64, c: f64 },

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The fixed-point root function does not change sign on the search interval.
    #[error("no bracketing root on [{lo}, {hi}]: g(lo) = {g_lo:e}, g(hi) = {g_hi:e}")]
    NoBracketingRoot { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },

    /// The scan found more than one sign change of the root function.
    #[error("multiple roots detected in brackets {brackets:?}")]
    MultipleRoots { brackets: Vec<(f64, f64)> },

    /// The identity `beta_acute = 1 - q` failed beyond tolerance.
    #[error("Onsager identity violated: beta_acute = {beta_acute}, 1 - q = {one_minus_q}")]
    OnsagerIdentity { beta_acute: f64, one_minus_q: f64 },

    /// The fixed point is `(0, 0)` so the recursions are undefined.
    #[error("degenerate fixed point (annealed branch): q = {q}, psi = {psi}")]
    DegenerateFixedPoint { q: f64, psi: f64 },

    /// A cumulative sum of squares reached one before convergence was declared.
    #[error("state-evolution degeneracy at step {step}: value {value}")]
    StateEvolutionDegeneracy { step: usize, value: f64 },

    /// Gram-Schmidt met a residual below the pivot threshold.
    #[error("iterate collinearity at step {step}: residual norm {residual:e}")]
    Collinearity { step: usize, residual: f64 },

    /// Conditioning vectors were not unit vectors.
    #[error("conditioning vectors must be unit: |r| = {norm_r}, |c| = {norm_c}")]
    NotUnit { norm_r: f64, norm_c: f64 },

    /// The configuration lies in the span of the magnetization iterates.
    #[error("degenerate configuration: component orthogonal to the iterates vanishes")]
    DegenerateConfiguration,

    /// The functional is minus infinity because a coordinate has no mass.
    #[error("functional is -inf at coordinate {coord}")]
    FunctionalInfinite { coord: usize },

    /// A vector exceeded its norm cap.
    #[error("cap violation: |zeta|^2 / M = {value} exceeds cap L = {cap}")]
    CapViolation { value: f64, cap: f64 },

    /// Every Monte Carlo sample produced minus infinity.
    #[error("first-moment estimate degenerate: all {samples} samples are -inf")]
    FirstMomentDegenerate { samples: usize },

    /// Enumeration size above the hard cap.
    #[error("N = {n} exceeds the enumeration cap {cap}")]
    EnumerationCap { n: usize, cap: usize },

    /// Too many Monte Carlo coordinates were skipped.
    #[error("{skipped} of {total} coordinates skipped for vanishing mass")]
    TooManySkipped { skipped: usize, total: usize },

    /// A tabulated activation file could not be parsed.
    #[error("tabulated activation: {0}")]
    Tabulated(String),
}
