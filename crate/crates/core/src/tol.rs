//! Numeric tolerances used across the laboratory, pinned in one place so the
//! acceptance suite and the implementation cannot drift apart.

/// Row-stochasticity check for attention computed in f64.
pub const ROW_SUM_EXACT: f64 = 1e-9;

/// Row-stochasticity check for tensors reloaded from the f32 dump format.
pub const ROW_SUM_DUMP: f64 = 1e-6;

/// Relative error allowed between analytic and central finite-difference
/// probe gradients.
pub const GRAD_CHECK_REL: f64 = 1e-5;

/// Slack allowed on the probe's nonincreasing-loss check.
pub const LOSS_MONOTONE_SLACK: f64 = 1e-6;

/// How far the measured susceptibility peak may sit from the true cliff.
pub const CLIFF_LOCATION: f64 = 0.05;

/// Number of binomial standard errors a Monte Carlo estimate may deviate.
pub const MC_SIGMA: f64 = 4.0;

/// Confidence-interval half-width above which a Monte Carlo run is flagged
/// as too noisy to interpret.
pub const WIDE_CI: f64 = 0.025;

/// Minimum Pearson correlation between per-alpha mean global eviction and
/// hallucination rate in the reference sweep.
pub const PEARSON_MIN: f64 = 0.9;

/// Minimum macro-F1 the probe must reach on linearly separable features.
pub const MACRO_F1_MIN: f64 = 0.95;

/// Token-F1 threshold separating correct answers from hallucinations.
pub const GRADE_TAU: f64 = 0.5;
