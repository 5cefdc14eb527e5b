//! Estimation settings shared by the library entry points.

use crate::kernel::KernelOrder;

/// Which tail of the outcome distribution the shortfall aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Lower,
    Upper,
}

impl std::fmt::Display for Tail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tail::Lower => "lower",
            Tail::Upper => "upper",
        })
    }
}

/// Weighting scheme for the two-stage fit: kernel-estimated compliance
/// weights, unit weights (ignores endogeneity), or a known complier
/// indicator (infeasible benchmark).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Proposed,
    Naive,
    Oracle,
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMode::Proposed => "proposed",
            WeightMode::Naive => "naive",
            WeightMode::Oracle => "oracle",
        })
    }
}

/// How the kernel bandwidths are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    CrossValidated { grid: Vec<f64>, folds: usize },
    Fixed { sigma1: f64, sigma2: f64 },
}

/// The default selection grid {0.1, 0.2, ..., 0.9}.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Settings for one two-stage fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub tail: Tail,
    pub weight_mode: WeightMode,
    pub kernel_order_pi: KernelOrder,
    pub kernel_order_v: KernelOrder,
    pub bandwidth: BandwidthPolicy,
    /// divide each continuous smoothing coordinate by its within-cell
    /// standard deviation before applying the bandwidth
    pub standardize: bool,
    /// propensity estimates are clamped into [pi_clamp, 1 - pi_clamp]
    /// before entering the weighting identity
    pub pi_clamp: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tail: Tail::Lower,
            weight_mode: WeightMode::Proposed,
            kernel_order_pi: KernelOrder::Two,
            kernel_order_v: KernelOrder::Two,
            bandwidth: BandwidthPolicy::CrossValidated { grid: default_grid(), folds: 5 },
            standardize: false,
            pi_clamp: 0.01,
        }
    }
}
