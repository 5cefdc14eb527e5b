//! Nonparametric bootstrap standard errors and confidence intervals.
//!
//! Each replicate resamples n rows with replacement and re-runs the full
//! pipeline, compliance weights included, with the bandwidths chosen once on
//! the original sample (override with `reselect_bandwidths`). Replicate b
//! draws from its own counter-derived substream of the root seed, so results
//! are bit-identical under any parallel schedule.
//!
//! Internally a resample is handled as row multiplicities on the original
//! frame: kernel sums weight each distinct row by its count and the fit
//! weights become kappa * count, which reproduces the materialized resample
//! exactly while touching only unique rows.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::config::{BandwidthPolicy, FitOptions, WeightMode};
use crate::data::{stratify, ObservationFrame};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::shortfall::{
    fit_es_design, two_stage_fit_many, weights_for_mode, weights_for_mode_counted,
    CresteEstimate,
};
use crate::stats::{inverse_normal_cdf, normal_two_sided_z, sample_sd};
use crate::wqr::fit_wqr_design;

/// Confidence-interval construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiMethod {
    /// point estimate +/- z * bootstrap standard error
    Normal,
    /// empirical quantiles of the bootstrap draws
    Percentile,
}

impl std::fmt::Display for CiMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CiMethod::Normal => "normal",
            CiMethod::Percentile => "percentile",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub ci_method: CiMethod,
    /// re-run bandwidth cross-validation on every replicate instead of
    /// reusing the original selection
    pub reselect_bandwidths: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            seed: 0,
            ci_level: 0.95,
            ci_method: CiMethod::Normal,
            reselect_bandwidths: false,
        }
    }
}

/// Bootstrap draws and derived uncertainty for one level. Coordinates are
/// laid out as (beta_full, gamma_full), so the treatment effects sit at
/// positions 0 and dim.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub alpha: f64,
    /// requested replicate count
    pub b: usize,
    /// point estimates from the original sample, beta then gamma
    pub point: Vec<f64>,
    /// one row per successful replicate
    pub draws: Vec<Vec<f64>>,
    /// coordinatewise standard deviation over successful replicates
    pub se: Vec<f64>,
    /// intervals at the configured level and method
    pub ci: Vec<(f64, f64)>,
    pub failed: usize,
    pub failure_reasons: BTreeMap<String, usize>,
    /// set when more than 5% of replicates were skipped
    pub unreliable: bool,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn dim(&self) -> usize {
        self.point.len() / 2
    }

    pub fn confidence_interval(&self, level: f64, method: CiMethod) -> Vec<(f64, f64)> {
        assert!(level > 0.0 && level < 1.0, "confidence level must lie in (0,1)");
        match method {
            CiMethod::Normal => {
                let z = normal_two_sided_z(level);
                self.point
                    .iter()
                    .zip(self.se.iter())
                    .map(|(&p, &s)| (p - z * s, p + z * s))
                    .collect()
            }
            CiMethod::Percentile => {
                let lo_p = (1.0 - level) / 2.0;
                let hi_p = 1.0 - lo_p;
                (0..self.point.len())
                    .map(|j| {
                        let mut xs: Vec<f64> = self.draws.iter().map(|d| d[j]).collect();
                        if xs.is_empty() {
                            return (self.point[j], self.point[j]);
                        }
                        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        (quantile_sorted(&xs, lo_p), quantile_sorted(&xs, hi_p))
                    })
                    .collect()
            }
        }
    }
}

/// Linear-interpolation quantile of a sorted sample.
fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    let n = xs.len();
    if n == 1 {
        return xs[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo + 1;
    if hi >= n {
        return xs[n - 1];
    }
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

fn draw_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Resample n rows i.i.d. uniformly with replacement; deterministic given
/// the stream state.
pub fn resample<R: Rng>(frame: &ObservationFrame, rng: &mut R) -> ObservationFrame {
    frame.select_rows(&draw_indices(frame.n(), rng))
}

/// Bootstrap at several levels, sharing each replicate's resample and
/// compliance weights across levels.
pub fn bootstrap_many(
    frame: &ObservationFrame,
    opts: &FitOptions,
    cfg: &BootstrapConfig,
    alphas: &[f64],
    oracle_indicator: Option<&[bool]>,
) -> Result<Vec<(CresteEstimate, BootstrapResult)>> {
    if cfg.replicates < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 replicates".into()));
    }
    let n = frame.n();
    let cells = stratify(frame);

    // original-sample fit; bandwidth cross-validation happens here
    let (orig_weights, sigmas) = weights_for_mode(frame, &cells, opts, cfg.seed, oracle_indicator)?;
    let design = frame.design_matrix();
    let names = frame.design_names();
    let originals = two_stage_fit_many(frame, opts, alphas, cfg.seed, oracle_indicator)?;
    let _ = orig_weights;

    // replicates reuse the selected bandwidths unless told otherwise
    let mut replicate_opts = opts.clone();
    if !cfg.reselect_bandwidths {
        if let Some((s1, s2)) = sigmas {
            replicate_opts.bandwidth = BandwidthPolicy::Fixed { sigma1: s1, sigma2: s2 };
        }
    }

    let per_replicate: Vec<std::result::Result<Vec<Vec<f64>>, String>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(cfg.seed, tag::BOOTSTRAP, b as u64);
            let idx = draw_indices(n, &mut r);
            if cfg.reselect_bandwidths && opts.weight_mode == WeightMode::Proposed {
                // slow path: materialize the resample and re-run selection
                let rframe = frame.select_rows(&idx);
                let rind: Option<Vec<bool>> =
                    oracle_indicator.map(|ind| idx.iter().map(|&i| ind[i]).collect());
                let res = two_stage_fit_many(
                    &rframe,
                    &replicate_opts,
                    alphas,
                    rng::derive_seed(cfg.seed, tag::CV_FOLDS, b as u64),
                    rind.as_deref(),
                );
                return match res {
                    Ok(fits) => Ok(fits
                        .into_iter()
                        .map(|f| {
                            let mut row = f.beta_full;
                            row.extend_from_slice(&f.gamma_full);
                            row
                        })
                        .collect()),
                    Err(e) => Err(e.to_string()),
                };
            }

            let mut counts = vec![0.0f64; n];
            for &i in &idx {
                counts[i] += 1.0;
            }
            let weighted = weights_for_mode_counted(
                frame,
                &cells,
                Some(&counts),
                &replicate_opts,
                cfg.seed,
                oracle_indicator,
            );
            let (kappa, _) = match weighted {
                Ok(w) => w,
                Err(e) => return Err(e.to_string()),
            };
            let fit_weights: Vec<f64> =
                (0..n).map(|i| kappa.kappa_tilde[i] * counts[i]).collect();

            let mut rows = Vec::with_capacity(alphas.len());
            for &alpha in alphas {
                let qf = match fit_wqr_design(&design, frame.y(), &fit_weights, alpha, Some(&names))
                {
                    Ok(f) => f,
                    Err(e) => return Err(e.to_string()),
                };
                let es = match fit_es_design(
                    &design,
                    frame.y(),
                    &fit_weights,
                    &qf.fitted_q,
                    alpha,
                    opts.tail,
                    Some(&names),
                ) {
                    Ok(f) => f,
                    Err(e) => return Err(e.to_string()),
                };
                let mut row = qf.beta_hat;
                row.extend_from_slice(&es.gamma_hat);
                rows.push(row);
            }
            Ok(rows)
        })
        .collect();

    let mut failed = 0usize;
    let mut failure_reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_alpha_draws: Vec<Vec<Vec<f64>>> = vec![Vec::new(); alphas.len()];
    for rep in per_replicate {
        match rep {
            Ok(rows) => {
                for (a, row) in rows.into_iter().enumerate() {
                    per_alpha_draws[a].push(row);
                }
            }
            Err(reason) => {
                failed += 1;
                *failure_reasons.entry(reason).or_insert(0) += 1;
            }
        }
    }
    let unreliable = (failed as f64) / (cfg.replicates as f64) > 0.05;

    let out = originals
        .into_iter()
        .zip(per_alpha_draws.into_iter())
        .map(|(est, draws)| {
            let mut point = est.beta_full.clone();
            point.extend_from_slice(&est.gamma_full);
            let dim2 = point.len();
            let se: Vec<f64> = (0..dim2)
                .map(|j| {
                    let xs: Vec<f64> = draws.iter().map(|d| d[j]).collect();
                    sample_sd(&xs)
                })
                .collect();
            let mut result = BootstrapResult {
                alpha: est.alpha,
                b: cfg.replicates,
                point,
                draws,
                se,
                ci: Vec::new(),
                failed,
                failure_reasons: failure_reasons.clone(),
                unreliable,
                seed: cfg.seed,
            };
            result.ci = result.confidence_interval(cfg.ci_level, cfg.ci_method);
            (est, result)
        })
        .collect();
    Ok(out)
}

/// Bootstrap variance for a single level.
pub fn bootstrap_variance(
    frame: &ObservationFrame,
    opts: &FitOptions,
    cfg: &BootstrapConfig,
    alpha: f64,
    oracle_indicator: Option<&[bool]>,
) -> Result<BootstrapResult> {
    Ok(bootstrap_many(frame, opts, cfg, &[alpha], oracle_indicator)?.remove(0).1)
}

/// z-based interval helper used by reports: point +/- z * se.
pub fn normal_interval(point: f64, se: f64, level: f64) -> (f64, f64) {
    let z = inverse_normal_cdf(1.0 - (1.0 - level) / 2.0);
    (point - z * se, point + z * se)
}
