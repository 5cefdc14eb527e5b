//! The expected-shortfall stage and the full two-stage orchestration.
//!
//! Given a fitted quantile plane, the pseudo-response
//! `S_i = Q_i + (1/alpha)(Y_i - Q_i) 1{Y_i <= Q_i}` turns shortfall
//! estimation into a weighted least-squares problem: the estimating equation
//! `sum_i w_i Z_i (S_i - Z_i' gamma) = 0` is the normal-equation system of
//! regressing S on Z with weights w. The score is orthogonal to first-stage
//! perturbations, so quantile estimation error has no first-order effect on
//! gamma.

use nalgebra::{DMatrix, DVector};

use crate::config::{BandwidthPolicy, FitOptions, Tail, WeightMode};
use crate::data::{stratify, CellPartition, ObservationFrame};
use crate::error::{Error, Result};
use crate::kernel::{
    cv_bandwidth, estimate_kappa_counted, ComplianceWeights, CvTarget, KernelSpec,
};
use crate::wqr::{fit_wqr_design, QuantileFit};

/// A solved shortfall stage.
#[derive(Debug, Clone)]
pub struct ShortfallFit {
    pub alpha: f64,
    pub tail: Tail,
    pub gamma_hat: Vec<f64>,
    pub pseudo_response: Vec<f64>,
    /// norm of the estimating-equation score at gamma_hat
    pub score_residual_norm: f64,
}

/// Pseudo-responses for the chosen tail.
///
/// Lower: `S_i = Q_i + (1/alpha)(Y_i - Q_i) 1{Y_i <= Q_i}`;
/// upper: `S_i = Q_i + (1/(1-alpha))(Y_i - Q_i) 1{Y_i > Q_i}`.
/// Ties Y = Q contribute zero either way.
pub fn pseudo_response(y: &[f64], q_hat: &[f64], alpha: f64, tail: Tail) -> Vec<f64> {
    assert!(alpha > 0.0 && alpha < 1.0);
    y.iter()
        .zip(q_hat.iter())
        .map(|(&yi, &qi)| match tail {
            Tail::Lower => {
                if yi <= qi {
                    qi + (yi - qi) / alpha
                } else {
                    qi
                }
            }
            Tail::Upper => {
                if yi > qi {
                    qi + (yi - qi) / (1.0 - alpha)
                } else {
                    qi
                }
            }
        })
        .collect()
}

/// Solve the weighted normal equations for gamma on an explicit design.
pub fn fit_es_design(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    fitted_q: &[f64],
    alpha: f64,
    tail: Tail,
    col_names: Option<&[String]>,
) -> Result<ShortfallFit> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shortfall level must lie strictly in (0,1), got {alpha}"
        )));
    }
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n || weights.len() != n || fitted_q.len() != n {
        return Err(Error::InvalidArgument(
            "design, response, weights and fitted quantiles must have matching lengths".into(),
        ));
    }
    let s = pseudo_response(y, fitted_q, alpha, tail);

    // weighted Gram and right-hand side
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs: DVector<f64> = DVector::zeros(k);
    for i in 0..n {
        let w = weights[i];
        if w <= 0.0 {
            continue;
        }
        for a in 0..k {
            let za = design[(i, a)];
            rhs[a] += w * za * s[i];
            for b in a..k {
                gram[(a, b)] += w * za * design[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    check_gram_rank(&gram, col_names)?;

    let lu = gram.clone().lu();
    let mut gamma = lu.solve(&rhs).ok_or_else(|| Error::SingularGram {
        column: col_names
            .and_then(|ns| ns.first().cloned())
            .unwrap_or_else(|| "column 0".into()),
    })?;
    // one step of iterative refinement keeps the score residual at
    // solve-tolerance even for unbalanced weights
    let correction = lu.solve(&(&rhs - &gram * &gamma));
    if let Some(c) = correction {
        gamma += c;
    }

    let score_residual_norm = (&rhs - &gram * &gamma).norm();

    Ok(ShortfallFit {
        alpha,
        tail,
        gamma_hat: gamma.iter().copied().collect(),
        pseudo_response: s,
        score_residual_norm,
    })
}

/// Diagonally-pivoted elimination on the Gram matrix; fails naming a
/// dependent column when the matrix is rank deficient.
fn check_gram_rank(gram: &DMatrix<f64>, col_names: Option<&[String]>) -> Result<()> {
    let k = gram.nrows();
    let mut g = gram.clone();
    let scale = (0..k).map(|j| g[(j, j)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut used = vec![false; k];
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..k {
            if !used[j] && best.map_or(true, |(_, v)| g[(j, j)] > v) {
                best = Some((j, g[(j, j)]));
            }
        }
        let (p, v) = best.unwrap();
        if !(v > tol) {
            let column = col_names
                .and_then(|ns| ns.get(p).cloned())
                .unwrap_or_else(|| format!("column {p}"));
            return Err(Error::SingularGram { column });
        }
        used[p] = true;
        for a in 0..k {
            if used[a] {
                continue;
            }
            let f = g[(a, p)] / g[(p, p)];
            for b in 0..k {
                if !used[b] {
                    let delta = f * g[(p, b)];
                    g[(a, b)] -= delta;
                }
            }
        }
    }
    Ok(())
}

/// Shortfall stage on a frame, reusing an existing quantile fit.
pub fn fit_es(
    frame: &ObservationFrame,
    weights: &ComplianceWeights,
    quantile_fit: &QuantileFit,
    alpha: f64,
    tail: Tail,
) -> Result<ShortfallFit> {
    let design = frame.design_matrix();
    let names = frame.design_names();
    fit_es_design(
        &design,
        frame.y(),
        &weights.kappa_tilde,
        &quantile_fit.fitted_q,
        alpha,
        tail,
        Some(&names),
    )
}

/// Weight diagnostics carried on every estimate.
#[derive(Debug, Clone, Default)]
pub struct WeightsMeta {
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub truncated_count: usize,
    pub pi_fallback_count: usize,
    pub v_fallback_count: usize,
}

/// Per-level output of the two-stage fit. The treatment effect coordinates
/// are the first entries of the full coefficient vectors (the design is
/// ordered treatment, intercept, covariates).
#[derive(Debug, Clone)]
pub struct CresteEstimate {
    pub alpha: f64,
    pub tail: Tail,
    pub beta1: f64,
    pub gamma1: f64,
    pub beta_full: Vec<f64>,
    pub gamma_full: Vec<f64>,
    pub wqr_objective: f64,
    pub wqr_optimality_gap: f64,
    pub es_score_residual_norm: f64,
    pub weights_meta: WeightsMeta,
}

/// Compliance weights for the configured mode, selecting bandwidths when the
/// policy asks for cross-validation. Returns the weights and the bandwidths
/// actually used (None for naive/oracle modes, which bypass the kernels).
pub fn weights_for_mode(
    frame: &ObservationFrame,
    cells: &CellPartition,
    opts: &FitOptions,
    cv_seed: u64,
    oracle_indicator: Option<&[bool]>,
) -> Result<(ComplianceWeights, Option<(f64, f64)>)> {
    weights_for_mode_counted(frame, cells, None, opts, cv_seed, oracle_indicator)
}

/// As `weights_for_mode` with optional resample multiplicities for the
/// kernel sums (bandwidth cross-validation is never run on counted input;
/// callers fix bandwidths first).
pub fn weights_for_mode_counted(
    frame: &ObservationFrame,
    cells: &CellPartition,
    counts: Option<&[f64]>,
    opts: &FitOptions,
    cv_seed: u64,
    oracle_indicator: Option<&[bool]>,
) -> Result<(ComplianceWeights, Option<(f64, f64)>)> {
    match opts.weight_mode {
        WeightMode::Naive => Ok((ComplianceWeights::unit(frame.n()), None)),
        WeightMode::Oracle => {
            let ind = oracle_indicator.ok_or_else(|| {
                Error::InvalidArgument(
                    "oracle weighting requires a complier indicator vector".into(),
                )
            })?;
            if ind.len() != frame.n() {
                return Err(Error::InvalidArgument(
                    "complier indicator length must match the sample size".into(),
                ));
            }
            Ok((ComplianceWeights::indicator(ind), None))
        }
        WeightMode::Proposed => {
            let spec_pi = KernelSpec::new(opts.kernel_order_pi);
            let spec_v = KernelSpec::new(opts.kernel_order_v);
            let (sigma1, sigma2) = match &opts.bandwidth {
                BandwidthPolicy::Fixed { sigma1, sigma2 } => (*sigma1, *sigma2),
                BandwidthPolicy::CrossValidated { grid, folds } => {
                    if counts.is_some() {
                        return Err(Error::InvalidArgument(
                            "bandwidths must be fixed before counted re-weighting".into(),
                        ));
                    }
                    let pi = cv_bandwidth(
                        frame,
                        cells,
                        spec_pi,
                        grid,
                        CvTarget::Pi,
                        *folds,
                        opts.standardize,
                        cv_seed,
                    )?;
                    let v = cv_bandwidth(
                        frame,
                        cells,
                        spec_v,
                        grid,
                        CvTarget::V,
                        *folds,
                        opts.standardize,
                        cv_seed,
                    )?;
                    (pi.chosen, v.chosen)
                }
            };
            if !(sigma1 > 0.0 && sigma2 > 0.0) {
                return Err(Error::InvalidArgument("bandwidths must be positive".into()));
            }
            let w = estimate_kappa_counted(
                frame,
                cells,
                counts,
                sigma1,
                sigma2,
                spec_pi,
                spec_v,
                opts.standardize,
                opts.pi_clamp,
            );
            Ok((w, Some((sigma1, sigma2))))
        }
    }
}

fn meta_from(weights: &ComplianceWeights, sigmas: Option<(f64, f64)>) -> WeightsMeta {
    WeightsMeta {
        sigma1: sigmas.map(|s| s.0),
        sigma2: sigmas.map(|s| s.1),
        truncated_count: weights.truncated_count,
        pi_fallback_count: weights.pi_fallback.iter().filter(|&&b| b).count(),
        v_fallback_count: weights.v_fallback.iter().filter(|&&b| b).count(),
    }
}

/// Run Steps 1-3 at several levels, sharing one set of compliance weights.
pub fn two_stage_fit_many(
    frame: &ObservationFrame,
    opts: &FitOptions,
    alphas: &[f64],
    cv_seed: u64,
    oracle_indicator: Option<&[bool]>,
) -> Result<Vec<CresteEstimate>> {
    let cells = stratify(frame);
    let (weights, sigmas) = weights_for_mode(frame, &cells, opts, cv_seed, oracle_indicator)?;
    let design = frame.design_matrix();
    let names = frame.design_names();
    let meta = meta_from(&weights, sigmas);

    alphas
        .iter()
        .map(|&alpha| {
            let qf = fit_wqr_design(&design, frame.y(), &weights.kappa_tilde, alpha, Some(&names))?;
            let es = fit_es_design(
                &design,
                frame.y(),
                &weights.kappa_tilde,
                &qf.fitted_q,
                alpha,
                opts.tail,
                Some(&names),
            )?;
            Ok(CresteEstimate {
                alpha,
                tail: opts.tail,
                beta1: qf.beta_hat[0],
                gamma1: es.gamma_hat[0],
                beta_full: qf.beta_hat.clone(),
                gamma_full: es.gamma_hat.clone(),
                wqr_objective: qf.objective,
                wqr_optimality_gap: qf.optimality_gap,
                es_score_residual_norm: es.score_residual_norm,
                weights_meta: meta.clone(),
            })
        })
        .collect()
}

/// Run Steps 1-3 at a single level.
pub fn two_stage_fit(
    frame: &ObservationFrame,
    opts: &FitOptions,
    alpha: f64,
    cv_seed: u64,
    oracle_indicator: Option<&[bool]>,
) -> Result<CresteEstimate> {
    Ok(two_stage_fit_many(frame, opts, &[alpha], cv_seed, oracle_indicator)?.remove(0))
}
