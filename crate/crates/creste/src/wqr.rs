//! Weighted quantile regression: minimize sum_i w_i rho_alpha(y_i - z_i'b)
//! over b, where rho_alpha(u) = u(alpha - 1{u <= 0}).
//!
//! The objective is piecewise-linear convex, equivalent to the linear
//! program min sum w_i(alpha u_i + (1-alpha) v_i) subject to
//! y_i = z_i'b + u_i - v_i, u, v >= 0. The solver walks vertices defined by
//! bases of k = dim(b) interpolated observations — the exchange form of the
//! simplex method on the dual, whose basic variables are the k active
//! residuals. Pivoting is deterministic (largest dual violation, ties to the
//! smallest row index, with a smallest-index fallback after long degenerate
//! runs), so identical inputs give identical output. Optimality is certified
//! by a duality gap built from the terminal basis multipliers.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservationFrame;
use crate::error::{Error, Result};
use crate::kernel::ComplianceWeights;

/// Pinball loss rho_alpha(u) = u(alpha - 1{u <= 0}).
#[inline]
pub fn pinball(alpha: f64, u: f64) -> f64 {
    u * (alpha - if u <= 0.0 { 1.0 } else { 0.0 })
}

/// A solved weighted quantile regression.
#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub alpha: f64,
    pub beta_hat: Vec<f64>,
    /// fitted conditional quantiles z_i' beta for every row, including rows
    /// of zero weight
    pub fitted_q: Vec<f64>,
    /// the basis rows defining the optimal vertex; all have zero residual
    pub active_set: Vec<usize>,
    /// weighted pinball objective at the optimum
    pub objective: f64,
    /// certified bound on the objective suboptimality (duality gap of the
    /// equivalent linear program, plus the dual equality slack propagated
    /// over a ball containing the reported solution)
    pub optimality_gap: f64,
    pub iterations: usize,
}

/// Fit on a frame's design Z_i = (D_i, 1, x_i) with compliance weights.
pub fn fit_wqr(
    frame: &ObservationFrame,
    weights: &ComplianceWeights,
    alpha: f64,
) -> Result<QuantileFit> {
    let design = frame.design_matrix();
    let names = frame.design_names();
    fit_wqr_design(&design, frame.y(), &weights.kappa_tilde, alpha, Some(&names))
}

/// Fit on an explicit design matrix. Weights must be finite and
/// nonnegative; rows with zero weight are excluded from the fit but still
/// receive fitted values. The design must have full column rank on the
/// support of positive weights.
pub fn fit_wqr_design(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    alpha: f64,
    col_names: Option<&[String]>,
) -> Result<QuantileFit> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie strictly in (0,1), got {alpha}"
        )));
    }
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument(
            "design, response and weights must have matching lengths".into(),
        ));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight at row {} must be finite and nonnegative, got {w}",
                i + 1
            )));
        }
    }

    // row-major copy of the design for tight inner loops
    let flat: Vec<f64> = {
        let mut f = Vec::with_capacity(n * k);
        for i in 0..n {
            for j in 0..k {
                f.push(design[(i, j)]);
            }
        }
        f
    };
    let row = |i: usize| &flat[i * k..(i + 1) * k];

    let support: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    if support.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} positive-weight observations cannot identify {k} coefficients",
            support.len()
        )));
    }

    let col_name = |j: usize| {
        col_names
            .and_then(|ns| ns.get(j).cloned())
            .unwrap_or_else(|| format!("column {j}"))
    };

    let mut h = initial_basis(&flat, k, &support, &col_name)?;
    let mean_w: f64 =
        support.iter().map(|&i| weights[i]).sum::<f64>() / support.len() as f64;

    let mut resid = vec![0.0f64; n];
    // nonbasic dual bound state: each nonbasic row's multiplier sits at
    // w(alpha-1) (below the plane) or w*alpha (above). Residual signs force
    // the state; rows *on* the plane keep whatever state pivoting left them
    // in, which is what lets degenerate steps make dual progress instead of
    // cycling.
    let mut above = vec![false; n];
    let mut candidates: Vec<(f64, usize, f64)> = Vec::with_capacity(support.len());
    let max_iter = 200 * support.len() + 200;
    let mut consecutive_degenerate = 0usize;
    let row_tol = |i: usize, fit: f64| 1e-9 * (1.0 + y[i].abs() + fit.abs());

    let mut iterations = 0usize;
    let (beta, nu): (DVector<f64>, DVector<f64>) = loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NoConvergence(format!(
                "quantile regression exceeded {max_iter} pivots"
            )));
        }
        h.sort_unstable();

        let zh = DMatrix::from_fn(k, k, |r, c| flat[h[r] * k + c]);
        let lu = zh.clone().lu();
        let lut = zh.transpose().lu();
        let yh = DVector::from_fn(k, |r, _| y[h[r]]);
        let beta = match lu.solve(&yh) {
            Some(b) => b,
            None => {
                return Err(Error::NoConvergence(
                    "basis became numerically singular".into(),
                ))
            }
        };

        for &i in &support {
            let zi = row(i);
            let mut fit = 0.0;
            for j in 0..k {
                fit += zi[j] * beta[j];
            }
            resid[i] = y[i] - fit;
            // sync the bound state where the residual sign determines it
            let tol = row_tol(i, fit);
            if resid[i] > tol {
                above[i] = true;
            } else if resid[i] < -tol {
                above[i] = false;
            }
        }
        for &j in &h {
            resid[j] = 0.0;
        }

        // dual multipliers of the basis rows: Z_h' nu = -g with
        // g = sum over nonbasic support of a_i z_i
        let mut g: DVector<f64> = DVector::zeros(k);
        for &i in &support {
            if h.contains(&i) {
                continue;
            }
            let a = weights[i] * (alpha - if above[i] { 0.0 } else { 1.0 });
            let zi = row(i);
            for j in 0..k {
                g[j] += a * zi[j];
            }
        }
        let nu = match lut.solve(&(-&g)) {
            Some(v) => v,
            None => {
                return Err(Error::NoConvergence(
                    "basis became numerically singular".into(),
                ))
            }
        };

        // box test: nu_t must lie in [w_j (alpha-1), w_j alpha]
        let mut leave: Option<(usize, f64, f64)> = None; // (t, violation, sigma)
        let bland = consecutive_degenerate > 50;
        for t in 0..k {
            let wj = weights[h[t]];
            let slack = 1e-10 * wj.max(mean_w);
            let hi_violation = nu[t] - wj * alpha;
            let lo_violation = wj * (alpha - 1.0) - nu[t];
            let (violation, sigma) = if hi_violation >= lo_violation {
                (hi_violation, 1.0)
            } else {
                (lo_violation, -1.0)
            };
            if violation > slack {
                let better = match leave {
                    None => true,
                    Some((_, best, _)) => {
                        if bland {
                            false // first (smallest row index) wins
                        } else {
                            violation > best
                        }
                    }
                };
                if better {
                    leave = Some((t, violation, sigma));
                }
            }
        }

        let Some((t_leave, violation, sigma)) = leave else {
            break (beta, nu); // optimal
        };
        let j_leave = h[t_leave];
        let wj = weights[j_leave];

        // direction that keeps the other basis residuals at zero and moves
        // r_{j_leave} as sigma * t
        let mut e_t: DVector<f64> = DVector::zeros(k);
        e_t[t_leave] = 1.0;
        let cvec = match lu.solve(&e_t) {
            Some(c) => c,
            None => {
                return Err(Error::NoConvergence(
                    "basis became numerically singular".into(),
                ))
            }
        };

        // one-sided derivative along the ray; crossings raise it by w|s|
        let mut cum = -violation;
        debug_assert!(cum < 0.0);
        let _ = wj;

        candidates.clear();
        for &i in &support {
            if h.contains(&i) {
                continue;
            }
            let zi = row(i);
            let mut s = 0.0;
            for j in 0..k {
                s += zi[j] * cvec[j];
            }
            s *= sigma;
            if s == 0.0 {
                continue;
            }
            // a row can flip its bound state only if the direction pushes
            // its residual through the plane in the matching sense
            let r = resid[i];
            let crosses = if above[i] { s < 0.0 && r >= 0.0 } else { s > 0.0 && r <= 0.0 };
            if crosses {
                let t = if r == 0.0 { 0.0 } else { (-r / s).max(0.0) };
                candidates.push((t, i, s));
            }
        }
        candidates.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
        });

        let mut entered = None;
        for (c_idx, &(t, i, s)) in candidates.iter().enumerate() {
            cum += weights[i] * s.abs();
            if cum >= 0.0 {
                entered = Some((c_idx, t, i));
                break;
            }
        }
        let Some((c_enter, t_step, i_enter)) = entered else {
            return Err(Error::NoConvergence(
                "descent direction is unbounded; the design may be degenerate".into(),
            ));
        };
        // every crossing passed on the way flips its bound state and keeps
        // it; the entering row's state is free while it sits in the basis
        for &(_, i, _) in &candidates[..=c_enter] {
            above[i] = !above[i];
        }
        // the leaving row moves off the plane in the direction sigma
        above[j_leave] = sigma > 0.0;

        if t_step == 0.0 {
            consecutive_degenerate += 1;
        } else {
            consecutive_degenerate = 0;
        }
        let pos = h.iter().position(|&j| j == j_leave).unwrap();
        h[pos] = i_enter;
    };

    // ---- optimality certificate from the terminal basis ----
    let objective: f64 =
        support.iter().map(|&i| weights[i] * pinball(alpha, resid[i])).sum();

    // dual vector: bound values on nonbasic rows, clamped nu on basis rows
    let mut dual_gap = 0.0;
    for &i in &support {
        if h.contains(&i) {
            continue;
        }
        let a = weights[i] * (alpha - if above[i] { 0.0 } else { 1.0 });
        dual_gap += weights[i] * pinball(alpha, resid[i]) - a * resid[i];
    }
    // equality slack Z'a = Z_h'(clamp(nu) - nu), propagated over a ball that
    // contains beta_hat (and, at this scale, the optimum)
    let mut slack: DVector<f64> = DVector::zeros(k);
    for t in 0..k {
        let wj = weights[h[t]];
        let clamped = nu[t].clamp(wj * (alpha - 1.0), wj * alpha);
        let diff = clamped - nu[t];
        if diff != 0.0 {
            let zj = row(h[t]);
            for j in 0..k {
                slack[j] += diff * zj[j];
            }
        }
    }
    let radius = 1.0 + 2.0 * beta.iter().map(|b| b.abs()).sum::<f64>();
    let optimality_gap = dual_gap.max(0.0) + slack.norm() * radius;

    let mut fitted_q = vec![0.0; n];
    for i in 0..n {
        let zi = row(i);
        let mut fit = 0.0;
        for j in 0..k {
            fit += zi[j] * beta[j];
        }
        fitted_q[i] = fit;
    }

    h.sort_unstable();
    Ok(QuantileFit {
        alpha,
        beta_hat: beta.iter().copied().collect(),
        fitted_q,
        active_set: h,
        objective,
        optimality_gap,
        iterations,
    })
}

/// Choose k support rows forming a nonsingular basis by full-pivot
/// elimination; detects design collinearity and names the offending column.
fn initial_basis(
    flat: &[f64],
    k: usize,
    support: &[usize],
    col_name: &dyn Fn(usize) -> String,
) -> Result<Vec<usize>> {
    let m = support.len();
    let mut work: Vec<f64> = Vec::with_capacity(m * k);
    for &i in support {
        work.extend_from_slice(&flat[i * k..(i + 1) * k]);
    }
    let scale = work.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let tol = 1e-11 * scale;

    let mut used_row = vec![false; m];
    let mut used_col = vec![false; k];
    let mut basis = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 0..m {
            if used_row[r] {
                continue;
            }
            for c in 0..k {
                if used_col[c] {
                    continue;
                }
                let v = work[r * k + c].abs();
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((r, c, v));
                }
            }
        }
        let (pr, pc, pv) = best.unwrap();
        if pv <= tol {
            let bad = (0..k).find(|&c| !used_col[c]).unwrap();
            return Err(Error::CollinearDesign { column: col_name(bad) });
        }
        used_row[pr] = true;
        used_col[pc] = true;
        basis.push(support[pr]);
        let pivot = work[pr * k + pc];
        for r in 0..m {
            if used_row[r] {
                continue;
            }
            let f = work[r * k + pc] / pivot;
            if f != 0.0 {
                for c in 0..k {
                    work[r * k + c] -= f * work[pr * k + c];
                }
            }
        }
    }
    Ok(basis)
}
