//! Kernel estimation of the instrument propensity pi(X) = Pr(V=1|X) and of
//! v(Y,Z) = Pr(V=1|Y,Z), bandwidth selection by cross-validation, and the
//! truncated compliance weights.
//!
//! Estimation is stratified: all smoothing runs within the cell of
//! observations sharing the same discrete covariate values, and v is
//! additionally restricted to the same treatment arm. With no continuous
//! covariates the propensity estimate reduces to the cell mean of V.
//! Multivariate kernels are products of univariate Epanechnikov kernels with
//! one scalar bandwidth per estimator.

use rand::seq::SliceRandom;

use crate::data::{CellPartition, ObservationFrame};
use crate::error::{Error, Result};
use crate::rng;

/// Epanechnikov kernel order. The second-order kernel is nonnegative; the
/// fourth-order kernel has a vanishing second moment and takes negative
/// values on part of its support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOrder {
    Two,
    Four,
}

/// Bounded-support Epanechnikov family kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub order: KernelOrder,
}

impl KernelSpec {
    pub fn new(order: KernelOrder) -> Self {
        Self { order }
    }

    /// Univariate kernel value; zero outside [-1, 1].
    #[inline]
    pub fn univariate(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            return 0.0;
        }
        let u2 = u * u;
        match self.order {
            KernelOrder::Two => 0.75 * (1.0 - u2),
            KernelOrder::Four => (15.0 / 32.0) * (3.0 - 10.0 * u2 + 7.0 * u2 * u2),
        }
    }

    /// Product kernel over the coordinates of `u`.
    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut p = 1.0;
        for &ui in u {
            if ui.abs() > 1.0 {
                return 0.0;
            }
            p *= self.univariate(ui);
        }
        p
    }
}

/// Product-kernel evaluation (module-level alias for `KernelSpec::eval`).
pub fn kernel_eval(spec: KernelSpec, u: &[f64]) -> f64 {
    spec.eval(u)
}

fn weighted_mean(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, w) in values {
        num += w * x;
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Count-weighted sample standard deviation; 1.0 when degenerate so callers
/// can use it directly as a divisor.
fn weighted_sd_or_one(xs: &[f64], cnt: Option<&[f64]>) -> f64 {
    let (mut sw, mut m) = (0.0, 0.0);
    for (j, &x) in xs.iter().enumerate() {
        let w = cnt.map_or(1.0, |c| c[j]);
        sw += w;
        m += w * x;
    }
    if sw <= 1.0 {
        return 1.0;
    }
    m /= sw;
    let mut ss = 0.0;
    for (j, &x) in xs.iter().enumerate() {
        let w = cnt.map_or(1.0, |c| c[j]);
        ss += w * (x - m) * (x - m);
    }
    let sd = (ss / (sw - 1.0)).sqrt();
    if sd.is_finite() && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Points available for one Nadaraya-Watson ratio: a cell (for pi) or a
/// cell-and-arm subset (for v), sorted by the first smoothing coordinate so
/// bounded-support queries only touch an index window.
struct SmoothSet {
    q: usize,
    coords: Vec<f64>, // m x q, rows ordered by coords[0] ascending
    v: Vec<f64>,
    cnt: Vec<f64>,
    inv_scale: Vec<f64>, // per-coordinate standardization multipliers
    total_cnt: f64,
    vbar: f64, // count-weighted mean of v; fallback value
}

impl SmoothSet {
    /// `rows` yields (smoothing coords, V, count) triples. `inv_scale[c]` is
    /// applied to coordinate differences before dividing by the bandwidth.
    fn build(q: usize, rows: &[(Vec<f64>, f64, f64)], inv_scale: Vec<f64>) -> Self {
        debug_assert_eq!(inv_scale.len(), q);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        if q > 0 {
            order.sort_by(|&a, &b| {
                rows[a].0[0]
                    .partial_cmp(&rows[b].0[0])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
        }
        let mut coords = Vec::with_capacity(rows.len() * q);
        let mut v = Vec::with_capacity(rows.len());
        let mut cnt = Vec::with_capacity(rows.len());
        for &j in &order {
            coords.extend_from_slice(&rows[j].0);
            v.push(rows[j].1);
            cnt.push(rows[j].2);
        }
        let total_cnt: f64 = cnt.iter().sum();
        let vbar = weighted_mean(v.iter().copied().zip(cnt.iter().copied()));
        Self { q, coords, v, cnt, inv_scale, total_cnt, vbar }
    }

    fn is_empty(&self) -> bool {
        self.total_cnt <= 0.0
    }

    /// Nadaraya-Watson ratio at `query`; `None` when the denominator is
    /// degenerate (no in-bandwidth mass, or fourth-order cancellation).
    /// The value is clamped into [0, 1]; for second-order kernels the ratio
    /// is a convex combination of binary V and the clamp is a no-op.
    fn nw(&self, query: &[f64], sigma: f64, kern: KernelSpec) -> Option<f64> {
        if self.q == 0 {
            if self.is_empty() {
                return None;
            }
            return Some(self.vbar);
        }
        let m = self.v.len();
        // window on the first coordinate: |(query0 - x0) * inv_scale0 / sigma| <= 1
        let half = sigma / self.inv_scale[0];
        let lo = query[0] - half;
        let hi = query[0] + half;
        let key = |j: usize| self.coords[j * self.q];
        let start = partition_point(m, |j| key(j) < lo);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in start..m {
            if key(j) > hi {
                break;
            }
            let mut prod = self.cnt[j];
            for c in 0..self.q {
                let u = (query[c] - self.coords[j * self.q + c]) * self.inv_scale[c] / sigma;
                if u.abs() > 1.0 {
                    prod = 0.0;
                    break;
                }
                prod *= kern.univariate(u);
            }
            num += prod * self.v[j];
            den += prod;
        }
        if den > 0.0 && den.is_finite() {
            Some((num / den).clamp(0.0, 1.0))
        } else {
            None
        }
    }
}

fn partition_point(m: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0usize, m);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

fn inv_scales(frame: &ObservationFrame, members: &[usize], cnt: Option<&[f64]>, standardize: bool, with_y: bool) -> Vec<f64> {
    let q = frame.p_cont() + usize::from(with_y);
    if !standardize {
        return vec![1.0; q];
    }
    let mut out = Vec::with_capacity(q);
    if with_y {
        let ys: Vec<f64> = members.iter().map(|&i| frame.y()[i]).collect();
        out.push(1.0 / weighted_sd_or_one(&ys, cnt));
    }
    for j in 0..frame.p_cont() {
        let xs: Vec<f64> = members.iter().map(|&i| frame.x_cont_at(i, j)).collect();
        out.push(1.0 / weighted_sd_or_one(&xs, cnt));
    }
    out
}

fn pi_set(frame: &ObservationFrame, members: &[usize], cnt: &dyn Fn(usize) -> f64, standardize: bool) -> SmoothSet {
    let counts: Vec<f64> = members.iter().map(|&i| cnt(i)).collect();
    let rows: Vec<(Vec<f64>, f64, f64)> = members
        .iter()
        .zip(counts.iter())
        .map(|(&i, &c)| (frame.x_cont_row(i).to_vec(), frame.v()[i] as f64, c))
        .collect();
    let scale = inv_scales(frame, members, Some(&counts), standardize, false);
    SmoothSet::build(frame.p_cont(), &rows, scale)
}

fn v_set(frame: &ObservationFrame, members: &[usize], arm: u8, cnt: &dyn Fn(usize) -> f64, standardize: bool) -> SmoothSet {
    // standardization scales come from the whole cell, not the arm subset
    let cell_counts: Vec<f64> = members.iter().map(|&i| cnt(i)).collect();
    let scale = inv_scales(frame, members, Some(&cell_counts), standardize, true);
    let rows: Vec<(Vec<f64>, f64, f64)> = members
        .iter()
        .filter(|&&i| frame.d()[i] == arm)
        .map(|&i| {
            let mut c = Vec::with_capacity(1 + frame.p_cont());
            c.push(frame.y()[i]);
            c.extend_from_slice(frame.x_cont_row(i));
            (c, frame.v()[i] as f64, cnt(i))
        })
        .collect();
    SmoothSet::build(1 + frame.p_cont(), &rows, scale)
}

fn v_query(frame: &ObservationFrame, i: usize) -> Vec<f64> {
    let mut q = Vec::with_capacity(1 + frame.p_cont());
    q.push(frame.y()[i]);
    q.extend_from_slice(frame.x_cont_row(i));
    q
}

/// Propensity estimate pi_hat(X_i) over observation i's cell. Returns the
/// value and whether a degenerate denominator forced the cell-mean fallback.
pub fn nw_pi(
    frame: &ObservationFrame,
    cells: &CellPartition,
    sigma1: f64,
    spec: KernelSpec,
    standardize: bool,
    i: usize,
) -> (f64, bool) {
    let members = &cells.cells[cells.cell_of[i]];
    let set = pi_set(frame, members, &|_| 1.0, standardize);
    match set.nw(frame.x_cont_row(i), sigma1, spec) {
        Some(p) => (p, false),
        None => (set.vbar, true),
    }
}

/// v_hat(Y_i, Z_i): kernel regression of V on (Y, x_cont) over the members of
/// i's cell in the same treatment arm. Fallbacks: a degenerate denominator
/// falls back to the arm mean of V; an entirely absent arm falls back to the
/// cell mean. Both are flagged.
pub fn nw_v(
    frame: &ObservationFrame,
    cells: &CellPartition,
    sigma2: f64,
    spec: KernelSpec,
    standardize: bool,
    i: usize,
) -> (f64, bool) {
    let members = &cells.cells[cells.cell_of[i]];
    let arm = frame.d()[i];
    let set = v_set(frame, members, arm, &|_| 1.0, standardize);
    if set.is_empty() {
        let cell_mean =
            weighted_mean(members.iter().map(|&j| (frame.v()[j] as f64, 1.0)));
        return (cell_mean, true);
    }
    match set.nw(&v_query(frame, i), sigma2, spec) {
        Some(p) => (p, false),
        None => (set.vbar, true),
    }
}

/// Which conditional probability a bandwidth is selected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvTarget {
    Pi,
    V,
}

/// Cross-validation outcome for one target.
#[derive(Debug, Clone)]
pub struct BandwidthChoice {
    pub grid: Vec<f64>,
    pub chosen: f64,
    /// mean absolute held-out error per grid point
    pub cv_scores: Vec<f64>,
    /// grid points where every held-out estimate used a fallback
    pub degenerate: Vec<bool>,
}

/// Chosen bandwidths for both estimators with their score tables.
#[derive(Debug, Clone)]
pub struct BandwidthSelection {
    pub grid: Vec<f64>,
    pub chosen_sigma1: f64,
    pub chosen_sigma2: f64,
    pub cv_scores_pi: Vec<f64>,
    pub cv_scores_v: Vec<f64>,
}

/// Deterministic K-fold assignment: a seeded shuffle of 0..n dealt round-robin.
pub fn cv_fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, rng::tag::CV_FOLDS, 0);
    idx.shuffle(&mut r);
    let mut fold = vec![0usize; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Select a bandwidth from `grid` by K-fold cross-validation of the mean
/// absolute error |V_i - estimate(i)| on held-out points, with ties broken
/// toward the smallest bandwidth.
pub fn cv_bandwidth(
    frame: &ObservationFrame,
    cells: &CellPartition,
    spec: KernelSpec,
    grid: &[f64],
    target: CvTarget,
    folds: usize,
    standardize: bool,
    seed: u64,
) -> Result<BandwidthChoice> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("bandwidth grid must be non-empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "bandwidth grid must be positive and strictly ascending".into(),
        ));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least 2 folds".into()));
    }
    let n = frame.n();
    if n < folds {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least as many observations as folds".into(),
        ));
    }

    let fold_of = cv_fold_assignment(n, folds, seed);
    let global_vbar = weighted_mean(frame.v().iter().map(|&v| (v as f64, 1.0)));

    // Pre-build train-side smoothing sets once per (fold, cell); the grid
    // loop then only re-evaluates kernel sums.
    struct FoldCell {
        test: Vec<usize>,
        pi: SmoothSet,
        v_arm: [SmoothSet; 2],
        train_cell_vbar: f64,
    }
    let mut prepared: Vec<FoldCell> = Vec::new();
    for f in 0..folds {
        for members in &cells.cells {
            let test: Vec<usize> =
                members.iter().copied().filter(|&i| fold_of[i] == f).collect();
            if test.is_empty() {
                continue;
            }
            let train: Vec<usize> =
                members.iter().copied().filter(|&i| fold_of[i] != f).collect();
            let pi = pi_set(frame, &train, &|_| 1.0, standardize);
            let v_arm = [
                v_set(frame, &train, 0, &|_| 1.0, standardize),
                v_set(frame, &train, 1, &|_| 1.0, standardize),
            ];
            let train_cell_vbar = if train.is_empty() {
                global_vbar
            } else {
                weighted_mean(train.iter().map(|&i| (frame.v()[i] as f64, 1.0)))
            };
            prepared.push(FoldCell { test, pi, v_arm, train_cell_vbar });
        }
    }

    let mut cv_scores = Vec::with_capacity(grid.len());
    let mut degenerate = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let mut abs_err = 0.0;
        let mut fallbacks = 0usize;
        for fc in &prepared {
            for &i in &fc.test {
                let vi = frame.v()[i] as f64;
                let est = match target {
                    CvTarget::Pi => match fc.pi.nw(frame.x_cont_row(i), sigma, spec) {
                        Some(p) => p,
                        None => {
                            fallbacks += 1;
                            if fc.pi.is_empty() {
                                fc.train_cell_vbar
                            } else {
                                fc.pi.vbar
                            }
                        }
                    },
                    CvTarget::V => {
                        let arm = &fc.v_arm[frame.d()[i] as usize];
                        if arm.is_empty() {
                            fallbacks += 1;
                            fc.train_cell_vbar
                        } else {
                            match arm.nw(&v_query(frame, i), sigma, spec) {
                                Some(p) => p,
                                None => {
                                    fallbacks += 1;
                                    arm.vbar
                                }
                            }
                        }
                    }
                };
                abs_err += (vi - est).abs();
            }
        }
        cv_scores.push(abs_err / n as f64);
        degenerate.push(fallbacks == n);
    }

    if degenerate.iter().all(|&d| d) {
        return Err(Error::DegenerateBandwidthGrid);
    }
    let mut best = 0usize;
    for (j, &s) in cv_scores.iter().enumerate() {
        if s < cv_scores[best] {
            best = j;
        }
    }
    Ok(BandwidthChoice {
        grid: grid.to_vec(),
        chosen: grid[best],
        cv_scores,
        degenerate,
    })
}

/// Per-observation compliance weights with diagnostics. The truncated
/// weights always satisfy c_l <= kappa_tilde <= c_u with c_l = 10/n and
/// c_u = 1 - 10/n when kernel-estimated (Eq. of the weighting identity plus
/// truncation); the `unit` and `indicator` constructors express the naive
/// and oracle weightings through the same type with bounds [0, 1].
#[derive(Debug, Clone)]
pub struct ComplianceWeights {
    pub kappa_tilde: Vec<f64>,
    pub kappa_raw: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub c_l: f64,
    pub c_u: f64,
    pub truncated_count: usize,
    pub pi_fallback: Vec<bool>,
    pub v_fallback: Vec<bool>,
}

impl ComplianceWeights {
    /// kappa identically one: the naive weighting.
    pub fn unit(n: usize) -> Self {
        Self {
            kappa_tilde: vec![1.0; n],
            kappa_raw: vec![1.0; n],
            pi_hat: Vec::new(),
            v_hat: Vec::new(),
            c_l: 0.0,
            c_u: 1.0,
            truncated_count: 0,
            pi_fallback: Vec::new(),
            v_fallback: Vec::new(),
        }
    }

    /// kappa equal to a known complier indicator: the oracle weighting.
    pub fn indicator(complier: &[bool]) -> Self {
        let k: Vec<f64> = complier.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Self {
            kappa_tilde: k.clone(),
            kappa_raw: k,
            pi_hat: Vec::new(),
            v_hat: Vec::new(),
            c_l: 0.0,
            c_u: 1.0,
            truncated_count: 0,
            pi_fallback: Vec::new(),
            v_fallback: Vec::new(),
        }
    }
}

/// The weighting identity: kappa = 1 - D(1-v)/(1-pi) - (1-D)v/pi, with pi
/// clamped into [pi_clamp, 1-pi_clamp] before use.
#[inline]
pub fn kappa_from_parts(d: u8, v_hat: f64, pi_hat: f64, pi_clamp: f64) -> f64 {
    let p = pi_hat.clamp(pi_clamp, 1.0 - pi_clamp);
    if d == 1 {
        1.0 - (1.0 - v_hat) / (1.0 - p)
    } else {
        1.0 - v_hat / p
    }
}

/// Kernel-estimated, truncated compliance weights for every observation.
pub fn estimate_kappa(
    frame: &ObservationFrame,
    cells: &CellPartition,
    sigma1: f64,
    sigma2: f64,
    spec_pi: KernelSpec,
    spec_v: KernelSpec,
    standardize: bool,
    pi_clamp: f64,
) -> ComplianceWeights {
    estimate_kappa_counted(frame, cells, None, sigma1, sigma2, spec_pi, spec_v, standardize, pi_clamp)
}

/// As `estimate_kappa`, but with optional row multiplicities. Rows with zero
/// count contribute nothing to the kernel sums and receive placeholder
/// weights; this evaluates a bootstrap resample without materializing it.
#[allow(clippy::too_many_arguments)]
pub fn estimate_kappa_counted(
    frame: &ObservationFrame,
    cells: &CellPartition,
    counts: Option<&[f64]>,
    sigma1: f64,
    sigma2: f64,
    spec_pi: KernelSpec,
    spec_v: KernelSpec,
    standardize: bool,
    pi_clamp: f64,
) -> ComplianceWeights {
    let n = frame.n();
    // nominal truncation 10/n and 1-10/n; the bounds cross for n <= 20 and
    // are pinned at 1/2 there so the clamp stays well defined
    let c_l = (10.0 / n as f64).min(0.5);
    let c_u = (1.0 - 10.0 / n as f64).max(0.5);
    let cnt = |i: usize| counts.map_or(1.0, |c| c[i]);

    let mut pi_hat = vec![f64::NAN; n];
    let mut v_hat = vec![f64::NAN; n];
    let mut pi_fallback = vec![false; n];
    let mut v_fallback = vec![false; n];
    let mut kappa_raw = vec![0.0; n];
    let mut kappa_tilde = vec![c_l; n];
    let mut truncated_count = 0usize;

    for members in &cells.cells {
        let active: Vec<usize> = members.iter().copied().filter(|&i| cnt(i) > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let pi = pi_set(frame, members, &cnt, standardize);
        let v_arm = [
            v_set(frame, members, 0, &cnt, standardize),
            v_set(frame, members, 1, &cnt, standardize),
        ];
        for &i in &active {
            let p = if frame.p_cont() == 0 {
                pi.vbar
            } else {
                match pi.nw(frame.x_cont_row(i), sigma1, spec_pi) {
                    Some(p) => p,
                    None => {
                        pi_fallback[i] = true;
                        pi.vbar
                    }
                }
            };
            let arm = &v_arm[frame.d()[i] as usize];
            let v = if arm.is_empty() {
                v_fallback[i] = true;
                pi.vbar
            } else {
                match arm.nw(&v_query(frame, i), sigma2, spec_v) {
                    Some(v) => v,
                    None => {
                        v_fallback[i] = true;
                        arm.vbar
                    }
                }
            };
            pi_hat[i] = p;
            v_hat[i] = v;
            let raw = kappa_from_parts(frame.d()[i], v, p, pi_clamp);
            kappa_raw[i] = raw;
            let t = raw.clamp(c_l, c_u);
            if t != raw {
                truncated_count += 1;
            }
            kappa_tilde[i] = t;
        }
    }

    ComplianceWeights {
        kappa_tilde,
        kappa_raw,
        pi_hat,
        v_hat,
        c_l,
        c_u,
        truncated_count,
        pi_fallback,
        v_fallback,
    }
}

/// The sample complier proportion
/// p_c = 1 - sum D(1-V)/sum(1-V) - sum (1-D)V/sum V.
pub fn complier_proportion(frame: &ObservationFrame) -> Result<f64> {
    let mut sum_v = 0.0;
    let mut sum_not_v = 0.0;
    let mut d_not_v = 0.0;
    let mut not_d_v = 0.0;
    for i in 0..frame.n() {
        let d = frame.d()[i] as f64;
        let v = frame.v()[i] as f64;
        sum_v += v;
        sum_not_v += 1.0 - v;
        d_not_v += d * (1.0 - v);
        not_d_v += (1.0 - d) * v;
    }
    if sum_v <= 0.0 || sum_not_v <= 0.0 {
        return Err(Error::DegenerateInstrument);
    }
    Ok(1.0 - d_not_v / sum_not_v - not_d_v / sum_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stratify;
    use crate::stats::simpson;
    use proptest::prelude::*;

    fn frame(y: Vec<f64>, d: Vec<u8>, v: Vec<u8>, x: Vec<f64>) -> ObservationFrame {
        let n = y.len();
        ObservationFrame::from_parts(y, d, v, x, 1, vec![], 0, vec!["x1".into()], vec![]).unwrap()
    }

    #[test]
    fn kernel_values_at_zero_and_outside_support() {
        let k2 = KernelSpec::new(KernelOrder::Two);
        assert_eq!(kernel_eval(k2, &[0.0]), 0.75);
        assert_eq!(kernel_eval(k2, &[2.0]), 0.0);
        assert_eq!(kernel_eval(k2, &[0.5, 2.0]), 0.0);
    }

    #[test]
    fn kernel_moments_by_simpson_quadrature() {
        let k2 = KernelSpec::new(KernelOrder::Two);
        let k4 = KernelSpec::new(KernelOrder::Four);
        let int_k2 = simpson(|u| k2.univariate(u), -1.0, 1.0, 4096);
        let int_k4 = simpson(|u| k4.univariate(u), -1.0, 1.0, 4096);
        let m2_k4 = simpson(|u| u * u * k4.univariate(u), -1.0, 1.0, 4096);
        assert!((int_k2 - 1.0).abs() < 1e-10);
        assert!((int_k4 - 1.0).abs() < 1e-10);
        assert!(m2_k4.abs() < 1e-10);
    }

    #[test]
    fn nw_pi_is_one_when_all_instruments_are_one() {
        let f = frame(vec![0.0; 4], vec![0; 4], vec![1; 4], vec![0.1, 0.4, 0.6, 0.9]);
        let cells = stratify(&f);
        for i in 0..4 {
            let (p, fb) = nw_pi(&f, &cells, 0.5, KernelSpec::new(KernelOrder::Two), false, i);
            assert_eq!(p, 1.0);
            assert!(!fb);
        }
    }

    #[test]
    fn nw_pi_with_no_continuous_covariates_is_cell_mean() {
        let f = ObservationFrame::from_parts(
            vec![0.0; 4],
            vec![0; 4],
            vec![1, 0, 1, 0],
            vec![],
            0,
            vec![],
            0,
            vec![],
            vec![],
        )
        .unwrap();
        let cells = stratify(&f);
        for i in 0..4 {
            let (p, fb) = nw_pi(&f, &cells, 0.5, KernelSpec::new(KernelOrder::Two), false, i);
            assert_eq!(p, 0.5);
            assert!(!fb);
        }
    }

    #[test]
    fn nw_pi_matches_direct_ratio_evaluation() {
        // independent oracle: evaluate the two kernel sums directly
        let x = [0.0, 0.5, 1.0];
        let v = [1.0, 0.0, 1.0];
        let f = frame(vec![0.0; 3], vec![0; 3], vec![1, 0, 1], x.to_vec());
        let cells = stratify(&f);
        let spec = KernelSpec::new(KernelOrder::Two);
        let sigma = 0.6;
        let query = 0.5;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..3 {
            let k = spec.univariate((query - x[j]) / sigma);
            num += k * v[j];
            den += k;
        }
        let (got, fb) = nw_pi(&f, &cells, sigma, spec, false, 1);
        assert!(!fb);
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn nw_v_all_ones_within_arm() {
        let f = frame(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1, 1, 0, 0],
            vec![1, 1, 0, 0],
            vec![0.1, 0.2, 0.3, 0.4],
        );
        let cells = stratify(&f);
        let (v, fb) = nw_v(&f, &cells, 0.9, KernelSpec::new(KernelOrder::Two), false, 0);
        assert_eq!(v, 1.0);
        assert!(!fb);
    }

    #[test]
    fn nw_v_single_point_arm_returns_own_instrument() {
        let f = frame(
            vec![1.0, 2.0, 3.0],
            vec![1, 0, 0],
            vec![0, 1, 1],
            vec![0.1, 0.2, 0.3],
        );
        let cells = stratify(&f);
        let (v, fb) = nw_v(&f, &cells, 0.5, KernelSpec::new(KernelOrder::Two), false, 0);
        assert_eq!(v, 0.0);
        assert!(!fb);
    }

    #[test]
    fn nw_v_four_point_arm_matches_direct_ratio() {
        // sigma large enough that every pair is within support; weights are
        // still non-constant, so the oracle is the direct ratio evaluation
        let y = [0.0, 0.1, 0.2, 0.3];
        let x = [0.0, 0.05, 0.1, 0.15];
        let v = [1.0, 0.0, 1.0, 1.0];
        let f = frame(
            y.to_vec(),
            vec![1; 4],
            vec![1, 0, 1, 1],
            x.to_vec(),
        );
        let cells = stratify(&f);
        let spec = KernelSpec::new(KernelOrder::Two);
        let sigma = 0.9;
        let qi = 2usize;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..4 {
            let k = spec.univariate((y[qi] - y[j]) / sigma)
                * spec.univariate((x[qi] - x[j]) / sigma);
            num += k * v[j];
            den += k;
        }
        let (got, fb) = nw_v(&f, &cells, sigma, spec, false, qi);
        assert!(!fb);
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn nw_shift_equivariance_in_continuous_covariates() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let v: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
        let f = frame(vec![0.0; 12], vec![0; 12], v.clone(), x.clone());
        let shifted = frame(vec![0.0; 12], vec![0; 12], v, x.iter().map(|&a| a + 10.0).collect());
        let cells = stratify(&f);
        let spec = KernelSpec::new(KernelOrder::Two);
        for i in 0..12 {
            let (a, _) = nw_pi(&f, &cells, 0.3, spec, false, i);
            let (b, _) = nw_pi(&shifted, &cells, 0.3, spec, false, i);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_constant_instrument_scores_zero_and_picks_smallest() {
        let f = frame(vec![0.0; 10], vec![0; 10], vec![1; 10], (0..10).map(|i| i as f64 / 9.0).collect());
        let cells = stratify(&f);
        let grid = [0.1, 0.3, 0.5];
        let choice = cv_bandwidth(&f, &cells, KernelSpec::new(KernelOrder::Two), &grid, CvTarget::Pi, 5, false, 1)
            .unwrap();
        assert_eq!(choice.chosen, 0.1);
        for s in &choice.cv_scores {
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn cv_single_element_grid_returns_it() {
        let f = frame(
            vec![0.0; 8],
            vec![0; 8],
            vec![1, 0, 1, 0, 1, 0, 1, 0],
            (0..8).map(|i| i as f64 / 7.0).collect(),
        );
        let cells = stratify(&f);
        let choice = cv_bandwidth(&f, &cells, KernelSpec::new(KernelOrder::Two), &[0.4], CvTarget::Pi, 4, false, 3)
            .unwrap();
        assert_eq!(choice.chosen, 0.4);
    }

    #[test]
    fn cv_matches_bruteforce_reimplementation_on_steep_propensity() {
        // 20 points with a sharp jump in Pr(V=1|x); a mid-grid bandwidth must
        // beat heavy oversmoothing, and the whole score table must equal a
        // straight-line reimplementation of the K-fold criterion.
        let n = 20;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let v: Vec<u8> = x.iter().map(|&a| (a > 0.52) as u8).collect();
        let f = frame(vec![0.0; n], vec![0; n], v.clone(), x.clone());
        let cells = stratify(&f);
        let spec = KernelSpec::new(KernelOrder::Two);
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let folds = 5;
        let seed = 11;
        let choice =
            cv_bandwidth(&f, &cells, spec, &grid, CvTarget::Pi, folds, false, seed).unwrap();

        // brute-force oracle over the same fold assignment
        let fold_of = cv_fold_assignment(n, folds, seed);
        let mut oracle_scores = Vec::new();
        for &sigma in &grid {
            let mut abs = 0.0;
            for i in 0..n {
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..n {
                    if fold_of[j] == fold_of[i] {
                        continue;
                    }
                    let k = spec.univariate((x[i] - x[j]) / sigma);
                    num += k * v[j] as f64;
                    den += k;
                }
                let est = if den > 0.0 {
                    num / den
                } else {
                    // fallback: train mean of V
                    let tr: Vec<f64> = (0..n)
                        .filter(|&j| fold_of[j] != fold_of[i])
                        .map(|j| v[j] as f64)
                        .collect();
                    tr.iter().sum::<f64>() / tr.len() as f64
                };
                abs += (v[i] as f64 - est).abs();
            }
            oracle_scores.push(abs / n as f64);
        }
        for (a, b) in choice.cv_scores.iter().zip(oracle_scores.iter()) {
            assert!((a - b).abs() < 1e-12, "score table mismatch: {a} vs {b}");
        }
        let mut best = 0;
        for (j, &s) in oracle_scores.iter().enumerate() {
            if s < oracle_scores[best] {
                best = j;
            }
        }
        assert_eq!(choice.chosen, grid[best]);
        // oversmoothing strictly worse than the winner
        assert!(choice.cv_scores[8] > choice.cv_scores.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn cv_errors_when_every_grid_point_is_degenerate() {
        // points 10 apart with bandwidth 0.1: once the own point is held
        // out, no training neighbor is ever in range
        let x: Vec<f64> = (0..6).map(|i| 10.0 * i as f64).collect();
        let f = frame(vec![0.0; 6], vec![0; 6], vec![1, 0, 1, 0, 1, 0], x);
        let cells = stratify(&f);
        let err =
            cv_bandwidth(&f, &cells, KernelSpec::new(KernelOrder::Two), &[0.1], CvTarget::Pi, 3, false, 5)
                .unwrap_err();
        assert!(err.to_string().contains("widen the bandwidth grid"));
    }

    #[test]
    fn kappa_identity_on_tabulated_cases() {
        // treated with v_hat = 1: fully complier-consistent
        assert!((kappa_from_parts(1, 1.0, 0.4, 0.01) - 1.0).abs() < 1e-15);
        // treated with v_hat = pi_hat: weight collapses to zero
        assert!(kappa_from_parts(1, 0.6, 0.6, 0.01).abs() < 1e-12);
        // untreated: 1 - v/pi by direct substitution
        assert!((kappa_from_parts(0, 0.3, 0.6, 0.01) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn estimate_kappa_truncates_into_bounds() {
        let n = 24;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let d: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let v: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let f = frame((0..n).map(|i| i as f64 * 0.1).collect(), d, v, x);
        let cells = stratify(&f);
        let w = estimate_kappa(
            &f,
            &cells,
            0.4,
            0.6,
            KernelSpec::new(KernelOrder::Two),
            KernelSpec::new(KernelOrder::Two),
            false,
            0.01,
        );
        let c_l = 10.0 / n as f64;
        let c_u = 1.0 - c_l;
        for (i, &k) in w.kappa_tilde.iter().enumerate() {
            assert!(k >= c_l && k <= c_u, "kappa[{i}]={k} outside [{c_l},{c_u}]");
            assert_eq!(k, w.kappa_raw[i].clamp(c_l, c_u));
        }
        assert_eq!(w.c_l, c_l);
        assert_eq!(w.c_u, c_u);
    }

    #[test]
    fn tiny_sample_truncation_bounds_do_not_cross() {
        let f = frame(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![1, 0, 1, 0],
            vec![1, 0, 0, 1],
            vec![0.1, 0.3, 0.5, 0.7],
        );
        let cells = stratify(&f);
        let w = estimate_kappa(
            &f,
            &cells,
            0.5,
            0.5,
            KernelSpec::new(KernelOrder::Two),
            KernelSpec::new(KernelOrder::Two),
            false,
            0.01,
        );
        assert!(w.c_l <= w.c_u);
        for &k in &w.kappa_tilde {
            assert!(k >= w.c_l && k <= w.c_u);
        }
    }

    #[test]
    fn fully_discrete_kappa_uses_cell_means_exactly() {
        // two discrete cells, no continuous covariates: pi must equal the
        // per-cell empirical mean of V exactly
        let n = 8;
        let disc: Vec<i64> = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let v = vec![1u8, 1, 0, 0, 1, 0, 0, 0];
        let d = vec![1u8, 0, 1, 0, 1, 0, 1, 0];
        let f = ObservationFrame::from_parts(
            (0..n).map(|i| i as f64).collect(),
            d,
            v,
            vec![],
            0,
            disc,
            1,
            vec![],
            vec!["s".into()],
        )
        .unwrap();
        let cells = stratify(&f);
        let w = estimate_kappa(
            &f,
            &cells,
            0.5,
            0.5,
            KernelSpec::new(KernelOrder::Two),
            KernelSpec::new(KernelOrder::Two),
            false,
            0.01,
        );
        for i in 0..4 {
            assert_eq!(w.pi_hat[i], 0.5);
        }
        for i in 4..8 {
            assert_eq!(w.pi_hat[i], 0.25);
        }
    }

    #[test]
    fn complier_proportion_cases() {
        // D = V everywhere
        let f = frame(vec![0.0; 4], vec![1, 0, 1, 0], vec![1, 0, 1, 0], vec![0.0; 4]);
        assert!((complier_proportion(&f).unwrap() - 1.0).abs() < 1e-15);
        // all treated regardless of the instrument
        let f = frame(vec![0.0; 4], vec![1; 4], vec![1, 0, 1, 0], vec![0.0; 4]);
        assert!(complier_proportion(&f).unwrap().abs() < 1e-15);
        // hand-evaluated mixed case
        let f = frame(vec![0.0; 4], vec![1, 1, 0, 0], vec![1, 0, 1, 0], vec![0.0; 4]);
        assert!(complier_proportion(&f).unwrap().abs() < 1e-15);
        // degenerate instrument
        let f = frame(vec![0.0; 4], vec![1, 0, 1, 0], vec![1; 4], vec![0.0; 4]);
        let err = complier_proportion(&f).unwrap_err();
        assert_eq!(err.to_string(), "p_c undefined: degenerate instrument");
    }

    proptest! {
        #[test]
        fn nw_estimates_stay_in_unit_interval(
            xs in proptest::collection::vec(-1.0f64..1.0, 3..20),
            bits in proptest::collection::vec(0u8..2, 3..40),
            sigma in 0.05f64..1.5
        ) {
            let n = xs.len();
            let v: Vec<u8> = (0..n).map(|i| bits[i % bits.len()]).collect();
            let d: Vec<u8> = (0..n).map(|i| bits[(i * 7 + 1) % bits.len()]).collect();
            let f = frame(xs.iter().map(|&x| x * 2.0).collect(), d, v, xs.clone());
            let cells = stratify(&f);
            for i in 0..n {
                let (p, _) = nw_pi(&f, &cells, sigma, KernelSpec::new(KernelOrder::Two), false, i);
                prop_assert!((0.0..=1.0).contains(&p));
                let (q, _) = nw_v(&f, &cells, sigma, KernelSpec::new(KernelOrder::Two), false, i);
                prop_assert!((0.0..=1.0).contains(&q));
            }
        }

        #[test]
        fn truncation_bounds_hold_on_fuzzed_inputs(
            raw in proptest::collection::vec((0u8..2, 0.0f64..1.0, 0.0f64..1.0), 21..60),
            sigma1 in 0.1f64..1.0,
            sigma2 in 0.1f64..1.0,
        ) {
            let n = raw.len();
            let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let d: Vec<u8> = raw.iter().map(|r| r.0).collect();
            let v: Vec<u8> = raw.iter().map(|r| (r.1 > 0.5) as u8).collect();
            let x: Vec<f64> = raw.iter().map(|r| r.2).collect();
            let f = frame(y, d, v, x);
            let cells = stratify(&f);
            let w = estimate_kappa(
                &f, &cells, sigma1, sigma2,
                KernelSpec::new(KernelOrder::Two), KernelSpec::new(KernelOrder::Two),
                false, 0.01,
            );
            let c_l = 10.0 / n as f64;
            let c_u = 1.0 - c_l;
            for &k in &w.kappa_tilde {
                prop_assert!(k >= c_l - 1e-15 && k <= c_u + 1e-15);
            }
        }
    }
}
