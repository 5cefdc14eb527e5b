//! Monte-Carlo simulation lab: latent-group data generation, closed-form
//! true effects, and replication runs producing bias / variance / coverage
//! metrics for the proposed, oracle and naive estimators.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bootstrap::{bootstrap_many, BootstrapConfig, CiMethod};
use crate::config::{FitOptions, WeightMode};
use crate::data::ObservationFrame;
use crate::error::Result;
use crate::rng::{self, tag};
use crate::stats::{mean, sample_variance};

/// Covariate scenario: X1 uniform with a binary X2, or both covariates
/// binary (exercising the fully stratified empirical propensity path).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ContinuousX,
    DiscreteX,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::ContinuousX => "continuous",
            Scenario::DiscreteX => "discrete",
        })
    }
}

/// Data-generating process settings.
#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub n: usize,
    pub scenario: Scenario,
    /// (complier, always-taker, never-taker) probabilities
    pub group_probs: [f64; 3],
    pub sigma_eps: f64,
    pub sigma_nc: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 500,
            scenario: Scenario::ContinuousX,
            group_probs: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            sigma_eps: 0.5,
            sigma_nc: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentGroup {
    Complier,
    AlwaysTaker,
    NeverTaker,
}

impl LatentGroup {
    /// Potential treatments (D1, D0); no group has D1 < D0.
    pub fn potential_treatments(self) -> (u8, u8) {
        match self {
            LatentGroup::Complier => (1, 0),
            LatentGroup::AlwaysTaker => (1, 1),
            LatentGroup::NeverTaker => (0, 0),
        }
    }
}

pub fn complier_indicator(groups: &[LatentGroup]) -> Vec<bool> {
    groups.iter().map(|&g| g == LatentGroup::Complier).collect()
}

/// Generate one dataset. The instrument follows a Bernoulli draw with
/// log-odds 0.1 X2 + X1^2 + X1 X2 + eps, where the latent eps makes the
/// propensity deviate from a logistic model; compliers take D = V,
/// always-takers D = 1, never-takers D = 0. Complier outcomes follow
/// log(tau) - 0.2 X1 - 0.3 X2 + 0.5 exp(0.3 tau) D with tau uniform;
/// non-compliers follow -0.1 X1 - 0.2 X2 + 0.2 D + noise.
pub fn gen_dataset<R: Rng>(spec: &DgpSpec, rng: &mut R) -> (ObservationFrame, Vec<LatentGroup>) {
    let n = spec.n;
    let [p_c, p_a, _] = spec.group_probs;
    let normal_eps = Normal::new(0.0, spec.sigma_eps).expect("valid sigma");
    let normal_nc = Normal::new(0.0, spec.sigma_nc).expect("valid sigma");

    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut x_cont = Vec::new();
    let mut x_disc = Vec::new();
    let mut groups = Vec::with_capacity(n);

    for _ in 0..n {
        let ug: f64 = rng.random();
        let group = if ug < p_c {
            LatentGroup::Complier
        } else if ug < p_c + p_a {
            LatentGroup::AlwaysTaker
        } else {
            LatentGroup::NeverTaker
        };

        let (x1, x2) = match spec.scenario {
            Scenario::ContinuousX => (rng.random::<f64>(), f64::from(rng.random::<f64>() < 0.5)),
            Scenario::DiscreteX => (
                f64::from(rng.random::<f64>() < 0.5),
                f64::from(rng.random::<f64>() < 0.5),
            ),
        };
        let eps = normal_eps.sample(rng);
        let logit = 0.1 * x2 + x1 * x1 + x1 * x2 + eps;
        let pi = logit.exp() / (1.0 + logit.exp());
        let vi = u8::from(rng.random::<f64>() < pi);
        let di = match group {
            LatentGroup::Complier => vi,
            LatentGroup::AlwaysTaker => 1,
            LatentGroup::NeverTaker => 0,
        };
        let tau: f64 = rng.random();
        let eps_nc = normal_nc.sample(rng);
        let yi = match group {
            LatentGroup::Complier => {
                tau.ln() - 0.2 * x1 - 0.3 * x2 + 0.5 * (0.3 * tau).exp() * f64::from(di)
            }
            _ => -0.1 * x1 - 0.2 * x2 + 0.2 * f64::from(di) + eps_nc,
        };

        y.push(yi);
        d.push(di);
        v.push(vi);
        match spec.scenario {
            Scenario::ContinuousX => {
                x_cont.push(x1);
                x_disc.push(x2 as i64);
            }
            Scenario::DiscreteX => {
                x_disc.push(x1 as i64);
                x_disc.push(x2 as i64);
            }
        }
        groups.push(group);
    }

    let frame = match spec.scenario {
        Scenario::ContinuousX => ObservationFrame::from_parts(
            y,
            d,
            v,
            x_cont,
            1,
            x_disc,
            1,
            vec!["x1".into()],
            vec!["x2".into()],
        ),
        Scenario::DiscreteX => ObservationFrame::from_parts(
            y,
            d,
            v,
            x_cont,
            0,
            x_disc,
            2,
            vec![],
            vec!["x1".into(), "x2".into()],
        ),
    }
    .expect("generated data is valid");
    (frame, groups)
}

/// Closed-form true effects under the simulated outcome model.
#[derive(Debug, Clone, Copy)]
pub struct TruthRow {
    pub alpha: f64,
    /// complier quantile treatment effect 0.5 exp(0.3 alpha)
    pub beta1: f64,
    /// complier shortfall treatment effect 0.5 (exp(0.3 alpha) - 1)/(0.3 alpha)
    pub gamma1: f64,
    pub quantile_intercept: f64,
    pub shortfall_intercept: f64,
    pub covariate_effects: [f64; 2],
}

pub fn true_effects(alpha: f64) -> TruthRow {
    assert!(alpha > 0.0 && alpha < 1.0);
    let beta1 = 0.5 * (0.3 * alpha).exp();
    let gamma1 = 0.5 * ((0.3 * alpha).exp() - 1.0) / (0.3 * alpha);
    TruthRow {
        alpha,
        beta1,
        gamma1,
        quantile_intercept: alpha.ln(),
        shortfall_intercept: alpha.ln() - 1.0,
        covariate_effects: [-0.2, -0.3],
    }
}

/// One metrics row of a replication study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Beta1,
    Gamma1,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Beta1 => "beta1",
            Target::Gamma1 => "gamma1",
        })
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub alpha: f64,
    pub n: usize,
    pub estimator: WeightMode,
    pub target: Target,
    pub bias: f64,
    pub emp_var: f64,
    pub boot_var: f64,
    pub cov95: f64,
    pub n_reps: usize,
    pub b: usize,
}

/// Replication study settings. `fit.weight_mode` is overridden by each entry
/// of `estimators`.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dgp: DgpSpec,
    pub alphas: Vec<f64>,
    pub estimators: Vec<WeightMode>,
    pub replications: usize,
    pub bootstrap_replicates: usize,
    pub ci_level: f64,
    pub fit: FitOptions,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub rows: Vec<MetricsRow>,
    /// count of (replication, estimator) fits that failed and were excluded
    pub failed_fits: usize,
}

struct RepRecord {
    beta1: f64,
    gamma1: f64,
    se_beta1: f64,
    se_gamma1: f64,
    beta1_covered: bool,
    gamma1_covered: bool,
}

/// Run the full replication study: generate data, fit every estimator at
/// every level, bootstrap the standard errors, and aggregate bias,
/// empirical variance, mean bootstrap variance and coverage.
pub fn run_replications(cfg: &SimConfig) -> Result<SimOutcome> {
    let truths: Vec<TruthRow> = cfg.alphas.iter().map(|&a| true_effects(a)).collect();

    // per replication: per estimator: per alpha record (None on failure)
    let results: Vec<Vec<Option<Vec<RepRecord>>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = rng::derive_seed(cfg.seed, tag::REPLICATION, r as u64);
            let mut data_rng = rng::substream(rep_seed, tag::DGP, 0);
            let (frame, groups) = gen_dataset(&cfg.dgp, &mut data_rng);
            let ind = complier_indicator(&groups);

            cfg.estimators
                .iter()
                .enumerate()
                .map(|(e_idx, &mode)| {
                    let mut opts = cfg.fit.clone();
                    opts.weight_mode = mode;
                    let bcfg = BootstrapConfig {
                        replicates: cfg.bootstrap_replicates,
                        seed: rng::derive_seed(rep_seed, tag::BOOTSTRAP, e_idx as u64),
                        ci_level: cfg.ci_level,
                        ci_method: CiMethod::Normal,
                        reselect_bandwidths: false,
                    };
                    match bootstrap_many(&frame, &opts, &bcfg, &cfg.alphas, Some(&ind)) {
                        Ok(fits) => Some(
                            fits.iter()
                                .zip(truths.iter())
                                .map(|((est, boot), truth)| {
                                    let k = boot.dim();
                                    let (b_lo, b_hi) = boot.ci[0];
                                    let (g_lo, g_hi) = boot.ci[k];
                                    RepRecord {
                                        beta1: est.beta1,
                                        gamma1: est.gamma1,
                                        se_beta1: boot.se[0],
                                        se_gamma1: boot.se[k],
                                        beta1_covered: b_lo <= truth.beta1
                                            && truth.beta1 <= b_hi,
                                        gamma1_covered: g_lo <= truth.gamma1
                                            && truth.gamma1 <= g_hi,
                                    }
                                })
                                .collect(),
                        ),
                        Err(_) => None,
                    }
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut failed_fits = 0usize;
    for (e_idx, &mode) in cfg.estimators.iter().enumerate() {
        failed_fits += results.iter().filter(|rep| rep[e_idx].is_none()).count();
        for (a_idx, truth) in truths.iter().enumerate() {
            let records: Vec<&RepRecord> = results
                .iter()
                .filter_map(|rep| rep[e_idx].as_ref())
                .map(|recs| &recs[a_idx])
                .collect();
            let n_reps = records.len();
            for target in [Target::Beta1, Target::Gamma1] {
                let (estimates, boot_vars, covered): (Vec<f64>, Vec<f64>, Vec<f64>) =
                    match target {
                        Target::Beta1 => (
                            records.iter().map(|r| r.beta1).collect(),
                            records.iter().map(|r| r.se_beta1 * r.se_beta1).collect(),
                            records.iter().map(|r| f64::from(r.beta1_covered)).collect(),
                        ),
                        Target::Gamma1 => (
                            records.iter().map(|r| r.gamma1).collect(),
                            records.iter().map(|r| r.se_gamma1 * r.se_gamma1).collect(),
                            records.iter().map(|r| f64::from(r.gamma1_covered)).collect(),
                        ),
                    };
                let truth_value = match target {
                    Target::Beta1 => truth.beta1,
                    Target::Gamma1 => truth.gamma1,
                };
                rows.push(MetricsRow {
                    alpha: truth.alpha,
                    n: cfg.dgp.n,
                    estimator: mode,
                    target,
                    bias: mean(&estimates) - truth_value,
                    emp_var: sample_variance(&estimates),
                    boot_var: mean(&boot_vars),
                    cov95: mean(&covered),
                    n_reps,
                    b: cfg.bootstrap_replicates,
                });
            }
        }
    }
    Ok(SimOutcome { rows, failed_fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BandwidthPolicy, Tail};
    use crate::kernel::{complier_proportion, KernelOrder};
    use crate::stats::simpson;

    #[test]
    fn all_compliers_means_treatment_follows_instrument() {
        let spec = DgpSpec { n: 200, group_probs: [1.0, 0.0, 0.0], ..Default::default() };
        let mut r = rng::substream(1, tag::DGP, 0);
        let (frame, groups) = gen_dataset(&spec, &mut r);
        assert!(groups.iter().all(|&g| g == LatentGroup::Complier));
        assert_eq!(frame.d(), frame.v());
    }

    #[test]
    fn all_always_takers_are_treated_regardless_of_instrument() {
        let spec = DgpSpec { n: 200, group_probs: [0.0, 1.0, 0.0], ..Default::default() };
        let mut r = rng::substream(2, tag::DGP, 0);
        let (frame, _) = gen_dataset(&spec, &mut r);
        assert!(frame.d().iter().all(|&d| d == 1));
    }

    #[test]
    fn no_latent_group_has_decreasing_potential_treatment() {
        let spec = DgpSpec { n: 500, ..Default::default() };
        let mut r = rng::substream(3, tag::DGP, 0);
        let (frame, groups) = gen_dataset(&spec, &mut r);
        let mut defiers = 0;
        for (i, g) in groups.iter().enumerate() {
            let (d1, d0) = g.potential_treatments();
            assert!(d1 >= d0);
            if d1 < d0 {
                defiers += 1;
            }
            // generated treatment is consistent with the latent labels
            let expect = match g {
                LatentGroup::Complier => frame.v()[i],
                LatentGroup::AlwaysTaker => 1,
                LatentGroup::NeverTaker => 0,
            };
            assert_eq!(frame.d()[i], expect);
        }
        assert_eq!(defiers, 0);
    }

    #[test]
    fn sample_complier_share_concentrates_at_two_thirds() {
        let spec = DgpSpec { n: 100_000, ..Default::default() };
        let mut r = rng::substream(4, tag::DGP, 0);
        let (frame, _) = gen_dataset(&spec, &mut r);
        let pc = complier_proportion(&frame).unwrap();
        assert!((pc - 2.0 / 3.0).abs() < 0.01, "p_c = {pc}");
    }

    #[test]
    fn shortfall_truth_is_the_quantile_truth_averaged() {
        // quadrature oracle for gamma1 = (1/alpha) integral of beta1(u)
        for &alpha in &[0.1, 0.2, 0.3, 0.4, 0.5] {
            let t = true_effects(alpha);
            let integral = simpson(|u| 0.5 * (0.3 * u).exp(), 0.0, alpha, 2048);
            assert!(
                (t.gamma1 - integral / alpha).abs() < 1e-10,
                "alpha {alpha}: {} vs {}",
                t.gamma1,
                integral / alpha
            );
            // intercept consistency under the same averaging
            let int_intercept = simpson(|u: f64| u.ln(), 1e-12, alpha, 1 << 16);
            assert!((t.shortfall_intercept - int_intercept / alpha).abs() < 1e-4);
        }
    }

    #[test]
    fn shortfall_truth_limit_at_zero() {
        let t = true_effects(1e-8);
        assert!((t.gamma1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn known_values_at_level_point_three() {
        let t = true_effects(0.3);
        assert!((t.beta1 - 0.547088).abs() < 2e-6);
        assert!((t.gamma1 - 0.523189).abs() < 2e-6);
        let t5 = true_effects(0.5);
        assert!((t5.gamma1 - 0.5 * ((0.15f64).exp() - 1.0) / 0.15).abs() < 1e-15);
    }

    fn tiny_sim_config() -> SimConfig {
        SimConfig {
            dgp: DgpSpec { n: 120, seed: 0, ..Default::default() },
            alphas: vec![0.3],
            estimators: vec![WeightMode::Naive],
            replications: 2,
            bootstrap_replicates: 2,
            ci_level: 0.95,
            fit: FitOptions {
                tail: Tail::Lower,
                weight_mode: WeightMode::Naive,
                kernel_order_pi: KernelOrder::Two,
                kernel_order_v: KernelOrder::Two,
                bandwidth: BandwidthPolicy::Fixed { sigma1: 0.3, sigma2: 0.3 },
                standardize: false,
                pi_clamp: 0.01,
            },
            seed: 99,
        }
    }

    #[test]
    fn two_replication_variance_matches_the_two_point_formula() {
        let cfg = tiny_sim_config();
        let out = run_replications(&cfg).unwrap();

        // reconstruct the two per-replication estimates with the same
        // substreams and check the aggregated sample variance
        let mut draws = Vec::new();
        for r in 0..2u64 {
            let rep_seed = rng::derive_seed(cfg.seed, tag::REPLICATION, r);
            let mut data_rng = rng::substream(rep_seed, tag::DGP, 0);
            let (frame, groups) = gen_dataset(&cfg.dgp, &mut data_rng);
            let ind = complier_indicator(&groups);
            let mut opts = cfg.fit.clone();
            opts.weight_mode = WeightMode::Naive;
            let bcfg = BootstrapConfig {
                replicates: 2,
                seed: rng::derive_seed(rep_seed, tag::BOOTSTRAP, 0),
                ci_level: 0.95,
                ci_method: CiMethod::Normal,
                reselect_bandwidths: false,
            };
            let fits = bootstrap_many(&frame, &opts, &bcfg, &cfg.alphas, Some(&ind)).unwrap();
            draws.push(fits[0].0.gamma1);
        }
        let expected = sample_variance(&draws);
        let row = out
            .rows
            .iter()
            .find(|r| r.target == Target::Gamma1)
            .unwrap();
        assert!((row.emp_var - expected).abs() < 1e-12);
        assert_eq!(row.n_reps, 2);
    }

    #[test]
    fn replication_runs_are_deterministic() {
        let cfg = tiny_sim_config();
        let a = run_replications(&cfg).unwrap();
        let b = run_replications(&cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.bias, y.bias);
            assert_eq!(x.emp_var, y.emp_var);
            assert_eq!(x.boot_var, y.boot_var);
            assert_eq!(x.cov95, y.cov95);
        }
    }
}
