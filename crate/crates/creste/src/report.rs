//! Machine-readable report rendering for estimates and simulation metrics.
//!
//! CSV reports start with a comment block of `# key = value` lines holding
//! the effective configuration, so a report can be replayed: feeding it back
//! as a config file reproduces the run. Floats are written in shortest
//! round-trip form, making repeated runs byte-identical.

use serde_json::{json, Map, Value};

use crate::bootstrap::BootstrapResult;
use crate::shortfall::CresteEstimate;
use crate::sim::MetricsRow;

/// One per-level row of an estimation report.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub alpha: f64,
    pub beta1: f64,
    pub gamma1: f64,
    pub beta1_se: f64,
    pub gamma1_se: f64,
    pub beta1_ci: (f64, f64),
    pub gamma1_ci: (f64, f64),
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub truncated_count: usize,
    pub pi_fallbacks: usize,
    pub v_fallbacks: usize,
    pub boot_failed: usize,
    pub boot_unreliable: bool,
    pub coefficient_names: Vec<String>,
    pub beta_full: Vec<f64>,
    pub gamma_full: Vec<f64>,
    pub beta_se_full: Vec<f64>,
    pub gamma_se_full: Vec<f64>,
}

impl EstimateRow {
    pub fn from_fit(est: &CresteEstimate, boot: &BootstrapResult, names: &[String]) -> Self {
        let k = boot.dim();
        Self {
            alpha: est.alpha,
            beta1: est.beta1,
            gamma1: est.gamma1,
            beta1_se: boot.se[0],
            gamma1_se: boot.se[k],
            beta1_ci: boot.ci[0],
            gamma1_ci: boot.ci[k],
            sigma1: est.weights_meta.sigma1,
            sigma2: est.weights_meta.sigma2,
            truncated_count: est.weights_meta.truncated_count,
            pi_fallbacks: est.weights_meta.pi_fallback_count,
            v_fallbacks: est.weights_meta.v_fallback_count,
            boot_failed: boot.failed,
            boot_unreliable: boot.unreliable,
            coefficient_names: names.to_vec(),
            beta_full: est.beta_full.clone(),
            gamma_full: est.gamma_full.clone(),
            beta_se_full: boot.se[..k].to_vec(),
            gamma_se_full: boot.se[k..].to_vec(),
        }
    }
}

/// A full estimation report: effective configuration plus per-level rows.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub config: Vec<(String, String)>,
    pub complier_proportion: f64,
    pub rows: Vec<EstimateRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EstimateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(&format!("# complier_proportion = {}\n", self.complier_proportion));
        out.push_str(
            "alpha,beta1,gamma1,beta1_se,gamma1_se,beta1_ci_lower,beta1_ci_upper,\
             gamma1_ci_lower,gamma1_ci_upper,p_c,sigma1,sigma2,truncated_count,\
             pi_fallbacks,v_fallbacks,boot_failed,boot_unreliable\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.alpha,
                r.beta1,
                r.gamma1,
                r.beta1_se,
                r.gamma1_se,
                r.beta1_ci.0,
                r.beta1_ci.1,
                r.gamma1_ci.0,
                r.gamma1_ci.1,
                self.complier_proportion,
                opt(r.sigma1),
                opt(r.sigma2),
                r.truncated_count,
                r.pi_fallbacks,
                r.v_fallbacks,
                r.boot_failed,
                r.boot_unreliable,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let config: Map<String, Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "alpha": r.alpha,
                    "beta1": r.beta1,
                    "gamma1": r.gamma1,
                    "beta1_se": r.beta1_se,
                    "gamma1_se": r.gamma1_se,
                    "beta1_ci": [r.beta1_ci.0, r.beta1_ci.1],
                    "gamma1_ci": [r.gamma1_ci.0, r.gamma1_ci.1],
                    "sigma1": r.sigma1,
                    "sigma2": r.sigma2,
                    "truncated_count": r.truncated_count,
                    "pi_fallbacks": r.pi_fallbacks,
                    "v_fallbacks": r.v_fallbacks,
                    "boot_failed": r.boot_failed,
                    "boot_unreliable": r.boot_unreliable,
                    "coefficients": {
                        "names": r.coefficient_names,
                        "beta": r.beta_full,
                        "gamma": r.gamma_full,
                        "beta_se": r.beta_se_full,
                        "gamma_se": r.gamma_se_full,
                    },
                })
            })
            .collect();
        let doc = json!({
            "config": Value::Object(config),
            "complier_proportion": self.complier_proportion,
            "estimates": rows,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

/// Simulation metrics as CSV with the same replayable config comment block.
pub fn metrics_to_csv(rows: &[MetricsRow], config: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in config {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out.push_str("alpha,n,estimator,target,bias,emp_var,boot_var,cov95,n_reps,b\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.alpha, r.n, r.estimator, r.target, r.bias, r.emp_var, r.boot_var, r.cov95,
            r.n_reps, r.b
        ));
    }
    out
}

/// Human-readable table grouped by (alpha, n): one block of bias, empirical
/// variance, mean bootstrap variance and coverage per estimator and target.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    use std::collections::BTreeSet;
    let mut keys: BTreeSet<(u64, usize)> = BTreeSet::new();
    for r in rows {
        keys.insert((r.alpha.to_bits(), r.n));
    }
    let mut headers: Vec<String> = Vec::new();
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in rows {
        let h = (r.estimator.to_string(), r.target.to_string());
        if !columns.contains(&h) {
            headers.push(format!("{}:{}", h.0, h.1));
            columns.push(h);
        }
    }

    let mut out = String::new();
    out.push_str(&format!("{:>6} {:>6} {:>9}", "alpha", "n", "metric"));
    for h in &headers {
        out.push_str(&format!(" {h:>16}"));
    }
    out.push('\n');
    for (alpha_bits, n) in keys {
        let alpha = f64::from_bits(alpha_bits);
        for (metric, pick) in [
            ("bias", 0usize),
            ("emp_var", 1),
            ("boot_var", 2),
            ("cov95", 3),
        ] {
            out.push_str(&format!("{alpha:>6} {n:>6} {metric:>9}"));
            for (est, tgt) in &columns {
                let cell = rows
                    .iter()
                    .find(|r| {
                        r.alpha.to_bits() == alpha_bits
                            && r.n == n
                            && r.estimator.to_string() == *est
                            && r.target.to_string() == *tgt
                    })
                    .map(|r| match pick {
                        0 => r.bias,
                        1 => r.emp_var,
                        2 => r.boot_var,
                        _ => r.cov95,
                    });
                match cell {
                    Some(v) => out.push_str(&format!(" {v:>16.6}")),
                    None => out.push_str(&format!(" {:>16}", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WeightMode;
    use crate::sim::Target;

    fn sample_rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow {
                alpha: 0.3,
                n: 100,
                estimator: WeightMode::Naive,
                target: Target::Gamma1,
                bias: -0.2,
                emp_var: 0.01,
                boot_var: 0.011,
                cov95: 0.5,
                n_reps: 10,
                b: 4,
            },
            MetricsRow {
                alpha: 0.3,
                n: 100,
                estimator: WeightMode::Naive,
                target: Target::Beta1,
                bias: -0.1,
                emp_var: 0.02,
                boot_var: 0.021,
                cov95: 0.6,
                n_reps: 10,
                b: 4,
            },
        ]
    }

    #[test]
    fn metrics_csv_has_config_comments_and_rows() {
        let csv = metrics_to_csv(&sample_rows(), &[("seed".into(), "7".into())]);
        assert!(csv.starts_with("# seed = 7\n"));
        assert!(csv.contains("alpha,n,estimator,target"));
        assert!(csv.contains("0.3,100,naive,gamma1,-0.2,"));
    }

    #[test]
    fn metrics_table_renders_every_metric_line() {
        let t = metrics_table(&sample_rows());
        for m in ["bias", "emp_var", "boot_var", "cov95"] {
            assert!(t.contains(m), "missing {m} in\n{t}");
        }
    }

    #[test]
    fn estimate_report_csv_is_replayable_and_stable() {
        let report = EstimateReport {
            config: vec![("alphas".into(), "0.25".into()), ("seed".into(), "1".into())],
            complier_proportion: 0.625,
            rows: vec![EstimateRow {
                alpha: 0.25,
                beta1: 1.0,
                gamma1: 0.5,
                beta1_se: 0.1,
                gamma1_se: 0.2,
                beta1_ci: (0.8, 1.2),
                gamma1_ci: (0.1, 0.9),
                sigma1: Some(0.3),
                sigma2: None,
                truncated_count: 2,
                pi_fallbacks: 0,
                v_fallbacks: 1,
                boot_failed: 0,
                boot_unreliable: false,
                coefficient_names: vec!["d".into(), "intercept".into()],
                beta_full: vec![1.0, 0.0],
                gamma_full: vec![0.5, -0.1],
                beta_se_full: vec![0.1, 0.05],
                gamma_se_full: vec![0.2, 0.07],
            }],
        };
        let a = report.to_csv();
        let b = report.to_csv();
        assert_eq!(a, b);
        assert!(a.contains("# alphas = 0.25\n"));
        assert!(a.contains("0.25,1,0.5,0.1,0.2,0.8,1.2,0.1,0.9,0.625,0.3,,2,0,1,0,false\n"));
        let j = report.to_json();
        assert!(j.contains("\"complier_proportion\""));
    }
}
