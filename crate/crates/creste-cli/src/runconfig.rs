//! Config parsing, merging and execution for the CLI.
//!
//! Configuration is a flat `key = value` map. Values come from an optional
//! config file first, then command-line flags override. Unknown keys are
//! ignored, which lets a previously written report (whose comment block
//! also carries `creste_version` and `complier_proportion`) serve as a
//! config file verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use creste::{
    bootstrap_many, complier_proportion, metrics_table, metrics_to_csv, run_replications,
    BandwidthPolicy, BootstrapConfig, CiMethod, ColumnSchema, DgpSpec, EstimateReport,
    EstimateRow, Error as CoreError, FitOptions, KernelOrder, ObservationFrame, Scenario,
    SimConfig, Tail, WeightMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: msg.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    /// Single-line machine-parsable diagnostic.
    pub fn diagnostic(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        };
        format!("error: code={} kind={} msg=\"{}\"", self.exit_code(), kind, self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::MissingColumn { .. }
            | CoreError::NonBinary { .. }
            | CoreError::NonNumeric { .. }
            | CoreError::MissingValue { .. }
            | CoreError::NonFinite { .. }
            | CoreError::EmptyInput
            | CoreError::Csv(_)
            | CoreError::Io(_) => ErrorKind::Data,
            CoreError::InvalidArgument(_) => ErrorKind::Config,
            CoreError::DegenerateInstrument
            | CoreError::DegenerateBandwidthGrid
            | CoreError::CollinearDesign { .. }
            | CoreError::SingularGram { .. }
            | CoreError::NoConvergence(_) => ErrorKind::Numerical,
        };
        Self { kind, message: e.to_string() }
    }
}

/// Flat key-value configuration with file parsing and flag overrides.
#[derive(Debug, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Parse `key = value` lines. Leading `# ` is stripped so report comment
    /// blocks replay directly; lines without `=` are ignored.
    pub fn from_file(path: Option<&str>) -> Result<Self, CliError> {
        let mut map = Self::default();
        let Some(path) = path else {
            return Ok(map);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config file {path}: {e}")))?;
        for line in text.lines() {
            let line = line.trim();
            let line = line.strip_prefix("# ").unwrap_or(line).trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            map.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<&str>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Estimate,
    Simulate,
}

/// Fully resolved run settings with paper-default values.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: Mode,
    // estimate inputs
    pub input: Option<String>,
    pub response: String,
    pub treatment: String,
    pub instrument: String,
    pub continuous: Vec<String>,
    pub discrete: Vec<String>,
    // simulate inputs
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<WeightMode>,
    // shared estimation settings
    pub alphas: Vec<f64>,
    pub tail: Tail,
    pub weight_mode: WeightMode,
    pub kernel_order_pi: KernelOrder,
    pub kernel_order_v: KernelOrder,
    pub bandwidth_grid: Vec<f64>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub cv_folds: usize,
    pub standardize: bool,
    pub pi_clamp: f64,
    pub bootstrap_b: usize,
    pub ci_level: f64,
    pub ci_method: CiMethod,
    pub reselect_bandwidths: bool,
    pub seed: u64,
    pub threads: usize,
    pub output: String,
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

fn parse_num<T: std::str::FromStr>(map: &ConfigMap, key: &str, default: T) -> Result<T, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("invalid value for `{key}`: {v}"))),
    }
}

fn parse_bool(map: &ConfigMap, key: &str, default: bool) -> Result<bool, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some("true") | Some("1") => Ok(true),
        Some("false") | Some("0") => Ok(false),
        Some(v) => Err(CliError::config(format!("invalid value for `{key}`: {v}"))),
    }
}

fn parse_f64_list(map: &ConfigMap, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .split(',')
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::config(format!("invalid value for `{key}`: {t}")))
            })
            .collect(),
    }
}

fn parse_name_list(map: &ConfigMap, key: &str) -> Vec<String> {
    map.get(key)
        .map(|v| {
            v.split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

impl RunSettings {
    pub fn from_map(map: ConfigMap) -> Result<Self, CliError> {
        let mode = match map.get("mode") {
            Some("estimate") => Mode::Estimate,
            Some("simulate") => Mode::Simulate,
            other => {
                return Err(CliError::config(format!(
                    "mode must be estimate or simulate, got {other:?}"
                )))
            }
        };

        let tail = match map.get("tail").unwrap_or("lower") {
            "lower" => Tail::Lower,
            "upper" => Tail::Upper,
            v => return Err(CliError::config(format!("invalid value for `tail`: {v}"))),
        };
        let weight_mode = parse_weight_mode(map.get("weight_mode").unwrap_or("proposed"))?;
        let kernel_order_pi = parse_order(&map, "kernel_order_pi")?;
        let kernel_order_v = parse_order(&map, "kernel_order_v")?;
        let ci_method = match map.get("ci_method").unwrap_or("normal") {
            "normal" => CiMethod::Normal,
            "percentile" => CiMethod::Percentile,
            v => return Err(CliError::config(format!("invalid value for `ci_method`: {v}"))),
        };
        let format = match map.get("format").unwrap_or("csv") {
            "csv" => Format::Csv,
            "json" => Format::Json,
            v => return Err(CliError::config(format!("invalid value for `format`: {v}"))),
        };
        let scenario = match map.get("scenario").unwrap_or("continuous") {
            "continuous" => Scenario::ContinuousX,
            "discrete" => Scenario::DiscreteX,
            v => return Err(CliError::config(format!("invalid value for `scenario`: {v}"))),
        };
        let estimators = match map.get("estimators") {
            None => vec![WeightMode::Proposed, WeightMode::Oracle, WeightMode::Naive],
            Some(v) => v
                .split(',')
                .map(|t| parse_weight_mode(t.trim()))
                .collect::<Result<_, _>>()?,
        };

        let default_output = match mode {
            Mode::Estimate => "creste_estimates.csv",
            Mode::Simulate => "creste_metrics.csv",
        };

        let settings = Self {
            mode,
            input: map.get("input").map(str::to_string),
            response: map.get("response").unwrap_or("y").to_string(),
            treatment: map.get("treatment").unwrap_or("d").to_string(),
            instrument: map.get("instrument").unwrap_or("v").to_string(),
            continuous: parse_name_list(&map, "continuous"),
            discrete: parse_name_list(&map, "discrete"),
            scenario,
            n: parse_num(&map, "n", 500usize)?,
            reps: parse_num(&map, "reps", 200usize)?,
            estimators,
            alphas: parse_f64_list(&map, "alphas", vec![0.1, 0.2, 0.3, 0.4, 0.5])?,
            tail,
            weight_mode,
            kernel_order_pi,
            kernel_order_v,
            bandwidth_grid: parse_f64_list(
                &map,
                "bandwidth_grid",
                creste::default_grid(),
            )?,
            sigma1: match map.get("sigma1") {
                None | Some("") => None,
                Some(v) => Some(v.parse().map_err(|_| {
                    CliError::config(format!("invalid value for `sigma1`: {v}"))
                })?),
            },
            sigma2: match map.get("sigma2") {
                None | Some("") => None,
                Some(v) => Some(v.parse().map_err(|_| {
                    CliError::config(format!("invalid value for `sigma2`: {v}"))
                })?),
            },
            cv_folds: parse_num(&map, "cv_folds", 5usize)?,
            standardize: parse_bool(&map, "standardize", false)?,
            pi_clamp: parse_num(&map, "pi_clamp", 0.01f64)?,
            bootstrap_b: parse_num(&map, "bootstrap_b", 200usize)?,
            ci_level: parse_num(&map, "ci_level", 0.95f64)?,
            ci_method,
            reselect_bandwidths: parse_bool(&map, "reselect_bandwidths", false)?,
            seed: parse_num(&map, "seed", 17u64)?,
            threads: parse_num(&map, "threads", 0usize)?,
            output: map.get("output").unwrap_or(default_output).to_string(),
            format,
        };
        settings.validate()?;
        Ok(settings)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.alphas.is_empty() {
            return Err(CliError::config("at least one level is required in `alphas`"));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::config(format!("alpha {a} must lie strictly in (0,1)")));
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(CliError::config("ci_level must lie strictly in (0,1)"));
        }
        if self.sigma1.is_some() != self.sigma2.is_some() {
            return Err(CliError::config(
                "sigma1 and sigma2 must be given together (or neither)",
            ));
        }
        if self.mode == Mode::Estimate && self.weight_mode == WeightMode::Oracle {
            return Err(CliError::config(
                "oracle weighting needs latent complier labels; it is available only in simulate",
            ));
        }
        Ok(())
    }

    pub fn init_threads(&self) {
        if self.threads > 0 {
            // ignore failure: the global pool can only be set once
            let _ = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build_global();
        }
    }

    fn fit_options(&self) -> FitOptions {
        let bandwidth = match (self.sigma1, self.sigma2) {
            (Some(s1), Some(s2)) => BandwidthPolicy::Fixed { sigma1: s1, sigma2: s2 },
            _ => BandwidthPolicy::CrossValidated {
                grid: self.bandwidth_grid.clone(),
                folds: self.cv_folds,
            },
        };
        FitOptions {
            tail: self.tail,
            weight_mode: self.weight_mode,
            kernel_order_pi: self.kernel_order_pi,
            kernel_order_v: self.kernel_order_v,
            bandwidth,
            standardize: self.standardize,
            pi_clamp: self.pi_clamp,
        }
    }

    fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.bootstrap_b,
            seed: self.seed,
            ci_level: self.ci_level,
            ci_method: self.ci_method,
            reselect_bandwidths: self.reselect_bandwidths,
        }
    }

    /// Canonical key order; this block is written into every report and can
    /// be replayed as a config file.
    pub fn effective_config(&self) -> Vec<(String, String)> {
        let join_f64 = |xs: &[f64]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut kv: Vec<(String, String)> = vec![
            ("creste_version".into(), env!("CARGO_PKG_VERSION").into()),
            (
                "mode".into(),
                match self.mode {
                    Mode::Estimate => "estimate".into(),
                    Mode::Simulate => "simulate".into(),
                },
            ),
        ];
        match self.mode {
            Mode::Estimate => {
                kv.push(("input".into(), self.input.clone().unwrap_or_default()));
                kv.push(("response".into(), self.response.clone()));
                kv.push(("treatment".into(), self.treatment.clone()));
                kv.push(("instrument".into(), self.instrument.clone()));
                kv.push(("continuous".into(), self.continuous.join(",")));
                kv.push(("discrete".into(), self.discrete.join(",")));
                kv.push(("weight_mode".into(), self.weight_mode.to_string()));
            }
            Mode::Simulate => {
                kv.push(("scenario".into(), self.scenario.to_string()));
                kv.push(("n".into(), self.n.to_string()));
                kv.push(("reps".into(), self.reps.to_string()));
                kv.push((
                    "estimators".into(),
                    self.estimators
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ));
            }
        }
        kv.extend([
            ("alphas".into(), join_f64(&self.alphas)),
            ("tail".into(), self.tail.to_string()),
            ("kernel_order_pi".into(), order_str(self.kernel_order_pi).into()),
            ("kernel_order_v".into(), order_str(self.kernel_order_v).into()),
            ("bandwidth_grid".into(), join_f64(&self.bandwidth_grid)),
            ("sigma1".into(), self.sigma1.map(|s| s.to_string()).unwrap_or_default()),
            ("sigma2".into(), self.sigma2.map(|s| s.to_string()).unwrap_or_default()),
            ("cv_folds".into(), self.cv_folds.to_string()),
            ("standardize".into(), self.standardize.to_string()),
            ("pi_clamp".into(), self.pi_clamp.to_string()),
            ("bootstrap_b".into(), self.bootstrap_b.to_string()),
            ("ci_level".into(), self.ci_level.to_string()),
            ("ci_method".into(), self.ci_method.to_string()),
            ("reselect_bandwidths".into(), self.reselect_bandwidths.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("output".into(), self.output.clone()),
            (
                "format".into(),
                match self.format {
                    Format::Csv => "csv".into(),
                    Format::Json => "json".into(),
                },
            ),
        ]);
        kv
    }
}

fn parse_weight_mode(v: &str) -> Result<WeightMode, CliError> {
    match v {
        "proposed" => Ok(WeightMode::Proposed),
        "naive" => Ok(WeightMode::Naive),
        "oracle" => Ok(WeightMode::Oracle),
        _ => Err(CliError::config(format!("invalid weight mode: {v}"))),
    }
}

fn parse_order(map: &ConfigMap, key: &str) -> Result<KernelOrder, CliError> {
    match map.get(key).unwrap_or("2") {
        "2" => Ok(KernelOrder::Two),
        "4" => Ok(KernelOrder::Four),
        v => Err(CliError::config(format!("invalid value for `{key}`: {v} (expected 2 or 4)"))),
    }
}

fn order_str(o: KernelOrder) -> &'static str {
    match o {
        KernelOrder::Two => "2",
        KernelOrder::Four => "4",
    }
}

pub fn execute_estimate(settings: &RunSettings) -> Result<(), CliError> {
    let input = settings
        .input
        .as_deref()
        .ok_or_else(|| CliError::config("`input` is required for estimate"))?;
    let schema = ColumnSchema {
        response: settings.response.clone(),
        treatment: settings.treatment.clone(),
        instrument: settings.instrument.clone(),
        continuous: settings.continuous.clone(),
        discrete: settings.discrete.clone(),
    };
    let frame = ObservationFrame::load_csv(input, &schema)?;
    let p_c = complier_proportion(&frame)?;

    let opts = settings.fit_options();
    let bcfg = settings.bootstrap_config();
    let fits = bootstrap_many(&frame, &opts, &bcfg, &settings.alphas, None)?;

    let names = frame.design_names();
    let rows: Vec<EstimateRow> = fits
        .iter()
        .map(|(est, boot)| EstimateRow::from_fit(est, boot, &names))
        .collect();
    let report =
        EstimateReport { config: settings.effective_config(), complier_proportion: p_c, rows };

    let body = match settings.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    std::fs::write(&settings.output, body)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", settings.output)))?;

    let mut summary = String::new();
    let _ = writeln!(summary, "complier proportion p_c = {p_c:.4}");
    for r in &report.rows {
        let _ = writeln!(
            summary,
            "alpha={:.3} beta1={:.4} (se {:.4})  gamma1={:.4} (se {:.4})",
            r.alpha, r.beta1, r.beta1_se, r.gamma1, r.gamma1_se
        );
    }
    let _ = writeln!(summary, "report written to {}", settings.output);
    print!("{summary}");
    Ok(())
}

pub fn execute_simulate(settings: &RunSettings) -> Result<(), CliError> {
    let cfg = SimConfig {
        dgp: DgpSpec {
            n: settings.n,
            scenario: settings.scenario,
            seed: settings.seed,
            ..DgpSpec::default()
        },
        alphas: settings.alphas.clone(),
        estimators: settings.estimators.clone(),
        replications: settings.reps,
        bootstrap_replicates: settings.bootstrap_b,
        ci_level: settings.ci_level,
        fit: settings.fit_options(),
        seed: settings.seed,
    };
    let outcome = run_replications(&cfg)?;

    let csv = metrics_to_csv(&outcome.rows, &settings.effective_config());
    std::fs::write(&settings.output, csv)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", settings.output)))?;

    print!("{}", metrics_table(&outcome.rows));
    if outcome.failed_fits > 0 {
        println!("warning: {} estimator fits failed and were excluded", outcome.failed_fits);
    }
    println!("metrics written to {}", settings.output);
    Ok(())
}
