//! Batch front-end: `creste estimate` runs the two-stage pipeline on a CSV,
//! `creste simulate` runs the Monte-Carlo lab. Reports embed the effective
//! configuration as `# key = value` comment lines; a report file can be fed
//! back through `--config` to reproduce the run.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

mod runconfig;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use runconfig::{ConfigMap, RunSettings};

#[derive(Parser)]
#[command(name = "creste", version, about = "Complier expected-shortfall treatment effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects from a CSV dataset
    Estimate(EstimateArgs),
    /// Run the Monte-Carlo simulation lab
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// plain-text config file of `key = value` lines; `# key = value`
    /// report comments are accepted, so a previous report replays a run
    #[arg(long)]
    config: Option<String>,
    /// levels to estimate, comma separated
    #[arg(long)]
    alpha: Option<String>,
    /// lower or upper
    #[arg(long)]
    tail: Option<String>,
    /// proposed, naive (unit weights)
    #[arg(long)]
    weight_mode: Option<String>,
    /// Epanechnikov order for the propensity kernel: 2 or 4
    #[arg(long)]
    kernel_order_pi: Option<String>,
    /// Epanechnikov order for the v kernel: 2 or 4
    #[arg(long)]
    kernel_order_v: Option<String>,
    /// comma-separated ascending bandwidth grid for cross-validation
    #[arg(long)]
    bandwidth_grid: Option<String>,
    /// fixed bandwidth for the propensity estimator (skips selection)
    #[arg(long)]
    sigma1: Option<String>,
    /// fixed bandwidth for the v estimator (skips selection)
    #[arg(long)]
    sigma2: Option<String>,
    /// cross-validation folds
    #[arg(long)]
    cv_folds: Option<String>,
    /// standardize smoothing coordinates by within-cell standard deviation
    #[arg(long)]
    standardize: Option<String>,
    /// clamp for the estimated propensity before the weighting identity
    #[arg(long)]
    pi_clamp: Option<String>,
    /// bootstrap replicates
    #[arg(long)]
    bootstrap_b: Option<String>,
    /// confidence level in (0,1)
    #[arg(long)]
    ci_level: Option<String>,
    /// normal or percentile
    #[arg(long)]
    ci_method: Option<String>,
    /// re-select bandwidths on every bootstrap replicate
    #[arg(long)]
    reselect_bandwidths: Option<String>,
    /// root seed
    #[arg(long)]
    seed: Option<String>,
    /// worker threads (0 = all cores)
    #[arg(long)]
    threads: Option<String>,
    /// output file path
    #[arg(long)]
    output: Option<String>,
    /// csv or json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// input CSV path
    #[arg(long)]
    input: Option<String>,
    /// response column name
    #[arg(long)]
    response: Option<String>,
    /// treatment column name
    #[arg(long)]
    treatment: Option<String>,
    /// instrument column name
    #[arg(long)]
    instrument: Option<String>,
    /// comma-separated continuous covariate columns
    #[arg(long)]
    continuous: Option<String>,
    /// comma-separated discrete covariate columns
    #[arg(long)]
    discrete: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// continuous or discrete
    #[arg(long)]
    scenario: Option<String>,
    /// sample size per replication
    #[arg(long)]
    n: Option<String>,
    /// Monte-Carlo replications
    #[arg(long)]
    reps: Option<String>,
    /// comma-separated estimators among proposed, oracle, naive
    #[arg(long)]
    estimators: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code())
        }
    }
}

fn collect_common(map: &mut ConfigMap, c: &CommonArgs) {
    map.set_opt("alphas", c.alpha.as_deref());
    map.set_opt("tail", c.tail.as_deref());
    map.set_opt("weight_mode", c.weight_mode.as_deref());
    map.set_opt("kernel_order_pi", c.kernel_order_pi.as_deref());
    map.set_opt("kernel_order_v", c.kernel_order_v.as_deref());
    map.set_opt("bandwidth_grid", c.bandwidth_grid.as_deref());
    map.set_opt("sigma1", c.sigma1.as_deref());
    map.set_opt("sigma2", c.sigma2.as_deref());
    map.set_opt("cv_folds", c.cv_folds.as_deref());
    map.set_opt("standardize", c.standardize.as_deref());
    map.set_opt("pi_clamp", c.pi_clamp.as_deref());
    map.set_opt("bootstrap_b", c.bootstrap_b.as_deref());
    map.set_opt("ci_level", c.ci_level.as_deref());
    map.set_opt("ci_method", c.ci_method.as_deref());
    map.set_opt("reselect_bandwidths", c.reselect_bandwidths.as_deref());
    map.set_opt("seed", c.seed.as_deref());
    map.set_opt("threads", c.threads.as_deref());
    map.set_opt("output", c.output.as_deref());
    map.set_opt("format", c.format.as_deref());
}

fn run_estimate(args: EstimateArgs) -> Result<(), runconfig::CliError> {
    let mut map = ConfigMap::from_file(args.common.config.as_deref())?;
    map.set("mode", "estimate");
    collect_common(&mut map, &args.common);
    map.set_opt("input", args.input.as_deref());
    map.set_opt("response", args.response.as_deref());
    map.set_opt("treatment", args.treatment.as_deref());
    map.set_opt("instrument", args.instrument.as_deref());
    map.set_opt("continuous", args.continuous.as_deref());
    map.set_opt("discrete", args.discrete.as_deref());

    let settings = RunSettings::from_map(map)?;
    settings.init_threads();
    runconfig::execute_estimate(&settings)
}

fn run_simulate(args: SimulateArgs) -> Result<(), runconfig::CliError> {
    let mut map = ConfigMap::from_file(args.common.config.as_deref())?;
    map.set("mode", "simulate");
    collect_common(&mut map, &args.common);
    map.set_opt("scenario", args.scenario.as_deref());
    map.set_opt("n", args.n.as_deref());
    map.set_opt("reps", args.reps.as_deref());
    map.set_opt("estimators", args.estimators.as_deref());

    let settings = RunSettings::from_map(map)?;
    settings.init_threads();
    runconfig::execute_simulate(&settings)
}
