use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::Parser;
use log::info;

use mecsched_sim::config::{Policy, ScenarioConfig};
use mecsched_sim::sweep::{run_sweep, RunManifest};

/// Discrete-time simulator for renewable-powered edge clusters serving
/// vehicular workloads, with distributed and baseline scheduling policies.
#[derive(Parser, Debug)]
#[command(name = "mecsched", version)]
struct Cli {
    /// Scenario file (TOML). Missing keys take built-in defaults; an empty
    /// file runs the reference scenario unchanged.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Directory for runs.csv and summary.csv.
    #[arg(short, long, env = "MECSCHED_OUT", default_value = "out")]
    out: PathBuf,

    /// Policies to sweep, comma separated (ease, keep, migrate, threshold).
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,

    /// Arrival probabilities to sweep.
    #[arg(long = "p", value_delimiter = ',')]
    p_values: Vec<f64>,

    /// Mean harvest powers to sweep (W).
    #[arg(long = "pv-mean", value_delimiter = ',')]
    pv_means: Vec<f64>,

    /// Planning horizons to sweep (slots).
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,

    /// Seeds to run per cell.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,

    /// Override the slot count of every run.
    #[arg(long)]
    slots: Option<u64>,

    /// Check the configuration and exit without running anything.
    #[arg(long)]
    validate_only: bool,

    /// More -v, more logging (warnings by default).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn init_logging(verbosity: u8) {
    let default = match verbosity {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .init();
}

fn build_manifest(cli: &Cli, base: ScenarioConfig) -> anyhow::Result<RunManifest> {
    let mut manifest = RunManifest::single(base);
    if let Some(slots) = cli.slots {
        manifest.base.slots = slots;
    }
    if !cli.policies.is_empty() {
        manifest.policies = cli
            .policies
            .iter()
            .map(|s| Policy::from_str(s).map_err(anyhow::Error::msg))
            .collect::<anyhow::Result<_>>()?;
    }
    if !cli.p_values.is_empty() {
        manifest.p_values = cli.p_values.clone();
    }
    if !cli.pv_means.is_empty() {
        manifest.pv_means = cli.pv_means.clone();
    }
    if !cli.horizons.is_empty() {
        manifest.horizons = cli.horizons.clone();
    }
    if !cli.seeds.is_empty() {
        manifest.seeds = cli.seeds.clone();
    }
    // Overridden axes must still pass the same checks the file did. The
    // first scenario fails validation iff any cell would.
    for policy in &manifest.policies {
        let mut probe = manifest.base.clone();
        probe.policy = *policy;
        probe.jobs.p = manifest.p_values[0];
        probe.harvest.pv_mean = manifest.pv_means[0];
        probe.control.horizon = manifest.horizons[0];
        probe.validate()?;
    }
    for &p in &manifest.p_values {
        let mut probe = manifest.base.clone();
        probe.jobs.p = p;
        probe.validate()?;
    }
    for &horizon in &manifest.horizons {
        let mut probe = manifest.base.clone();
        probe.control.horizon = horizon;
        probe.validate()?;
    }
    Ok(manifest)
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let base = match &cli.config {
        Some(path) => mecsched_sim::parse_config(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ScenarioConfig::default(),
    };
    if cli.validate_only {
        // Axis overrides are checked too, so a bad --p fails here as well.
        build_manifest(cli, base)?;
        println!("configuration ok");
        return Ok(ExitCode::SUCCESS);
    }
    let manifest = build_manifest(cli, base)?;
    info!("running {} scenarios into {}", manifest.n_runs(), cli.out.display());
    let outcome = run_sweep(&manifest, &cli.out)?;
    println!("{} runs -> {}", outcome.runs, outcome.runs_path.display());
    println!("summary -> {}", outcome.summary_path.display());
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for failure in &outcome.failures {
            eprintln!("failed: {failure}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
