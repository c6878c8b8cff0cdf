//! Batch runner: a grid of scenario cells, each run for several seeds.
//!
//! Cells are independent, so they run in parallel; results are merged back
//! in manifest order, making the output files byte-identical across reruns
//! of the same manifest on any machine. One failed run never takes the
//! batch down: it becomes a failure row and a nonzero exit, with every
//! other row intact.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{Policy, ScenarioConfig};
use crate::metrics::{MetricsReport, Scalar, SCALAR_NAMES};
use crate::world::World;

/// Schema tag written as the first line of the per-run CSV.
pub const RUNS_SCHEMA: &str = "mecsched-runs-v1";
/// Schema tag written as the first line of the summary CSV.
pub const SUMMARY_SCHEMA: &str = "mecsched-summary-v1";

/// The batch to run: a base scenario and the axes swept over it.
///
/// Every combination of policy, arrival probability, harvest mean, and
/// horizon is one cell; every cell runs once per seed.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub base: ScenarioConfig,
    pub policies: Vec<Policy>,
    pub p_values: Vec<f64>,
    pub pv_means: Vec<f64>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    /// A manifest that just runs the base scenario as its single cell.
    pub fn single(base: ScenarioConfig) -> RunManifest {
        RunManifest {
            policies: vec![base.policy],
            p_values: vec![base.jobs.p],
            pv_means: vec![base.harvest.pv_mean],
            horizons: vec![base.control.horizon],
            seeds: vec![base.seed],
            base,
        }
    }

    /// Cell count times seed count.
    pub fn n_runs(&self) -> usize {
        self.policies.len()
            * self.p_values.len()
            * self.pv_means.len()
            * self.horizons.len()
            * self.seeds.len()
    }

    // Scenarios in manifest order, seeds innermost so a cell's runs stay
    // adjacent.
    fn scenarios(&self) -> Vec<ScenarioConfig> {
        let mut out = Vec::with_capacity(self.n_runs());
        for &policy in &self.policies {
            for &p in &self.p_values {
                for &pv_mean in &self.pv_means {
                    for &horizon in &self.horizons {
                        for &seed in &self.seeds {
                            let mut cfg = self.base.clone();
                            cfg.policy = policy;
                            cfg.jobs.p = p;
                            cfg.harvest.pv_mean = pv_mean;
                            cfg.control.horizon = horizon;
                            cfg.seed = seed;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

/// What one run row carries besides its key.
type RunResult = Result<MetricsReport, String>;

/// Where the batch landed.
#[derive(Debug)]
pub struct SweepOutcome {
    pub runs_path: PathBuf,
    pub summary_path: PathBuf,
    pub runs: usize,
    /// Human-readable `key: message` lines, one per failed run.
    pub failures: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn write_file(path: &Path, content: &str) -> Result<(), SweepError> {
    std::fs::write(path, content).map_err(|source| SweepError::Io { path: path.into(), source })
}

// All floats go out as {:.8e}: nine significant digits, reproducible bytes.
fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

fn fmt_scalar(s: Scalar) -> String {
    match s {
        Scalar::Int(v) => v.to_string(),
        Scalar::Float(v) => fmt_float(v),
    }
}

// Only free-text fields are ever quoted; keys and numbers never need it.
fn quote(text: &str) -> String {
    format!("\"{}\"", text.replace('"', "\"\""))
}

fn key_prefix(cfg: &ScenarioConfig) -> String {
    format!(
        "{},{},{},{}",
        cfg.policy.name(),
        fmt_float(cfg.jobs.p),
        fmt_float(cfg.harvest.pv_mean),
        cfg.control.horizon,
    )
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "run panicked".to_string()
    }
}

fn run_one(cfg: &ScenarioConfig) -> RunResult {
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<MetricsReport, String> {
        let mut world = World::new(cfg.clone()).map_err(|e| e.to_string())?;
        world.run().map_err(|e| e.to_string())
    }));
    match outcome {
        Ok(res) => res,
        Err(payload) => Err(panic_text(payload)),
    }
}

fn runs_csv(scenarios: &[ScenarioConfig], results: &[RunResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema={RUNS_SCHEMA}");
    out.push_str("policy,p,pv_mean,horizon,seed,status");
    for name in SCALAR_NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",error\n");
    for (cfg, result) in scenarios.iter().zip(results) {
        let _ = write!(out, "{},{},", key_prefix(cfg), cfg.seed);
        match result {
            Ok(report) => {
                out.push_str("ok");
                for (_, value) in report.scalars() {
                    out.push(',');
                    out.push_str(&fmt_scalar(value));
                }
                out.push_str(",\n");
            }
            Err(message) => {
                out.push_str("failed");
                out.push_str(&",".repeat(SCALAR_NAMES.len()));
                out.push(',');
                out.push_str(&quote(message));
                out.push('\n');
            }
        }
    }
    out
}

fn summary_csv(scenarios: &[ScenarioConfig], results: &[RunResult], n_seeds: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema={SUMMARY_SCHEMA}");
    out.push_str("policy,p,pv_mean,horizon,seeds,seeds_ok");
    for name in SCALAR_NAMES {
        let _ = write!(out, ",{name}_mean,{name}_std");
    }
    out.push('\n');
    for (cell, chunk) in scenarios.chunks(n_seeds).zip(results.chunks(n_seeds)) {
        let ok: Vec<&MetricsReport> =
            chunk.iter().filter_map(|r| r.as_ref().ok()).collect();
        let _ = write!(out, "{},{},{}", key_prefix(&cell[0]), chunk.len(), ok.len());
        let columns: Vec<Vec<f64>> = ok
            .iter()
            .map(|r| r.scalars().iter().map(|(_, s)| s.as_f64()).collect())
            .collect();
        for k in 0..SCALAR_NAMES.len() {
            if columns.is_empty() {
                out.push_str(",,");
                continue;
            }
            let n = columns.len() as f64;
            let mean = columns.iter().map(|row| row[k]).sum::<f64>() / n;
            let std = if columns.len() < 2 {
                0.0
            } else {
                let ss = columns.iter().map(|row| (row[k] - mean).powi(2)).sum::<f64>();
                (ss / (n - 1.0)).sqrt()
            };
            let _ = write!(out, ",{},{}", fmt_float(mean), fmt_float(std));
        }
        out.push('\n');
    }
    out
}

/// Runs the whole manifest and writes `runs.csv` and `summary.csv` under
/// `out_dir` (created if missing). Failures become rows, not aborts; the
/// caller decides the exit code from `failures`.
pub fn run_sweep(manifest: &RunManifest, out_dir: &Path) -> Result<SweepOutcome, SweepError> {
    let scenarios = manifest.scenarios();
    let results: Vec<RunResult> = scenarios.par_iter().map(run_one).collect();

    std::fs::create_dir_all(out_dir)
        .map_err(|source| SweepError::Io { path: out_dir.into(), source })?;
    let runs_path = out_dir.join("runs.csv");
    let summary_path = out_dir.join("summary.csv");
    write_file(&runs_path, &runs_csv(&scenarios, &results))?;
    write_file(&summary_path, &summary_csv(&scenarios, &results, manifest.seeds.len()))?;

    let failures = scenarios
        .iter()
        .zip(&results)
        .filter_map(|(cfg, r)| {
            r.as_ref()
                .err()
                .map(|m| format!("{},{}: {m}", key_prefix(cfg), cfg.seed))
        })
        .collect();
    Ok(SweepOutcome { runs_path, summary_path, runs: scenarios.len(), failures })
}
