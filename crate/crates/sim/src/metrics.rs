//! Run-level metrics: raw tallies kept by the world and the report the
//! batch runner serializes.

use mecsched_core::model::EnergyLedger;

/// Raw event tallies accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counters {
    pub generated: u64,
    /// Jobs whose full workload completed.
    pub finished: u64,
    /// Completions that never needed a deadline extension.
    pub finished_in_time: u64,
    /// Completions delivered by the vehicle's serving site itself.
    pub finished_at_serving: u64,
    pub dropped: u64,
    pub migrations: u64,
    pub handovers: u64,
    pub deadline_extensions: u64,
    pub suspensions: u64,
    pub consensus_rounds: u64,
    pub consensus_iterations: u64,
    pub consensus_failures: u64,
    pub messages: u64,
}

/// One line of the per-slot time series (cluster totals).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlotRecord {
    pub slot: u64,
    pub arrivals: u32,
    pub completions: u32,
    pub drops: u32,
    pub migrations: u32,
    pub handovers: u32,
    pub active_jobs: u32,
    /// Harvest offered this slot (J).
    pub harvest: f64,
    /// Energy consumed this slot (J).
    pub consumed: f64,
    /// Grid share of the consumption (J).
    pub grid: f64,
}

/// Everything a finished run reports. Powers are run averages in W; energy
/// totals are in J; fractions are in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Share of the consumed energy covered by the local harvest.
    pub efficiency: f64,
    pub avg_processing_power: f64,
    pub avg_migration_power: f64,
    pub avg_transmission_power: f64,
    pub avg_idle_power: f64,
    /// Generated jobs whose workload completed, deadline extensions
    /// included.
    pub executed_fraction: f64,
    /// Generated jobs completed without ever needing an extension.
    pub finished_fraction: f64,
    pub drop_rate: f64,
    /// Completions delivered by the co-located site over the radio alone.
    pub min_latency_fraction: f64,
    pub generated: u64,
    pub finished: u64,
    pub dropped: u64,
    /// Jobs still running when the clock stopped.
    pub in_flight: u64,
    pub migrations: u64,
    pub handovers: u64,
    pub deadline_extensions: u64,
    pub suspensions: u64,
    pub harvested_used: f64,
    pub grid_drawn: f64,
    pub consumed: f64,
    pub consensus_mean_iterations: f64,
    pub consensus_failure_rate: f64,
    pub messages: u64,
    /// Per-slot cluster totals, one record per simulated slot.
    pub series: Vec<SlotRecord>,
}

/// A scalar cell of the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Int(u64),
    Float(f64),
}

impl Scalar {
    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Int(v) => v as f64,
            Scalar::Float(v) => v,
        }
    }
}

/// Column names of [`MetricsReport::scalars`], in schema order.
pub const SCALAR_NAMES: [&str; 23] = [
    "efficiency",
    "avg_processing_power",
    "avg_migration_power",
    "avg_transmission_power",
    "avg_idle_power",
    "executed_fraction",
    "finished_fraction",
    "drop_rate",
    "min_latency_fraction",
    "generated",
    "finished",
    "dropped",
    "in_flight",
    "migrations",
    "handovers",
    "deadline_extensions",
    "suspensions",
    "harvested_used",
    "grid_drawn",
    "consumed",
    "consensus_mean_iterations",
    "consensus_failure_rate",
    "messages",
];

impl MetricsReport {
    /// The report's scalar fields in the order the CSV schema lists them.
    pub fn scalars(&self) -> Vec<(&'static str, Scalar)> {
        vec![
            ("efficiency", Scalar::Float(self.efficiency)),
            ("avg_processing_power", Scalar::Float(self.avg_processing_power)),
            ("avg_migration_power", Scalar::Float(self.avg_migration_power)),
            ("avg_transmission_power", Scalar::Float(self.avg_transmission_power)),
            ("avg_idle_power", Scalar::Float(self.avg_idle_power)),
            ("executed_fraction", Scalar::Float(self.executed_fraction)),
            ("finished_fraction", Scalar::Float(self.finished_fraction)),
            ("drop_rate", Scalar::Float(self.drop_rate)),
            ("min_latency_fraction", Scalar::Float(self.min_latency_fraction)),
            ("generated", Scalar::Int(self.generated)),
            ("finished", Scalar::Int(self.finished)),
            ("dropped", Scalar::Int(self.dropped)),
            ("in_flight", Scalar::Int(self.in_flight)),
            ("migrations", Scalar::Int(self.migrations)),
            ("handovers", Scalar::Int(self.handovers)),
            ("deadline_extensions", Scalar::Int(self.deadline_extensions)),
            ("suspensions", Scalar::Int(self.suspensions)),
            ("harvested_used", Scalar::Float(self.harvested_used)),
            ("grid_drawn", Scalar::Float(self.grid_drawn)),
            ("consumed", Scalar::Float(self.consumed)),
            ("consensus_mean_iterations", Scalar::Float(self.consensus_mean_iterations)),
            ("consensus_failure_rate", Scalar::Float(self.consensus_failure_rate)),
            ("messages", Scalar::Int(self.messages)),
        ]
    }
}

fn frac(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Folds the run's ledger and tallies into the report.
///
/// `duration` is the simulated time in seconds; powers are total energies
/// divided by it.
pub fn finalize_metrics(
    ledger: &EnergyLedger,
    counters: &Counters,
    in_flight: u64,
    duration: f64,
    series: Vec<SlotRecord>,
) -> MetricsReport {
    assert!(duration > 0.0, "finalize_metrics: duration must be positive");
    let efficiency = ledger.efficiency();
    assert!((0.0..=1.0).contains(&efficiency), "efficiency {efficiency} outside [0,1]");
    MetricsReport {
        efficiency,
        avg_processing_power: ledger.processing / duration,
        avg_migration_power: ledger.migration / duration,
        avg_transmission_power: ledger.transmission / duration,
        avg_idle_power: ledger.idle / duration,
        executed_fraction: frac(counters.finished, counters.generated),
        finished_fraction: frac(counters.finished_in_time, counters.generated),
        drop_rate: frac(counters.dropped, counters.generated),
        min_latency_fraction: frac(counters.finished_at_serving, counters.finished),
        generated: counters.generated,
        finished: counters.finished,
        dropped: counters.dropped,
        in_flight,
        migrations: counters.migrations,
        handovers: counters.handovers,
        deadline_extensions: counters.deadline_extensions,
        suspensions: counters.suspensions,
        harvested_used: ledger.harvested_used,
        grid_drawn: ledger.grid_drawn,
        consumed: ledger.consumed(),
        consensus_mean_iterations: if counters.consensus_rounds == 0 {
            0.0
        } else {
            counters.consensus_iterations as f64 / counters.consensus_rounds as f64
        },
        consensus_failure_rate: frac(counters.consensus_failures, counters.consensus_rounds),
        messages: counters.messages,
        series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ledger(harvested: f64, grid: f64) -> EnergyLedger {
        let mut l = EnergyLedger::default();
        l.settle_slot(harvested + grid, 0.0, 0.0, 0.0, harvested);
        l
    }

    #[test]
    fn a_grid_free_run_is_fully_efficient() {
        let report = finalize_metrics(&ledger(100.0, 0.0), &Counters::default(), 0, 10.0, vec![]);
        assert_relative_eq!(report.efficiency, 1.0);
        assert_relative_eq!(report.avg_processing_power, 10.0);
    }

    #[test]
    fn efficiency_is_the_harvest_share() {
        let report = finalize_metrics(&ledger(90.0, 10.0), &Counters::default(), 0, 10.0, vec![]);
        assert_relative_eq!(report.efficiency, 0.9, max_relative = 1e-12);
    }

    #[test]
    fn fractions_follow_the_tallies() {
        let counters = Counters {
            generated: 10,
            finished: 8,
            finished_in_time: 6,
            finished_at_serving: 4,
            dropped: 1,
            ..Counters::default()
        };
        let report = finalize_metrics(&ledger(1.0, 0.0), &counters, 1, 3.0, vec![]);
        assert_relative_eq!(report.executed_fraction, 0.8);
        assert_relative_eq!(report.finished_fraction, 0.6);
        assert_relative_eq!(report.drop_rate, 0.1);
        assert_relative_eq!(report.min_latency_fraction, 0.5);
        assert_eq!(report.in_flight, 1);
    }

    #[test]
    fn empty_run_reports_zero_fractions() {
        let report = finalize_metrics(&ledger(1.0, 0.0), &Counters::default(), 0, 3.0, vec![]);
        assert_eq!(report.executed_fraction, 0.0);
        assert_eq!(report.min_latency_fraction, 0.0);
        assert_eq!(report.drop_rate, 0.0);
    }

    #[test]
    fn scalar_schema_is_stable() {
        let report = finalize_metrics(&ledger(1.0, 0.0), &Counters::default(), 0, 3.0, vec![]);
        let names: Vec<&str> = report.scalars().iter().map(|(n, _)| *n).collect();
        assert_eq!(names[0], "efficiency");
        assert_eq!(names, SCALAR_NAMES);
    }
}
