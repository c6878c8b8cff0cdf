// scratch: time one full-scale run and print its headline metrics
use mecsched_sim::config::{Policy, ScenarioConfig};
use mecsched_sim::World;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let policy: Policy = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(Policy::Ease);
    let p: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let pv: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(370.0);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let mut cfg = ScenarioConfig::default();
    cfg.policy = policy;
    cfg.jobs.p = p;
    cfg.harvest.pv_mean = pv;
    cfg.seed = seed;
    let t0 = std::time::Instant::now();
    let r = World::new(cfg).unwrap().run().unwrap();
    println!(
        "{policy} p={p} pv={pv} seed={seed}: eta={:.4} gen={} fin={} drop={} migr={} ho={} ext={} susp={} cons_it={:.1} fail={:.3} grid={:.0} used={:.0} in {:.1?}",
        r.efficiency, r.generated, r.finished, r.dropped, r.migrations, r.handovers,
        r.deadline_extensions, r.suspensions, r.consensus_mean_iterations,
        r.consensus_failure_rate, r.grid_drawn, r.harvested_used, t0.elapsed()
    );
    println!(
        "  power W/node: proc={:.1} migr={:.1} tx={:.1} idle={:.1}  minlat={:.3}",
        r.avg_processing_power, r.avg_migration_power, r.avg_transmission_power,
        r.avg_idle_power, r.min_latency_fraction
    );
}
