//! Scenario configuration: hardware catalog, job catalog, harvest process,
//! control knobs. Every field has a default, so an empty TOML document is a
//! complete scenario; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use mecsched_core::model::{NodeConfig, NodeId};
use serde::{Deserialize, Serialize};

use crate::mobility::Lattice;

/// Bits per gigabyte of job data.
pub const BITS_PER_GB: f64 = 8e9;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] Box<toml::de::Error>),
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Migration policy driving step 4 of the slot pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Local control, agreement rounds, and rounded migrations.
    Ease,
    /// Never migrate; results travel back over the backhaul.
    Keep,
    /// Follow every handover with a migration.
    Migrate,
    /// Follow a handover only while the host draws grid power.
    Threshold,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Ease, Policy::Keep, Policy::Migrate, Policy::Threshold];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ease => "ease",
            Policy::Keep => "keep",
            Policy::Migrate => "migrate",
            Policy::Threshold => "threshold",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ease" => Ok(Policy::Ease),
            "keep" => Ok(Policy::Keep),
            "migrate" => Ok(Policy::Migrate),
            "threshold" => Ok(Policy::Threshold),
            other => Err(format!("unknown policy {other:?}; expected ease|keep|migrate|threshold")),
        }
    }
}

/// Cell deployment geometry: a hexagonal lattice of eNB sites plus the
/// roaming margin around it.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AreaConfig {
    pub rows: usize,
    pub cols: usize,
    /// Inter-site distance (m).
    pub pitch: f64,
    /// Extra roaming space beyond the outermost sites (m).
    pub margin: f64,
}

impl Default for AreaConfig {
    fn default() -> Self {
        AreaConfig { rows: 2, cols: 4, pitch: 400.0, margin: 250.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub vehicles: usize,
    /// Random-waypoint speed range (m/s).
    pub speed_min: f64,
    pub speed_max: f64,
    /// Directional concentration of the handover predictor; 0 = uniform.
    pub kappa: f64,
    /// Fraction of waypoints drawn from the downtown district instead of
    /// uniformly; skews load onto the central sites.
    pub hotspot: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig { vehicles: 56, speed_min: 5.0, speed_max: 15.0, kappa: 4.0, hotspot: 0.5 }
    }
}

/// One entry of the job catalog.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobTypeConfig {
    /// Total workload (Gop).
    pub intensity: f64,
    /// Deadline from arrival (s).
    pub deadline: f64,
    /// Data footprint (bits).
    pub size: f64,
    /// Result returned to the vehicle (bits).
    pub result_size: f64,
    /// Probability of this type given a spawn.
    pub gen_prob: f64,
}

impl Default for JobTypeConfig {
    fn default() -> Self {
        JobTypeConfig {
            intensity: 10.0,
            deadline: 20.0,
            size: 2.0 * BITS_PER_GB,
            result_size: 1e6,
            gen_prob: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobsConfig {
    /// Per-slot spawn probability for an idle vehicle.
    pub p: f64,
    pub catalog: Vec<JobTypeConfig>,
}

impl Default for JobsConfig {
    fn default() -> Self {
        JobsConfig {
            p: 0.25,
            catalog: vec![
                JobTypeConfig {
                    intensity: 10.0,
                    deadline: 20.0,
                    size: 2.0 * BITS_PER_GB,
                    result_size: 1e6,
                    gen_prob: 0.4,
                },
                JobTypeConfig {
                    intensity: 16.0,
                    deadline: 30.0,
                    size: 10.0 * BITS_PER_GB,
                    result_size: 1e6,
                    gen_prob: 0.2,
                },
                JobTypeConfig {
                    intensity: 12.0,
                    deadline: 40.0,
                    size: 0.1 * BITS_PER_GB,
                    result_size: 1e6,
                    gen_prob: 0.4,
                },
            ],
        }
    }
}

/// PV harvesting process: per-slot Gaussian draw, clipped.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestConfig {
    pub pv_mean: f64,
    pub pv_sigma: f64,
    pub pv_min: f64,
    pub pv_max: f64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        HarvestConfig { pv_mean: 370.0, pv_sigma: 10.0, pv_min: 250.0, pv_max: 400.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    Hp,
    Nettrix,
}

/// One server model: compute, memory, and its two power points.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSpec {
    /// Peak computation rate (Gop/s).
    pub compute_rate: f64,
    /// RAM (GB).
    pub memory_gb: f64,
    /// Idle power (W).
    pub p_idle: f64,
    /// Full-load power (W).
    pub p_max: f64,
}

impl Default for ServerSpec {
    fn default() -> Self {
        ServerSpec { compute_rate: 3.3, memory_gb: 64.0, p_idle: 94.0, p_max: 299.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServersConfig {
    /// Server model per site, row-major over the lattice. The default splits
    /// the deployment into one cluster per model.
    pub kinds: Vec<ServerKind>,
    pub hp: ServerSpec,
    pub nettrix: ServerSpec,
}

impl Default for ServersConfig {
    fn default() -> Self {
        ServersConfig {
            // Random-waypoint traffic piles up on the middle columns, so the
            // big Nettrix units sit there and the HP boxes take the rim.
            kinds: vec![
                ServerKind::Hp,
                ServerKind::Nettrix,
                ServerKind::Nettrix,
                ServerKind::Hp,
                ServerKind::Hp,
                ServerKind::Nettrix,
                ServerKind::Nettrix,
                ServerKind::Hp,
            ],
            hp: ServerSpec::default(),
            nettrix: ServerSpec {
                compute_rate: 7.6,
                memory_gb: 256.0,
                p_idle: 110.0,
                p_max: 468.0,
            },
        }
    }
}

impl ServersConfig {
    pub fn spec(&self, kind: ServerKind) -> &ServerSpec {
        match kind {
            ServerKind::Hp => &self.hp,
            ServerKind::Nettrix => &self.nettrix,
        }
    }
}

/// Radio site and backhaul parameters, shared by every eNB.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    /// Radio access equipment power (W).
    pub p_ran: f64,
    /// Backhaul equipment power (W).
    pub p_wired: f64,
    /// Wireless transmission energy (J/bit).
    pub e_bit_ran: f64,
    /// Backhaul transmission energy (J/bit).
    pub e_bit_wired: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig { p_ran: 50.2, p_wired: 20.0, e_bit_ran: 1e-9, e_bit_wired: 250e-12 }
    }
}

/// Container migration pricing.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    /// Freeze-and-send energy at the source (J/bit).
    pub e_bit_src: f64,
    /// Receive-and-restore energy at the destination (J/bit).
    pub e_bit_dst: f64,
    /// Fixed source cost per migration (J).
    pub e_fix_src: f64,
    /// Fixed destination cost per migration (J).
    pub e_fix_dst: f64,
    /// Container image size (bits).
    pub container_bits: f64,
    /// Service downtime charged to the job's deadline (s).
    pub t_migr: f64,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        MigrationConfig {
            e_bit_src: 500e-9,
            e_bit_dst: 500e-9,
            e_fix_src: 0.25,
            e_fix_dst: 0.25,
            container_bits: 4.0e8,
            t_migr: 2.0,
        }
    }
}

/// Knobs of the local controller, the agreement rounds, and the rounding.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Slot length (s).
    pub tau: f64,
    /// Prediction horizon (slots).
    pub horizon: usize,
    /// Weight of the urgency term in the local objective.
    pub state_weight: f64,
    /// Weight of the capacity and memory penalties in the local objective.
    pub constraint_penalty: f64,
    /// Pull of the agreed flows toward the desired rates.
    pub tracking_weight: f64,
    /// Quadratic price of capacity slack in the agreement rounds.
    pub slack_penalty: f64,
    pub mpc_max_iters: u32,
    pub mpc_rel_tol: f64,
    pub consensus_max_iters: u32,
    pub consensus_tol: f64,
    /// Dual step as a fraction of the stability bound.
    pub step_fraction: f64,
    /// Seed each slot's local plan with the previous slot's solution.
    pub warm_start: bool,
    /// Rate mismatch the rounding stops caring about (Gop/s).
    pub rounding_tolerance: f64,
    /// Jobs below this fraction of their spawn intensity never migrate.
    pub min_intensity_fraction: f64,
    /// Jobs closer than this many slots to their deadline never migrate.
    pub min_deadline_slots: f64,
    /// An expired job still below this fraction of its spawn workload gets
    /// one slot of grace instead of being dropped.
    pub extension_fraction: f64,
    /// Averaging window for arrival-rate estimates (s).
    pub estimate_window: f64,
    /// Width of the border zone where handovers and migrations are
    /// anticipated (m).
    pub border_band: f64,
    /// Energy price of shipping one Gop/s out (J/Gop). Defaults to the
    /// backhaul plus freeze cost of the catalog-average data per Gop.
    pub tx_cost: Option<f64>,
    /// Energy price of absorbing one Gop/s (J/Gop). Defaults to the restore
    /// cost of the catalog-average data per Gop.
    pub rx_cost: Option<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            tau: 3.0,
            horizon: 5,
            state_weight: 100.0,
            constraint_penalty: 500.0,
            tracking_weight: 2.5,
            slack_penalty: 10.0,
            mpc_max_iters: 5000,
            mpc_rel_tol: 1e-8,
            consensus_max_iters: 2000,
            consensus_tol: 1e-3,
            step_fraction: 0.9,
            warm_start: false,
            rounding_tolerance: 0.05,
            // Hauling a container costs a fixed ~0.4 kJ however little work
            // rides along, so only jobs still carrying most of their spawn
            // workload pay back the freight.
            min_intensity_fraction: 0.5,
            min_deadline_slots: 3.0,
            extension_fraction: 0.01,
            estimate_window: 300.0,
            border_band: 40.0,
            // A job migrates once and then lives out its deadline at the new
            // host, so the fair per-Gop price is the one-off container
            // freeze/ship/restore cost spread over the catalog-mean 12 Gop
            // job, plus backhaul for the state bits themselves:
            //   tx = (5e-7 J/bit * 4e8 bit + 0.25 J)/12 Gop + 2.5e-10 * beta
            //   rx = (5e-7 J/bit * 4e8 bit + 0.25 J)/12 Gop
            // with beta = 5e9/3 bit/Gop the catalog-mean state per Gop.
            // Leaving these unset instead prices every shipped state bit at
            // the container freeze rate, which makes any outbound migration
            // dearer than local processing and stalls the exchange market.
            tx_cost: Some(200.25 / 12.0 + 1.25 / 3.0),
            rx_cost: Some(200.25 / 12.0),
        }
    }
}

/// A complete scenario. `Default` is the reference setup: eight sites in two
/// rows, one server cluster per model, three job types, 370 W PV panels.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub slots: u64,
    pub policy: Policy,
    pub area: AreaConfig,
    pub fleet: FleetConfig,
    pub jobs: JobsConfig,
    pub harvest: HarvestConfig,
    pub servers: ServersConfig,
    pub radio: RadioConfig,
    pub migration: MigrationConfig,
    pub control: ControlConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            slots: 1000,
            policy: Policy::Ease,
            area: AreaConfig::default(),
            fleet: FleetConfig::default(),
            jobs: JobsConfig::default(),
            harvest: HarvestConfig::default(),
            servers: ServersConfig::default(),
            radio: RadioConfig::default(),
            migration: MigrationConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Catalog-average data volume behind one Gop of workload (bits/Gop),
    /// weighted by generation probability.
    pub fn data_per_work(&self) -> f64 {
        self.jobs
            .catalog
            .iter()
            .map(|t| t.gen_prob * t.size / t.intensity)
            .sum()
    }

    /// Catalog-average result size returned to the vehicle (bits).
    pub fn mean_result_bits(&self) -> f64 {
        self.jobs.catalog.iter().map(|t| t.gen_prob * t.result_size).sum()
    }

    /// Catalog-average workload rate one bit of memory sustains
    /// ((Gop/s)/bit), weighted by generation probability.
    pub fn rate_per_memory(&self) -> f64 {
        self.jobs
            .catalog
            .iter()
            .map(|t| t.gen_prob * t.intensity / (t.size * t.deadline))
            .sum()
    }

    /// Effective per-Gop/s price of shipping workload out (J/Gop).
    pub fn tx_cost(&self) -> f64 {
        self.control
            .tx_cost
            .unwrap_or_else(|| (self.radio.e_bit_wired + self.migration.e_bit_src) * self.data_per_work())
    }

    /// Effective per-Gop/s price of absorbing workload (J/Gop).
    pub fn rx_cost(&self) -> f64 {
        self.control.rx_cost.unwrap_or_else(|| self.migration.e_bit_dst * self.data_per_work())
    }

    pub fn n_nodes(&self) -> usize {
        self.area.rows * self.area.cols
    }

    /// Instantiates the per-site server descriptions over a lattice built
    /// from the same `area` section.
    pub fn build_nodes(&self, lattice: &Lattice) -> Vec<NodeConfig> {
        assert_eq!(lattice.centers.len(), self.n_nodes());
        let tx_cost = self.tx_cost();
        let rx_cost = self.rx_cost();
        let mem_to_rate = self.rate_per_memory();
        (0..self.n_nodes())
            .map(|i| {
                let spec = self.servers.spec(self.servers.kinds[i]);
                NodeConfig {
                    id: NodeId(i),
                    position: lattice.centers[i],
                    neighbors: lattice.neighbors[i].clone(),
                    compute_rate: spec.compute_rate,
                    memory_bits: spec.memory_gb * BITS_PER_GB,
                    p_idle: spec.p_idle,
                    p_max: spec.p_max,
                    p_ran: self.radio.p_ran,
                    p_wired: self.radio.p_wired,
                    e_bit_ran: self.radio.e_bit_ran,
                    e_bit_wired: self.radio.e_bit_wired,
                    e_bit_mig_src: self.migration.e_bit_src,
                    e_bit_mig_dst: self.migration.e_bit_dst,
                    e_fix_mig_src: self.migration.e_fix_src,
                    e_fix_mig_dst: self.migration.e_fix_dst,
                    container_bits: self.migration.container_bits,
                    t_migr: self.migration.t_migr,
                    tx_cost,
                    rx_cost,
                    mem_to_rate,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self;
        if c.slots == 0 {
            return Err(invalid("slots must be at least 1"));
        }
        if c.area.rows == 0 || c.area.cols == 0 {
            return Err(invalid("area.rows and area.cols must be at least 1"));
        }
        if c.n_nodes() < 2 {
            return Err(invalid("area must contain at least 2 sites"));
        }
        if !(c.area.pitch > 0.0) {
            return Err(invalid("area.pitch must be positive"));
        }
        if !(c.area.margin >= 0.0) {
            return Err(invalid("area.margin must be nonnegative"));
        }
        if !(c.fleet.speed_min >= 0.0) || !(c.fleet.speed_max >= c.fleet.speed_min) {
            return Err(invalid("fleet speeds must satisfy 0 <= speed_min <= speed_max"));
        }
        if !(c.fleet.kappa >= 0.0) || !c.fleet.kappa.is_finite() {
            return Err(invalid("fleet.kappa must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&c.fleet.hotspot) {
            return Err(invalid("fleet.hotspot must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&c.jobs.p) {
            return Err(invalid("jobs.p must be in [0,1]"));
        }
        if c.jobs.catalog.is_empty() {
            return Err(invalid("jobs.catalog must not be empty"));
        }
        let mut prob_sum = 0.0;
        for (ix, t) in c.jobs.catalog.iter().enumerate() {
            if !(t.intensity > 0.0) {
                return Err(invalid(format!("jobs.catalog[{ix}].intensity must be positive")));
            }
            if !(t.deadline > 0.0) {
                return Err(invalid(format!("jobs.catalog[{ix}].deadline must be positive")));
            }
            if !(t.size > 0.0) {
                return Err(invalid(format!("jobs.catalog[{ix}].size must be positive")));
            }
            if !(t.result_size >= 0.0) {
                return Err(invalid(format!("jobs.catalog[{ix}].result_size must be nonnegative")));
            }
            if !(t.gen_prob >= 0.0) {
                return Err(invalid(format!("jobs.catalog[{ix}].gen_prob must be nonnegative")));
            }
            prob_sum += t.gen_prob;
        }
        if (prob_sum - 1.0).abs() > 1e-9 {
            return Err(invalid("jobs.catalog gen_prob values must sum to 1"));
        }
        if !(c.harvest.pv_sigma >= 0.0) {
            return Err(invalid("harvest.pv_sigma must be nonnegative"));
        }
        if !(c.harvest.pv_min <= c.harvest.pv_mean) {
            return Err(invalid("harvest.pv_min must not exceed harvest.pv_mean"));
        }
        if !(c.harvest.pv_mean <= c.harvest.pv_max) {
            return Err(invalid("harvest.pv_mean must not exceed harvest.pv_max"));
        }
        if !(c.harvest.pv_min >= 0.0) {
            return Err(invalid("harvest.pv_min must be nonnegative"));
        }
        if c.servers.kinds.len() != c.n_nodes() {
            return Err(invalid(format!(
                "servers.kinds lists {} entries but area has {} sites",
                c.servers.kinds.len(),
                c.n_nodes()
            )));
        }
        for (name, spec) in [("servers.hp", &c.servers.hp), ("servers.nettrix", &c.servers.nettrix)] {
            if !(spec.compute_rate > 0.0) {
                return Err(invalid(format!("{name}.compute_rate must be positive")));
            }
            if !(spec.memory_gb > 0.0) {
                return Err(invalid(format!("{name}.memory_gb must be positive")));
            }
            if !(spec.p_idle >= 0.0) || !(spec.p_max >= spec.p_idle) {
                return Err(invalid(format!("{name} power points must satisfy 0 <= p_idle <= p_max")));
            }
        }
        for (key, v) in [
            ("radio.p_ran", c.radio.p_ran),
            ("radio.p_wired", c.radio.p_wired),
            ("radio.e_bit_ran", c.radio.e_bit_ran),
            ("radio.e_bit_wired", c.radio.e_bit_wired),
            ("migration.e_bit_src", c.migration.e_bit_src),
            ("migration.e_bit_dst", c.migration.e_bit_dst),
            ("migration.e_fix_src", c.migration.e_fix_src),
            ("migration.e_fix_dst", c.migration.e_fix_dst),
            ("migration.container_bits", c.migration.container_bits),
            ("migration.t_migr", c.migration.t_migr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{key} must be finite and nonnegative")));
            }
        }
        if !(c.control.tau > 0.0) {
            return Err(invalid("control.tau must be positive"));
        }
        if c.control.horizon < 2 {
            return Err(invalid("control.horizon must be at least 2"));
        }
        for (key, v) in [
            ("control.state_weight", c.control.state_weight),
            ("control.constraint_penalty", c.control.constraint_penalty),
            ("control.tracking_weight", c.control.tracking_weight),
            ("control.slack_penalty", c.control.slack_penalty),
            ("control.mpc_rel_tol", c.control.mpc_rel_tol),
            ("control.consensus_tol", c.control.consensus_tol),
            ("control.estimate_window", c.control.estimate_window),
        ] {
            if !(v > 0.0) {
                return Err(invalid(format!("{key} must be positive")));
            }
        }
        if c.control.mpc_max_iters == 0 || c.control.consensus_max_iters == 0 {
            return Err(invalid("control iteration limits must be at least 1"));
        }
        if !(c.control.step_fraction > 0.0 && c.control.step_fraction <= 1.0) {
            return Err(invalid("control.step_fraction must be in (0,1]"));
        }
        for (key, v) in [
            ("control.rounding_tolerance", c.control.rounding_tolerance),
            ("control.min_intensity_fraction", c.control.min_intensity_fraction),
            ("control.min_deadline_slots", c.control.min_deadline_slots),
            ("control.extension_fraction", c.control.extension_fraction),
            ("control.border_band", c.control.border_band),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{key} must be finite and nonnegative")));
            }
        }
        for (key, v) in [("control.tx_cost", c.control.tx_cost), ("control.rx_cost", c.control.rx_cost)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(invalid(format!("{key} must be positive when set")));
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a scenario from TOML text.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(Box::new)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn empty_document_is_the_reference_scenario() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.n_nodes(), 8);
        assert_eq!(cfg.jobs.catalog.len(), 3);
        assert_relative_eq!(cfg.control.tau, 3.0);
        assert_relative_eq!(cfg.harvest.pv_mean, 370.0);
    }

    #[test]
    fn derived_prices_follow_the_catalog() {
        let cfg = ScenarioConfig::default();
        assert_relative_eq!(cfg.data_per_work(), 5e9 / 3.0, max_relative = 1e-12);
        // The reference scenario pins the amortized container prices.
        assert_relative_eq!(cfg.tx_cost(), 17.104166666666666, max_relative = 1e-12);
        assert_relative_eq!(cfg.rx_cost(), 16.6875, max_relative = 1e-12);
        let xi = 0.4 * 10.0 / (1.6e10 * 20.0) + 0.2 * 16.0 / (8e10 * 30.0) + 0.4 * 12.0 / (8e8 * 40.0);
        assert_relative_eq!(cfg.rate_per_memory(), xi, max_relative = 1e-12);
        // Cleared overrides fall back to pricing every state bit at the
        // freeze/restore rates.
        let mut cfg = cfg;
        cfg.control.tx_cost = None;
        cfg.control.rx_cost = None;
        assert_relative_eq!(cfg.tx_cost(), 833.75, max_relative = 1e-12);
        assert_relative_eq!(cfg.rx_cost(), 2500.0 / 3.0, max_relative = 1e-12);
        // An explicit override wins.
        let cfg = parse_config_str("[control]\ntx_cost = 10.0\n").unwrap();
        assert_relative_eq!(cfg.tx_cost(), 10.0);
    }

    #[test]
    fn overrides_merge_with_defaults() {
        let cfg = parse_config_str("slots = 10\n[jobs]\np = 0.5\n").unwrap();
        assert_eq!(cfg.slots, 10);
        assert_relative_eq!(cfg.jobs.p, 0.5);
        assert_eq!(cfg.jobs.catalog.len(), 3);
        assert_eq!(cfg.policy, Policy::Ease);
    }

    #[test]
    fn out_of_range_p_is_rejected_by_key() {
        let err = parse_config_str("[jobs]\np = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("jobs.p"), "{err}");
    }

    #[test]
    fn inverted_pv_bounds_are_rejected() {
        let err = parse_config_str("[harvest]\npv_min = 380.0\npv_max = 360.0\n").unwrap_err();
        assert!(err.to_string().contains("pv_m"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config_str("unknown_knob = 1\n").is_err());
        assert!(parse_config_str("[control]\ntypo = 1\n").is_err());
    }

    #[test]
    fn server_kind_list_must_cover_every_site() {
        let err = parse_config_str("[servers]\nkinds = [\"hp\", \"nettrix\"]\n").unwrap_err();
        assert!(err.to_string().contains("servers.kinds"), "{err}");
    }

    #[test]
    fn catalog_probabilities_must_form_a_distribution() {
        let doc = r#"
[[jobs.catalog]]
intensity = 10.0
deadline = 20.0
size = 1.6e10
gen_prob = 0.7
"#;
        let err = parse_config_str(doc).unwrap_err();
        assert!(err.to_string().contains("gen_prob"), "{err}");
    }

    #[test]
    fn policies_parse_from_names() {
        assert_eq!("ease".parse::<Policy>().unwrap(), Policy::Ease);
        assert_eq!("threshold".parse::<Policy>().unwrap(), Policy::Threshold);
        assert!("lyapunov".parse::<Policy>().is_err());
        assert_eq!(Policy::Migrate.to_string(), "migrate");
    }

    #[test]
    fn nodes_inherit_cluster_and_site_parameters() {
        let cfg = ScenarioConfig::default();
        let lattice = Lattice::hex(cfg.area.rows, cfg.area.cols, cfg.area.pitch, cfg.area.margin);
        let nodes = cfg.build_nodes(&lattice);
        assert_eq!(nodes.len(), 8);
        assert_relative_eq!(nodes[0].compute_rate, 3.3);
        assert_relative_eq!(nodes[7].compute_rate, 7.6);
        assert_relative_eq!(nodes[3].memory_bits, 64.0 * 8e9);
        assert_relative_eq!(nodes[4].memory_bits, 256.0 * 8e9);
        for n in &nodes {
            assert_relative_eq!(n.tx_cost, 833.75, max_relative = 1e-12);
            assert!(n.neighbors.len() >= 2);
        }
    }
}
