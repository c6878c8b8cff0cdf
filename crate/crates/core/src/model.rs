//! Domain model: jobs, server hardware, per-slot energy bookkeeping.
//!
//! Internal units throughout: workload in Gop, time in seconds, data in bits,
//! power in W, energy in J. Job state lives in three residuals (intensity,
//! deadline, size) that shrink together as workload is applied; the size of a
//! job stays proportional to its remaining intensity.

use alloc::vec::Vec;

use crate::Error;

/// Job identifier, unique across one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

/// Server identifier; doubles as the index into the cluster's node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl core::fmt::Display for JobId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "j{}", self.0)
    }
}

impl core::fmt::Display for NodeId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A class of offloadable jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct JobType {
    /// Total workload (Gop).
    pub intensity: f64,
    /// Completion deadline measured from arrival (s).
    pub deadline: f64,
    /// Memory footprint of the job's data (bits).
    pub size: f64,
    /// Size of the result returned to the vehicle (bits).
    pub result_size: f64,
    /// Per-slot probability that an idle vehicle spawns this type.
    pub gen_prob: f64,
}

/// A running job instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: JobId,
    /// Index into the scenario's job-type catalog.
    pub type_ix: usize,
    /// Vehicle that offloaded the job and will receive the result.
    pub vehicle: u64,
    /// Residual workload (Gop).
    pub intensity: f64,
    /// Residual time to the deadline (s); may go non-positive while the
    /// expiry handler decides between extension and drop.
    pub deadline: f64,
    /// Residual data size in RAM (bits).
    pub size: f64,
    /// Intensity at spawn time (Gop).
    pub intensity_0: f64,
    /// Size at spawn time (bits).
    pub size_0: f64,
    /// Server currently hosting the container.
    pub host: NodeId,
    /// Number of migrations performed so far.
    pub migrations: u32,
}

impl Job {
    /// Workload rate needed to finish exactly at the deadline (Gop/s).
    /// Callers must ensure `deadline > 0`.
    #[inline]
    pub fn rate(&self) -> f64 {
        self.intensity / self.deadline
    }

    /// Bits of data per Gop of workload for this job.
    #[inline]
    pub fn size_per_intensity(&self) -> f64 {
        self.size_0 / self.intensity_0
    }
}

/// Static description of one edge server and its radio site.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub id: NodeId,
    /// Site coordinates (m).
    pub position: (f64, f64),
    /// Adjacent sites, sorted ascending. Symmetric across the cluster.
    pub neighbors: Vec<NodeId>,
    /// Computational capacity F (Gop/s).
    pub compute_rate: f64,
    /// RAM capacity M (bits).
    pub memory_bits: f64,
    /// Server idle power (W).
    pub p_idle: f64,
    /// Server power at full load (W).
    pub p_max: f64,
    /// Radio access equipment power (W).
    pub p_ran: f64,
    /// Backhaul equipment power (W).
    pub p_wired: f64,
    /// Wireless transmission energy (J/bit).
    pub e_bit_ran: f64,
    /// Backhaul transmission energy (J/bit).
    pub e_bit_wired: f64,
    /// Per-bit cost of freezing and sending a container at the source (J/bit).
    pub e_bit_mig_src: f64,
    /// Per-bit cost of receiving and restoring a container (J/bit).
    pub e_bit_mig_dst: f64,
    /// Fixed migration cost at the source (J).
    pub e_fix_mig_src: f64,
    /// Fixed migration cost at the destination (J).
    pub e_fix_mig_dst: f64,
    /// Container image size L (bits).
    pub container_bits: f64,
    /// Service downtime per migration, charged to the job's deadline (s).
    pub t_migr: f64,
    /// Energy price of shipping one Gop/s of workload out (J/Gop).
    pub tx_cost: f64,
    /// Energy price of absorbing one Gop/s of migrated workload (J/Gop).
    pub rx_cost: f64,
    /// Workload rate sustainable per bit of free RAM ((Gop/s)/bit).
    pub mem_to_rate: f64,
}

impl NodeConfig {
    /// Marginal processing energy (P_max - P_idle) / F (J/Gop).
    #[inline]
    pub fn proc_cost(&self) -> f64 {
        (self.p_max - self.p_idle) / self.compute_rate
    }

    /// Constant site power drawn regardless of load (W).
    #[inline]
    pub fn circuit_power(&self) -> f64 {
        self.p_idle + self.p_ran + self.p_wired
    }
}

/// Counts and estimates describing one control slot at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotContext {
    /// Results delivered over the local radio this slot (V).
    pub wireless_results: u32,
    /// Results routed into the backhaul from this node this slot (C).
    pub backhaul_results: u32,
    /// Container migrations arriving this slot.
    pub inbound_migrations: u32,
    /// Container migrations leaving this slot.
    pub outbound_migrations: u32,
    /// Green energy available for workload this slot, Eq-style net of
    /// circuit power and fixed migration costs (J); may be negative.
    pub harvest_estimate: f64,
}

/// Cumulative per-node energy accounts (J). All fields only grow.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    /// Harvested energy actually consumed.
    pub harvested_used: f64,
    /// Energy bought from the grid.
    pub grid_drawn: f64,
    /// Workload processing share of consumption.
    pub processing: f64,
    /// Container migration share (both directions).
    pub migration: f64,
    /// Result transmission share (radio and backhaul).
    pub transmission: f64,
    /// Circuit share: idle server, radio, and backhaul equipment.
    pub idle: f64,
}

impl EnergyLedger {
    /// Settles one slot: splits the consumption between the harvest available
    /// this slot and the grid. Surplus harvest is forfeited (sold back), not
    /// banked. Keeps `consumed() == harvested_used + grid_drawn` exact.
    pub fn settle_slot(
        &mut self,
        processing: f64,
        migration: f64,
        transmission: f64,
        idle: f64,
        harvest: f64,
    ) {
        debug_assert!(processing >= 0.0 && migration >= 0.0);
        debug_assert!(transmission >= 0.0 && idle >= 0.0 && harvest >= 0.0);
        let total = processing + migration + transmission + idle;
        let from_harvest = total.min(harvest);
        self.processing += processing;
        self.migration += migration;
        self.transmission += transmission;
        self.idle += idle;
        self.harvested_used += from_harvest;
        self.grid_drawn += total - from_harvest;
    }

    /// Total energy consumed (J).
    pub fn consumed(&self) -> f64 {
        self.processing + self.migration + self.transmission + self.idle
    }

    /// Fraction of consumption covered by harvested energy.
    pub fn efficiency(&self) -> f64 {
        let total = self.harvested_used + self.grid_drawn;
        if total > 0.0 {
            self.harvested_used / total
        } else {
            1.0
        }
    }

    /// Signed gap between the itemized consumption and the sourcing split.
    /// Zero up to rounding when every slot went through [`settle_slot`].
    pub fn closure_error(&self) -> f64 {
        self.consumed() - (self.harvested_used + self.grid_drawn)
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        self.harvested_used += other.harvested_used;
        self.grid_drawn += other.grid_drawn;
        self.processing += other.processing;
        self.migration += other.migration;
        self.transmission += other.transmission;
        self.idle += other.idle;
    }
}

/// Applies `work` Gop to a job over a slot of `tau` seconds.
///
/// Intensity and deadline shrink linearly; size shrinks proportionally to the
/// processed intensity, so `size == size_0/intensity_0 * intensity` holds
/// along the whole trajectory.
pub fn advance_job(job: &Job, work: f64, tau: f64) -> Result<Job, Error> {
    if !(tau > 0.0) {
        return Err(Error::Precondition("advance_job: tau must be positive"));
    }
    // Tolerate the solver's rounding noise around the box bounds.
    let slack = 1e-9 * job.intensity_0.max(1.0);
    if !(-slack..=job.intensity + slack).contains(&work) {
        return Err(Error::Precondition("advance_job: work outside [0, intensity]"));
    }
    let work = work.clamp(0.0, job.intensity);
    let mut next = job.clone();
    next.intensity = job.intensity - work;
    next.deadline = job.deadline - tau;
    next.size = (job.size - job.size_per_intensity() * work).max(0.0);
    Ok(next)
}

/// Energy to migrate one container of `size_bits` job data, as
/// `(source_j, destination_j)`.
///
/// The source freezes and ships the container image plus the job data over
/// the backhaul; the destination receives and restores the image. Job data
/// transport is charged at the plain backhaul rate.
pub fn migration_energy(src: &NodeConfig, dst: &NodeConfig, size_bits: f64) -> (f64, f64) {
    let source = src.e_bit_mig_src * src.container_bits
        + src.e_bit_wired * size_bits
        + src.e_fix_mig_src;
    let destination = dst.e_bit_mig_dst * src.container_bits + dst.e_fix_mig_dst;
    (source, destination)
}

/// Green energy left for workload in one slot (J); negative when the circuit
/// power and migration overheads already exceed the harvest.
///
/// Migration counts may be fractional: a forecast bills expected containers,
/// not committed ones. Overheads here use the fixed container image only;
/// the data-dependent share is priced by the migration plan itself.
pub fn harvested_energy(
    cfg: &NodeConfig,
    p_pv: f64,
    inbound_migrations: f64,
    outbound_migrations: f64,
    tau: f64,
) -> f64 {
    let inbound = cfg.e_bit_mig_dst * cfg.container_bits + cfg.e_fix_mig_dst;
    let outbound =
        (cfg.e_bit_mig_src + cfg.e_bit_wired) * cfg.container_bits + cfg.e_fix_mig_src;
    (p_pv - cfg.circuit_power()) * tau
        - inbound_migrations * inbound
        - outbound_migrations * outbound
}

/// Net energy the node must buy from the grid this slot (J) given `work_sum`
/// Gop of processing; negative values mean green surplus.
pub fn energy_deficit(cfg: &NodeConfig, work_sum: f64, ctx: &SlotContext, result_bits: f64) -> f64 {
    cfg.proc_cost() * work_sum
        + f64::from(ctx.wireless_results) * cfg.e_bit_ran * result_bits
        + f64::from(ctx.backhaul_results) * cfg.e_bit_wired * result_bits
        - ctx.harvest_estimate
}

/// Urgency cost of a job set: the sum of squared completion rates (Gop/s)^2.
/// Fails if any job's deadline is not positive.
pub fn state_cost(jobs: &[Job]) -> Result<f64, Error> {
    let mut acc = 0.0;
    for job in jobs {
        if !(job.deadline > 0.0) {
            return Err(Error::Precondition("state_cost: deadline must be positive"));
        }
        let r = job.rate();
        acc += r * r;
    }
    Ok(acc)
}

/// Residual compute (Gop/s) and memory (bits) after running `work` on `jobs`
/// for one slot; negative components flag overload.
pub fn capacity_residuals(cfg: &NodeConfig, jobs: &[Job], work: &[f64], tau: f64) -> (f64, f64) {
    debug_assert_eq!(jobs.len(), work.len());
    let used_rate: f64 = work.iter().sum::<f64>() / tau;
    let used_mem: f64 = jobs.iter().map(|j| j.size).sum();
    (cfg.compute_rate - used_rate, cfg.memory_bits - used_mem)
}
