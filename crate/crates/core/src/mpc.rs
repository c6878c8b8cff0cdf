//! Per-server receding-horizon workload control.
//!
//! Every slot each server plans workload `w[t][k]` (Gop) for its jobs over a
//! short horizon of `T` slots of length `tau` and applies only row 0. The
//! planned objective is
//!
//! ```text
//!   J(w) = state_weight * sum_{t=0..T-1} sum_k (I_k(t) / D_k(t))^2
//!        + sum_{t=0..T-1} hinge(f_t(w))^2
//!        + sum_{t=0..T-1} [ compute_penalty * hinge(W_t/tau - F)
//!                         + memory_penalty  * hinge((mem_t - M)/8e9) ]
//! ```
//!
//! where `I_k(t) = I_k - sum_{s<t} w[s][k]` is the residual intensity,
//! `D_k(t) = D_k - t*tau` the residual deadline, `W_t` the total workload in
//! slot t (jobs plus base load), `mem_t` the RAM occupancy, and
//! `f_t = proc_cost*W_t + v_t*e_bit_ran*R + c_t*e_bit_wired*R - e_h[t]` the
//! slot's grid draw. The memory penalty is priced per GB (8e9 bits) of
//! violation so its gradient lives on the same scale as the rest.
//!
//! Constraints: `0 <= w[t][k]` with `sum_t w[t][k] <= I_k` per job, and jobs
//! whose deadline falls inside the horizon are forced to finish exactly in
//! the slot where `D_k(t) <= tau`; those rows are substituted out rather
//! than constrained. Jobs already at `D_k <= tau` are pre-assigned
//! `w[0][k] = I_k` and enter slot 0 as base load. Expected future arrivals
//! (`incoming_rate * tau` Gop) load every slot from 1 on.
//!
//! The solver is projected gradient with Armijo backtracking: box plus
//! per-job simplex projection, soft constraints folded into the objective as
//! exact hinge penalties. It stops when the relative objective change drops
//! below `rel_tol` or after `max_iters` iterations.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Job, JobId, NodeConfig};
use crate::numeric::hinge;
use crate::Error;

/// Bits per GB; the memory penalty weight prices violations per GB.
pub const MEM_PENALTY_UNIT_BITS: f64 = 8e9;

/// Objective weights for the local plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcWeights {
    /// Weight on the urgency state cost.
    pub state_weight: f64,
    /// Penalty per Gop/s of compute-capacity violation.
    pub compute_penalty: f64,
    /// Penalty per GB of RAM violation.
    pub memory_penalty: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights { state_weight: 100.0, compute_penalty: 500.0, memory_penalty: 500.0 }
    }
}

/// Forecast inputs for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonEstimates {
    /// Green energy available for workload per slot (J); slot 0 is measured,
    /// later slots forecast. May be negative.
    pub harvest: Vec<f64>,
    /// Results expected on the local radio per slot (V).
    pub wireless_results: Vec<f64>,
    /// Results expected into the backhaul per slot (C).
    pub backhaul_results: Vec<f64>,
    /// Mean workload arrival rate at this node (Gop/s).
    pub incoming_rate: f64,
}

impl HorizonEstimates {
    /// All-zero estimates over `horizon` slots.
    pub fn zero(horizon: usize) -> Self {
        HorizonEstimates {
            harvest: vec![0.0; horizon],
            wireless_results: vec![0.0; horizon],
            backhaul_results: vec![0.0; horizon],
            incoming_rate: 0.0,
        }
    }
}

/// Sliding-window mean of job arrival rates, used to forecast the workload a
/// node will keep receiving.
#[derive(Debug, Clone, Default)]
pub struct RateBuffer {
    window: f64,
    entries: VecDeque<(f64, f64)>,
}

impl RateBuffer {
    pub fn new(window_s: f64) -> Self {
        RateBuffer { window: window_s, entries: VecDeque::new() }
    }

    /// Records a job arrival of `rate` Gop/s at time `now` (s).
    pub fn push(&mut self, now: f64, rate: f64) {
        self.entries.push_back((now, rate));
    }

    /// Mean arrival rate over the window ending at `now`; 0 when empty.
    pub fn mean(&mut self, now: f64) -> f64 {
        while let Some(&(t, _)) = self.entries.front() {
            if now - t > self.window {
                self.entries.pop_front();
            } else {
                break;
            }
        }
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|&(_, r)| r).sum::<f64>() / self.entries.len() as f64
    }
}

/// Builds the horizon estimates for one slot.
///
/// `pv_by_slot` carries one PV power forecast per slot (slot 0 being the
/// measurement). Containers expected to cross (`expected_out` leaving,
/// `expected_in` arriving, read off the border census) are billed on slots
/// 0 and 1 and nowhere else: each crosses at most once, about now, so the
/// slot-0 charge makes room for the freight in the plan that is about to be
/// applied, the slot-1 charge keeps it priced into the residual estimates
/// the agreement phase trades on, and billing every slot would overstate
/// the cost several-fold.
pub fn forecast_horizon(
    cfg: &NodeConfig,
    pv_by_slot: &[f64],
    expected_in: u32,
    expected_out: u32,
    known_wireless: u32,
    known_backhaul: u32,
    incoming_rate: f64,
    tau: f64,
) -> HorizonEstimates {
    let horizon = pv_by_slot.len();
    let mut harvest = Vec::with_capacity(horizon);
    for (t, &pv) in pv_by_slot.iter().enumerate() {
        let (n_in, n_out) = if t <= 1 { (expected_in, expected_out) } else { (0, 0) };
        harvest.push(crate::model::harvested_energy(cfg, pv, n_in, n_out, tau));
    }
    HorizonEstimates {
        harvest,
        wireless_results: vec![f64::from(known_wireless); horizon],
        backhaul_results: vec![f64::from(known_backhaul); horizon],
        incoming_rate,
    }
}

/// One local planning problem.
#[derive(Debug, Clone)]
pub struct LocalInstance<'a> {
    pub cfg: &'a NodeConfig,
    pub jobs: &'a [Job],
    pub weights: MpcWeights,
    pub estimates: &'a HorizonEstimates,
    pub tau: f64,
    /// Number of slots planned (>= 2 so the residual means are defined).
    pub horizon: usize,
    /// Result size assumed for deliveries (bits).
    pub result_bits: f64,
}

/// Solver knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iters: u32,
    /// Stop when the relative objective change falls below this.
    pub rel_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { max_iters: 5000, rel_tol: 1e-8 }
    }
}

/// The plan for one node and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    /// Job ids in column order of `work`.
    pub job_ids: Vec<JobId>,
    /// Planned workload, `work[t][k]` Gop.
    pub work: Vec<Vec<f64>>,
    /// Per-slot soft-constraint violations actually used:
    /// (compute Gop/s, memory bits). Non-negative.
    pub slack: Vec<(f64, f64)>,
    /// Objective value at the plan.
    pub objective: f64,
    pub iterations: u32,
    /// Total workload per slot including base loads (Gop).
    pub work_per_slot: Vec<f64>,
    /// RAM occupancy per slot (bits).
    pub mem_per_slot: Vec<f64>,
    /// Grid draw f_t per slot at the plan (J); negative means surplus.
    pub deficit_per_slot: Vec<f64>,
}

/// The workload to apply this slot: row 0 of the plan.
pub fn receding_step(sol: &LocalSolution) -> &[f64] {
    &sol.work[0]
}

/// Residual green power (W), compute (Gop/s), and memory (bits), averaged
/// over the horizon excluding slot 0. Any component may be negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEstimates {
    pub green_power: f64,
    pub compute: f64,
    pub memory: f64,
}

pub fn residual_estimates(
    sol: &LocalSolution,
    cfg: &NodeConfig,
    tau: f64,
) -> Result<ResidualEstimates, Error> {
    let horizon = sol.work_per_slot.len();
    if horizon < 2 {
        return Err(Error::Precondition("residual_estimates: horizon must be >= 2"));
    }
    let n = (horizon - 1) as f64;
    let mut green = 0.0;
    let mut compute = 0.0;
    let mut memory = 0.0;
    for t in 1..horizon {
        green += -sol.deficit_per_slot[t] / tau;
        compute += cfg.compute_rate - sol.work_per_slot[t] / tau;
        memory += cfg.memory_bits - sol.mem_per_slot[t];
    }
    Ok(ResidualEstimates { green_power: green / n, compute: compute / n, memory: memory / n })
}

// Per-job schedule structure after the deadline substitution.
struct JobPlan {
    // Index into the instance's job list.
    job: usize,
    // First free variable of this job in the flat vector.
    offset: usize,
    // Number of free slots (0..free).
    free: usize,
    // Slot where the job is forced to finish, if inside the horizon.
    forced_slot: Option<usize>,
}

struct Compiled<'a> {
    inst: &'a LocalInstance<'a>,
    plans: Vec<JobPlan>,
    // Jobs with deadline <= tau, pre-assigned w[0] = I.
    forced_now: Vec<usize>,
    n_vars: usize,
    // Base workload per slot: forced-now jobs at slot 0, expected arrivals
    // from slot 1 on (Gop).
    base_work: Vec<f64>,
    // Constant objective share: urgency cost at t = 0.
    g_const: f64,
}

struct Evaluation {
    cost: f64,
    work_per_slot: Vec<f64>,
    mem_per_slot: Vec<f64>,
    deficit_per_slot: Vec<f64>,
}

impl<'a> Compiled<'a> {
    fn new(inst: &'a LocalInstance<'a>) -> Result<Self, Error> {
        if inst.horizon < 2 {
            return Err(Error::Precondition("solve_local: horizon must be >= 2"));
        }
        if !(inst.tau > 0.0) {
            return Err(Error::Precondition("solve_local: tau must be positive"));
        }
        if inst.estimates.harvest.len() != inst.horizon
            || inst.estimates.wireless_results.len() != inst.horizon
            || inst.estimates.backhaul_results.len() != inst.horizon
        {
            return Err(Error::Precondition("solve_local: estimate lengths must equal horizon"));
        }
        let t_count = inst.horizon;
        let mut plans = Vec::new();
        let mut forced_now = Vec::new();
        let mut n_vars = 0usize;
        let mut base_work = vec![0.0; t_count];
        let mut g_const = 0.0;
        for (k, job) in inst.jobs.iter().enumerate() {
            if !(job.deadline > 0.0) || !(job.intensity >= 0.0) {
                return Err(Error::Precondition("solve_local: jobs need deadline > 0, intensity >= 0"));
            }
            let r = job.intensity / job.deadline;
            g_const += inst.weights.state_weight * r * r;
            if job.deadline <= inst.tau {
                forced_now.push(k);
                base_work[0] += job.intensity;
                continue;
            }
            // Smallest t with D - t*tau <= tau.
            let forced = crate::numeric::ceil(job.deadline / inst.tau - 1.0).max(1.0) as usize;
            let (free, forced_slot) = if forced < t_count {
                (forced, Some(forced))
            } else {
                (t_count, None)
            };
            plans.push(JobPlan { job: k, offset: n_vars, free, forced_slot });
            n_vars += free;
        }
        for t in 1..t_count {
            base_work[t] += inst.estimates.incoming_rate * inst.tau;
        }
        Ok(Compiled { inst, plans, forced_now, n_vars, base_work, g_const })
    }

    // Residual intensity of plan `p`'s job before slot t, given free vars x.
    // Only valid for t at most the forced slot (inclusive).
    fn residual_before(&self, p: &JobPlan, x: &[f64], t: usize) -> f64 {
        let job = &self.inst.jobs[p.job];
        let upto = t.min(p.free);
        let done: f64 = x[p.offset..p.offset + upto].iter().sum();
        job.intensity - done
    }

    fn slot_sums(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t_count = self.inst.horizon;
        let mut work = self.base_work.clone();
        let mut mem = vec![0.0; t_count];
        for &k in &self.forced_now {
            mem[0] += self.inst.jobs[k].size;
        }
        for p in &self.plans {
            let job = &self.inst.jobs[p.job];
            let ratio = job.size_per_intensity();
            let last = p.forced_slot.unwrap_or(t_count - 1).min(t_count - 1);
            for t in 0..=last {
                let residual = self.residual_before(p, x, t);
                mem[t] += ratio * residual;
                let w = if t < p.free {
                    x[p.offset + t]
                } else {
                    residual // forced slot: finish exactly
                };
                work[t] += w;
            }
        }
        (work, mem)
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let inst = self.inst;
        let t_count = inst.horizon;
        let (work, mem) = self.slot_sums(x);
        let mut cost = self.g_const;
        // Urgency cost for t >= 1 (t = 0 is the constant).
        for p in &self.plans {
            let job = &inst.jobs[p.job];
            let last = p.forced_slot.unwrap_or(t_count - 1).min(t_count - 1);
            for t in 1..=last {
                let residual = self.residual_before(p, x, t);
                let d = job.deadline - t as f64 * inst.tau;
                cost += inst.weights.state_weight * (residual / d) * (residual / d);
            }
        }
        let mut deficit = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let f = inst.cfg.proc_cost() * work[t]
                + inst.estimates.wireless_results[t] * inst.cfg.e_bit_ran * inst.result_bits
                + inst.estimates.backhaul_results[t] * inst.cfg.e_bit_wired * inst.result_bits
                - inst.estimates.harvest[t];
            deficit.push(f);
            let fh = hinge(f);
            cost += fh * fh;
            cost += inst.weights.compute_penalty * hinge(work[t] / inst.tau - inst.cfg.compute_rate);
            cost += inst.weights.memory_penalty
                * hinge((mem[t] - inst.cfg.memory_bits) / MEM_PENALTY_UNIT_BITS);
        }
        Evaluation { cost, work_per_slot: work, mem_per_slot: mem, deficit_per_slot: deficit }
    }

    fn gradient(&self, x: &[f64], eval: &Evaluation, grad: &mut [f64]) {
        let inst = self.inst;
        let t_count = inst.horizon;
        // Pressure on the slot workload sum and on the slot memory sum.
        let mut work_press = vec![0.0; t_count];
        let mut mem_press = vec![0.0; t_count];
        for t in 0..t_count {
            let f = eval.deficit_per_slot[t];
            let mut press = 0.0;
            if f > 0.0 {
                press += 2.0 * f * inst.cfg.proc_cost();
            }
            if eval.work_per_slot[t] / inst.tau - inst.cfg.compute_rate > 0.0 {
                press += inst.weights.compute_penalty / inst.tau;
            }
            work_press[t] = press;
            if eval.mem_per_slot[t] - inst.cfg.memory_bits > 0.0 {
                mem_press[t] = inst.weights.memory_penalty / MEM_PENALTY_UNIT_BITS;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for p in &self.plans {
            let job = &inst.jobs[p.job];
            let ratio = job.size_per_intensity();
            let last = p.forced_slot.unwrap_or(t_count - 1).min(t_count - 1);
            // Downstream pull: raising w at slot s lowers the residual at
            // every later slot (urgency and memory relax), and lowers the
            // forced slot's workload.
            for s in 0..p.free.min(t_count) {
                let mut g = work_press[s];
                for t in (s + 1)..=last {
                    let residual = self.residual_before(p, x, t);
                    let d = job.deadline - t as f64 * inst.tau;
                    g -= 2.0 * inst.weights.state_weight * residual / (d * d);
                    g -= mem_press[t] * ratio;
                }
                if let Some(fs) = p.forced_slot {
                    if fs < t_count {
                        g -= work_press[fs];
                    }
                }
                grad[p.offset + s] = g;
            }
        }
    }

    // Projects each job's row onto { w >= 0, sum w <= intensity }.
    fn project(&self, x: &mut [f64], scratch: &mut Vec<f64>) {
        for p in &self.plans {
            let cap = self.inst.jobs[p.job].intensity;
            let row = &mut x[p.offset..p.offset + p.free];
            for w in row.iter_mut() {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            if sum <= cap {
                continue;
            }
            // Euclidean projection onto the simplex sum = cap.
            scratch.clear();
            scratch.extend_from_slice(row);
            scratch.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
            let mut acc = 0.0;
            let mut theta = 0.0;
            for (j, &v) in scratch.iter().enumerate() {
                acc += v;
                let candidate = (acc - cap) / (j as f64 + 1.0);
                if v - candidate > 0.0 {
                    theta = candidate;
                } else {
                    break;
                }
            }
            for w in row.iter_mut() {
                *w = (*w - theta).max(0.0);
            }
        }
    }

    // Expands the free vector into the full work matrix, forced entries
    // included.
    fn expand(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let t_count = self.inst.horizon;
        let mut work = vec![vec![0.0; self.inst.jobs.len()]; t_count];
        for &k in &self.forced_now {
            work[0][k] = self.inst.jobs[k].intensity;
        }
        for p in &self.plans {
            for t in 0..p.free.min(t_count) {
                work[t][p.job] = x[p.offset + t];
            }
            if let Some(fs) = p.forced_slot {
                if fs < t_count {
                    work[fs][p.job] = self.residual_before(p, x, fs);
                }
            }
        }
        work
    }
}

/// Plans the next `horizon` slots for one node. `warm` may carry the
/// previous slot's solution; columns are matched by job id and shifted one
/// slot forward.
pub fn solve_local(
    inst: &LocalInstance<'_>,
    settings: &SolverSettings,
    warm: Option<&LocalSolution>,
) -> Result<LocalSolution, Error> {
    let compiled = Compiled::new(inst)?;
    let mut x = vec![0.0; compiled.n_vars];
    if let Some(prev) = warm {
        for p in &compiled.plans {
            let id = inst.jobs[p.job].id;
            if let Some(col) = prev.job_ids.iter().position(|&j| j == id) {
                for t in 0..p.free {
                    let src = t + 1;
                    if src < prev.work.len() {
                        x[p.offset + t] = prev.work[src][col].max(0.0);
                    }
                }
            }
        }
    }
    let mut scratch = Vec::new();
    compiled.project(&mut x, &mut scratch);

    let mut eval = compiled.evaluate(&x);
    let mut grad = vec![0.0; compiled.n_vars];
    let mut step = 1.0 / (1.0 + 2.0 * inst.cfg.proc_cost() * inst.cfg.proc_cost());
    let mut iterations = 0;
    let mut candidate = vec![0.0; compiled.n_vars];
    for _ in 0..settings.max_iters {
        if compiled.n_vars == 0 {
            break;
        }
        iterations += 1;
        compiled.gradient(&x, &eval, &mut grad);
        // Backtracking on the projected step until sufficient decrease.
        let mut accepted = false;
        for _ in 0..60 {
            candidate.copy_from_slice(&x);
            for i in 0..x.len() {
                candidate[i] -= step * grad[i];
            }
            compiled.project(&mut candidate, &mut scratch);
            let move_sq: f64 =
                candidate.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if move_sq == 0.0 {
                accepted = true; // stationary: projection returned x itself
                break;
            }
            let next = compiled.evaluate(&candidate);
            if next.cost <= eval.cost - 1e-4 / step * move_sq {
                let rel = (eval.cost - next.cost) / eval.cost.abs().max(1e-12);
                core::mem::swap(&mut x, &mut candidate);
                eval = next;
                step *= 1.5;
                accepted = true;
                if rel < settings.rel_tol {
                    iterations = iterations.max(1);
                    // Converged: relative progress exhausted.
                    return Ok(finish(&compiled, &x, eval, iterations));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // step underflow: nothing left to gain
        }
    }
    Ok(finish(&compiled, &x, eval, iterations))
}

fn finish(compiled: &Compiled<'_>, x: &[f64], eval: Evaluation, iterations: u32) -> LocalSolution {
    let inst = compiled.inst;
    let work = compiled.expand(x);
    let slack = (0..inst.horizon)
        .map(|t| {
            (
                hinge(eval.work_per_slot[t] / inst.tau - inst.cfg.compute_rate),
                hinge(eval.mem_per_slot[t] - inst.cfg.memory_bits),
            )
        })
        .collect();
    LocalSolution {
        job_ids: inst.jobs.iter().map(|j| j.id).collect(),
        work,
        slack,
        objective: eval.cost,
        iterations,
        work_per_slot: eval.work_per_slot,
        mem_per_slot: eval.mem_per_slot,
        deficit_per_slot: eval.deficit_per_slot,
    }
}
