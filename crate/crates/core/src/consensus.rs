//! Distributed agreement on workload handoff between neighboring servers.
//!
//! Each server i plans an outgoing workload rate toward every neighbor
//! (`outflow`) and an incoming rate from every neighbor (`inflow`), plus a
//! non-negative capacity `slack`. Server pairs must agree: i's outflow toward
//! j has to match j's inflow from i. The objective per node is
//!
//! ```text
//!   hinge(tx_margin * sum(outflow) + rx_margin * sum(inflow) - green_power)
//!     + tracking_weight/2 * |outflow - desired_out|^2
//!     + tracking_weight/2 * |inflow  - desired_in |^2
//!     + slack_penalty * slack^2
//! ```
//!
//! subject to `sum(inflow) - sum(outflow) - slack <= capacity` and
//! non-negativity. Everything except the agreement constraint is local, so
//! the problem is solved by dual ascent with two message rounds per
//! iteration: prices out, then plans back. The primal minimizer has a closed
//! form with exactly three mutually exclusive cases depending on where the
//! hinge sits at the optimum.
//!
//! The iteration converges for any step below [`step_size_bound`], the
//! classic `2 / ||A Q^-1 A^T||` threshold computed here by power iteration
//! on the sparse constraint rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Job, JobId, NodeId};
use crate::numeric::{hinge, norm_sq, sqrt};
use crate::Error;

/// Workload a node would like to hand to each neighbor, grouped by target.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredMigration {
    /// Workload rate toward each neighbor (Gop/s).
    pub rates: Vec<f64>,
    /// Data volume behind each rate (bits). Informational; the capacity
    /// constraint folds memory in through `mem_to_rate` instead.
    pub volumes: Vec<f64>,
    /// The jobs behind each rate, ordered by id.
    pub job_sets: Vec<Vec<JobId>>,
}

impl DesiredMigration {
    pub fn empty(n_neighbors: usize) -> Self {
        DesiredMigration {
            rates: vec![0.0; n_neighbors],
            volumes: vec![0.0; n_neighbors],
            job_sets: vec![Vec::new(); n_neighbors],
        }
    }
}

/// Groups border jobs by their most likely handover target.
///
/// `jobs` carries one entry per job that sits in the handover zone, paired
/// with its handover probabilities aligned to the node's neighbor list. Ties
/// on the probability pick the lowest neighbor position. Jobs must have a
/// positive residual deadline.
pub fn desired_migration(jobs: &[(&Job, &[f64])], n_neighbors: usize) -> DesiredMigration {
    let mut out = DesiredMigration::empty(n_neighbors);
    for (job, probs) in jobs {
        debug_assert_eq!(probs.len(), n_neighbors);
        debug_assert!(job.deadline > 0.0);
        let mut best = 0usize;
        for j in 1..n_neighbors {
            if probs[j] > probs[best] {
                best = j;
            }
        }
        out.rates[best] += job.rate();
        out.volumes[best] += job.size;
        out.job_sets[best].push(job.id);
    }
    for set in &mut out.job_sets {
        set.sort_unstable();
    }
    out
}

/// Static per-node inputs to one agreement round.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusNode {
    pub id: NodeId,
    /// Sorted neighbor ids; must be symmetric across the cluster.
    pub neighbors: Vec<NodeId>,
    /// Net energy price of shipping one Gop/s out: tx_cost - proc_cost (J/Gop).
    pub tx_margin: f64,
    /// Net energy price of absorbing one Gop/s: rx_cost + proc_cost (J/Gop).
    pub rx_margin: f64,
    /// Residual green power over the local horizon (W). Negative values are
    /// treated as zero surplus by the primal step.
    pub green_power: f64,
    /// Residual compute over the local horizon (Gop/s); may be negative.
    pub compute: f64,
    /// Residual memory over the local horizon (bits); may be negative.
    pub memory: f64,
    /// Workload rate sustainable per bit of residual memory ((Gop/s)/bit).
    pub mem_to_rate: f64,
    /// Weight pulling flows toward the desired rates (rho).
    pub tracking_weight: f64,
    /// Quadratic price of capacity slack (c_hat).
    pub slack_penalty: f64,
    /// Desired outgoing rate per neighbor (Gop/s).
    pub desired_out: Vec<f64>,
}

impl ConsensusNode {
    /// Inflow headroom: residual compute or the rate the residual memory can
    /// absorb, whichever binds first.
    #[inline]
    pub fn capacity(&self) -> f64 {
        self.compute.min(self.mem_to_rate * self.memory)
    }
}

/// Mutable per-node iterate: primal plans and dual prices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusNodeState {
    /// Planned outgoing rate per neighbor (Gop/s).
    pub outflow: Vec<f64>,
    /// Planned incoming rate from each neighbor (Gop/s).
    pub inflow: Vec<f64>,
    /// Capacity slack in use (Gop/s).
    pub slack: f64,
    /// Price on the capacity constraint.
    pub capacity_price: f64,
    /// Price on the slack's sign constraint.
    pub slack_price: f64,
    /// Prices on the outflow sign constraints.
    pub outflow_price: Vec<f64>,
    /// Prices on the inflow sign constraints.
    pub inflow_price: Vec<f64>,
    /// Agreement prices this node maintains for its own outflows.
    pub agreement_price: Vec<f64>,
    /// Desired inflow from each neighbor, learned in the setup round.
    pub desired_in: Vec<f64>,
    /// Latest agreement prices received from each neighbor.
    pub peer_price: Vec<f64>,
    /// Latest inflow plans received from each neighbor (their expectation of
    /// our outflow).
    pub peer_inflow: Vec<f64>,
}

impl ConsensusNodeState {
    pub fn new(n_neighbors: usize) -> Self {
        ConsensusNodeState {
            outflow: vec![0.0; n_neighbors],
            inflow: vec![0.0; n_neighbors],
            slack: 0.0,
            capacity_price: 0.0,
            slack_price: 0.0,
            outflow_price: vec![0.0; n_neighbors],
            inflow_price: vec![0.0; n_neighbors],
            agreement_price: vec![0.0; n_neighbors],
            desired_in: vec![0.0; n_neighbors],
            peer_price: vec![0.0; n_neighbors],
            peer_inflow: vec![0.0; n_neighbors],
        }
    }

    /// Largest disagreement between this node's outflow and what the
    /// matching neighbors plan to receive.
    pub fn agreement_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.outflow.len() {
            let gap = (self.outflow[j] - self.peer_inflow[j]).abs();
            if gap > worst {
                worst = gap;
            }
        }
        worst
    }

    /// Worst constraint violation of the current plan: agreement gaps,
    /// capacity overrun and negative components. Zero means primal feasible.
    pub fn primal_residual(&self, capacity: f64) -> f64 {
        let mut worst = self.agreement_residual();
        let flow_gap: f64 =
            self.inflow.iter().sum::<f64>() - self.outflow.iter().sum::<f64>();
        worst = worst.max(hinge(flow_gap - self.slack - capacity));
        worst = worst.max(hinge(-self.slack));
        for j in 0..self.outflow.len() {
            worst = worst.max(hinge(-self.outflow[j]));
            worst = worst.max(hinge(-self.inflow[j]));
        }
        worst
    }
}

/// Which branch of the closed-form primal accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimalCase {
    /// The energy hinge is inactive at the optimum (green surplus).
    Surplus,
    /// The hinge is strictly active (the plan draws grid power).
    Deficit,
    /// The optimum sits exactly on the hinge boundary.
    Breakeven,
}

/// One closed-form primal minimization of the local Lagrangian.
///
/// Solves `min_x |x - b|_Q^2 + a^T x + hinge(q^T x - green_power)` where
/// `x = [outflow, inflow, slack]`, `b = [desired_out, desired_in, 0]`,
/// `q = [tx_margin.., rx_margin.., 0]`, `Q = diag(rho/2.., c_hat)` and `a`
/// collects the dualized constraint rows. Exactly one of the three candidate
/// branches accepts. Sign constraints are dualized, so components may go
/// negative along the way; they vanish at convergence.
pub fn primal_step(
    node: &ConsensusNode,
    state: &ConsensusNodeState,
) -> Result<(Vec<f64>, Vec<f64>, f64, PrimalCase), Error> {
    let n = node.neighbors.len();
    let w_flow = node.tracking_weight / 2.0;
    let w_slack = node.slack_penalty;
    if !(w_flow > 0.0) || !(w_slack > 0.0) {
        return Err(Error::SingularWeights);
    }

    // a = A^T nu, blocked as [outflow, inflow, slack].
    let lambda = state.capacity_price;
    let mut a = Vec::with_capacity(2 * n + 1);
    for j in 0..n {
        a.push(-lambda - state.outflow_price[j] + state.agreement_price[j]);
    }
    for j in 0..n {
        a.push(lambda - state.inflow_price[j] - state.peer_price[j]);
    }
    a.push(-lambda - state.slack_price);

    let mut b = Vec::with_capacity(2 * n + 1);
    b.extend_from_slice(&node.desired_out);
    b.extend_from_slice(&state.desired_in);
    b.push(0.0);

    let mut q = Vec::with_capacity(2 * n + 1);
    q.extend(core::iter::repeat(node.tx_margin).take(n));
    q.extend(core::iter::repeat(node.rx_margin).take(n));
    q.push(0.0);

    let q_diag = |i: usize| if i < 2 * n { w_flow } else { w_slack };
    let solve = |shift: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..2 * n + 1)
            .map(|i| b[i] - (a[i] + shift(i)) / (2.0 * q_diag(i)))
            .collect()
    };
    // A negative budget prices every unit of flow, exactly like a zero one
    // (the margins are nonnegative, so over the sign-feasible set the two
    // hinges differ by a constant). Clamping matters because the sign
    // constraints are dualized: left at its raw value the kink sits outside
    // the orthant, the boundary branch pins the plan to it, and the sign
    // prices crawl instead of converging.
    let budget = node.green_power.max(0.0);
    let energy_gap = |x: &[f64]| crate::numeric::dot(&q, x) - budget;

    // Hinge inactive: ignore q entirely.
    let x = solve(&|_| 0.0);
    let case = if energy_gap(&x) <= 0.0 {
        PrimalCase::Surplus
    } else {
        // Hinge active: q joins the linear term. The gap at this candidate
        // can only be smaller than at the first, so at most one accepts.
        let x2 = solve(&|i| q[i]);
        if energy_gap(&x2) > 0.0 {
            PrimalCase::Deficit
        } else {
            PrimalCase::Breakeven
        }
    };
    let x = match case {
        PrimalCase::Surplus => x,
        PrimalCase::Deficit => solve(&|i| q[i]),
        PrimalCase::Breakeven => {
            // Equality-constrained minimizer on q^T x = green_power.
            let qq: f64 = (0..2 * n + 1).map(|i| q[i] * q[i] / q_diag(i)).sum();
            let qa: f64 = (0..2 * n + 1).map(|i| q[i] * a[i] / q_diag(i)).sum();
            let qb = crate::numeric::dot(&q, &b);
            // qq > 0 here: with q = 0 the gap is constant and one of the
            // other branches has already accepted.
            let eta = (2.0 * (qb - budget) - qa) / qq;
            solve(&|i| eta * q[i])
        }
    };

    let outflow = x[..n].to_vec();
    let inflow = x[n..2 * n].to_vec();
    let slack = x[2 * n];
    Ok((outflow, inflow, slack, case))
}

/// One projected dual update after a primal step.
///
/// `capacity` is the node's inflow headroom for the slot. The capacity price
/// ascends on the full constraint residual, slack included; sign prices
/// descend on their variables; agreement prices move on the gap between this
/// node's outflow and the matching neighbor plans received this iteration.
pub fn dual_step(
    state: &mut ConsensusNodeState,
    outflow: &[f64],
    inflow: &[f64],
    slack: f64,
    capacity: f64,
    alpha: f64,
) {
    let flow_gap: f64 = inflow.iter().sum::<f64>() - outflow.iter().sum::<f64>();
    state.capacity_price = hinge(state.capacity_price + alpha * (flow_gap - slack - capacity));
    state.slack_price = hinge(state.slack_price - alpha * slack);
    for j in 0..outflow.len() {
        state.outflow_price[j] = hinge(state.outflow_price[j] - alpha * outflow[j]);
        state.inflow_price[j] = hinge(state.inflow_price[j] - alpha * inflow[j]);
        state.agreement_price[j] += alpha * (outflow[j] - state.peer_inflow[j]);
    }
    state.outflow.copy_from_slice(outflow);
    state.inflow.copy_from_slice(inflow);
    state.slack = slack;
}

/// Per-node inbox. Writes land here during a communication round and are
/// read only after the round completes, which is what makes the sequential
/// loop equivalent to synchronous message passing.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    price_in: Vec<f64>,
    plan_in: Vec<f64>,
    /// Messages delivered to this inbox over the run.
    pub received: u64,
}

/// Final plans for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAllocation {
    pub outflow: Vec<f64>,
    pub inflow: Vec<f64>,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    pub max_iters: u32,
    /// Convergence threshold on the worst constraint violation (Gop/s).
    pub primal_tol: f64,
    /// Keep prices and plans from the previous run instead of zeroing them.
    pub warm_start: bool,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions { max_iters: 500, primal_tol: 1e-4, warm_start: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentOutcome {
    pub converged: bool,
    pub iterations: u32,
    /// Worst constraint violation at the last iteration.
    pub residual: f64,
    /// Worst constraint violation per iteration.
    pub residual_history: Vec<f64>,
}

/// The cluster as seen by one agreement round: nodes, iterates, inboxes.
#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<ConsensusNode>,
    pub states: Vec<ConsensusNodeState>,
    mailboxes: Vec<Mailbox>,
    /// rev[i][jx] = position of node i inside neighbors(neighbors[i][jx]).
    rev: Vec<Vec<usize>>,
    /// Messages exchanged during iterations.
    pub messages: u64,
    /// Messages exchanged in the one-off desired-inflow setup round.
    pub setup_messages: u64,
}

impl Network {
    /// Validates the topology (sorted, symmetric, in-range neighbor lists)
    /// and prepares zeroed iterates.
    pub fn new(nodes: Vec<ConsensusNode>) -> Result<Self, Error> {
        let n = nodes.len();
        let mut rev = Vec::with_capacity(n);
        for node in &nodes {
            if node.desired_out.len() != node.neighbors.len() {
                return Err(Error::Precondition("desired_out length mismatch"));
            }
            let mut rv = Vec::with_capacity(node.neighbors.len());
            let mut prev: Option<NodeId> = None;
            for &nb in &node.neighbors {
                if nb.0 >= n || nb == node.id || prev.is_some_and(|p| p >= nb) {
                    return Err(Error::BadTopology);
                }
                prev = Some(nb);
                let back = nodes[nb.0].neighbors.binary_search(&node.id).map_err(|_| Error::BadTopology)?;
                rv.push(back);
            }
            rev.push(rv);
        }
        let states = nodes.iter().map(|nd| ConsensusNodeState::new(nd.neighbors.len())).collect();
        let mailboxes = nodes
            .iter()
            .map(|nd| Mailbox {
                price_in: vec![0.0; nd.neighbors.len()],
                plan_in: vec![0.0; nd.neighbors.len()],
                received: 0,
            })
            .collect();
        Ok(Network { nodes, states, mailboxes, rev, messages: 0, setup_messages: 0 })
    }

    /// Number of directed neighbor pairs.
    pub fn directed_edges(&self) -> usize {
        self.nodes.iter().map(|nd| nd.neighbors.len()).sum()
    }

    /// Largest dual step guaranteed stable for this topology and weights.
    pub fn step_size_bound(&self) -> Result<f64, Error> {
        let (rows, q_diag) = self.constraint_rows();
        step_size_bound(&rows, &q_diag)
    }

    /// Sparse constraint rows (capacity, sign, agreement) over the stacked
    /// variable vector, plus the matching quadratic diagonal.
    pub fn constraint_rows(&self) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
        let n = self.nodes.len();
        let mut base = Vec::with_capacity(n);
        let mut n_vars = 0usize;
        for node in &self.nodes {
            base.push(n_vars);
            n_vars += 2 * node.neighbors.len() + 1;
        }
        let mut q_diag = Vec::with_capacity(n_vars);
        for node in &self.nodes {
            let deg = node.neighbors.len();
            q_diag.extend(core::iter::repeat(node.tracking_weight / 2.0).take(2 * deg));
            q_diag.push(node.slack_penalty);
        }

        let mut rows = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let deg = node.neighbors.len();
            let mut cap = Vec::with_capacity(2 * deg + 1);
            for j in 0..deg {
                cap.push((base[i] + j, -1.0));
                cap.push((base[i] + deg + j, 1.0));
            }
            cap.push((base[i] + 2 * deg, -1.0));
            rows.push(cap);
        }
        for v in 0..n_vars {
            rows.push(vec![(v, -1.0)]);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for (jx, &nb) in node.neighbors.iter().enumerate() {
                let peer_slot = self.rev[i][jx];
                let peer_deg = self.nodes[nb.0].neighbors.len();
                rows.push(vec![
                    (base[i] + jx, 1.0),
                    (base[nb.0] + peer_deg + peer_slot, -1.0),
                ]);
            }
        }
        (rows, q_diag)
    }

    /// Runs dual ascent until every constraint violation is below
    /// `primal_tol` or `max_iters` is hit. Two message rounds per iteration:
    /// agreement prices out, inflow plans back. One extra setup round shares
    /// the desired inflows.
    pub fn run_dual_ascent(&mut self, alpha: f64, opts: &AscentOptions) -> Result<AscentOutcome, Error> {
        if !(alpha > 0.0) {
            return Err(Error::Precondition("run_dual_ascent: alpha must be positive"));
        }
        if opts.max_iters == 0 {
            return Err(Error::Precondition("run_dual_ascent: max_iters must be >= 1"));
        }
        let n = self.nodes.len();
        if !opts.warm_start {
            for (i, st) in self.states.iter_mut().enumerate() {
                *st = ConsensusNodeState::new(self.nodes[i].neighbors.len());
            }
        }

        // Setup round: every node tells each neighbor the rate it would like
        // to hand over, which becomes the neighbor's desired inflow.
        for i in 0..n {
            for jx in 0..self.nodes[i].neighbors.len() {
                let nb = self.nodes[i].neighbors[jx].0;
                let slot = self.rev[i][jx];
                self.mailboxes[nb].plan_in[slot] = self.nodes[i].desired_out[jx];
                self.mailboxes[nb].received += 1;
                self.setup_messages += 1;
            }
        }
        for i in 0..n {
            self.states[i].desired_in.copy_from_slice(&self.mailboxes[i].plan_in);
        }

        let caps: Vec<f64> = self.nodes.iter().map(|nd| nd.capacity()).collect();
        let mut history = Vec::new();
        let mut outcome = AscentOutcome {
            converged: false,
            iterations: 0,
            residual: f64::INFINITY,
            residual_history: Vec::new(),
        };

        for iter in 1..=opts.max_iters {
            // Round 1: agreement prices travel to the matching neighbor.
            for i in 0..n {
                for jx in 0..self.nodes[i].neighbors.len() {
                    let nb = self.nodes[i].neighbors[jx].0;
                    let slot = self.rev[i][jx];
                    self.mailboxes[nb].price_in[slot] = self.states[i].agreement_price[jx];
                    self.mailboxes[nb].received += 1;
                    self.messages += 1;
                }
            }
            for i in 0..n {
                self.states[i].peer_price.copy_from_slice(&self.mailboxes[i].price_in);
            }

            // Primal step everywhere, then round 2: each node sends every
            // neighbor the inflow it now expects from them.
            let mut plans = Vec::with_capacity(n);
            for i in 0..n {
                plans.push(primal_step(&self.nodes[i], &self.states[i])?);
            }
            for i in 0..n {
                let inflow = &plans[i].1;
                for jx in 0..self.nodes[i].neighbors.len() {
                    let nb = self.nodes[i].neighbors[jx].0;
                    let slot = self.rev[i][jx];
                    self.mailboxes[nb].plan_in[slot] = inflow[jx];
                    self.mailboxes[nb].received += 1;
                    self.messages += 1;
                }
            }
            for i in 0..n {
                self.states[i].peer_inflow.copy_from_slice(&self.mailboxes[i].plan_in);
            }

            let mut worst = 0.0f64;
            for i in 0..n {
                let (outflow, inflow, slack, _) = &plans[i];
                dual_step(&mut self.states[i], outflow, inflow, *slack, caps[i], alpha);
                worst = worst.max(self.states[i].primal_residual(caps[i]));
            }
            history.push(worst);
            outcome.iterations = iter;
            outcome.residual = worst;
            if worst <= opts.primal_tol {
                outcome.converged = true;
                break;
            }
        }
        outcome.residual_history = history;
        Ok(outcome)
    }

    /// Final plans per node.
    pub fn allocations(&self) -> Vec<NodeAllocation> {
        self.states
            .iter()
            .map(|st| NodeAllocation {
                outflow: st.outflow.clone(),
                inflow: st.inflow.clone(),
                slack: st.slack,
            })
            .collect()
    }

    /// Plans implied by a set of outflows alone: every inflow mirrors the
    /// peer's outflow and the slack absorbs exactly the capacity violation.
    /// This prices hand-built rates (desired or rounded) with `global_cost`.
    pub fn implied_allocations(&self, outflows: &[Vec<f64>]) -> Result<Vec<NodeAllocation>, Error> {
        if outflows.len() != self.nodes.len()
            || outflows.iter().zip(&self.nodes).any(|(o, nd)| o.len() != nd.neighbors.len())
        {
            return Err(Error::Precondition("implied_allocations: outflow shape mismatch"));
        }
        let mut alloc = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let inflow: Vec<f64> = node
                .neighbors
                .iter()
                .enumerate()
                .map(|(jx, &nb)| outflows[nb.0][self.rev[i][jx]])
                .collect();
            let gap = inflow.iter().sum::<f64>() - outflows[i].iter().sum::<f64>();
            alloc.push(NodeAllocation {
                outflow: outflows[i].clone(),
                inflow,
                slack: hinge(gap - node.capacity()),
            });
        }
        Ok(alloc)
    }
}

/// Cluster-wide cost of a set of plans: per-node energy hinge, quadratic
/// deviation of the outflows from the desired rates, and the slack price.
/// Inflows are taken from the plan itself, so the value is meaningful for
/// both converged (consistent) and hand-built allocations.
pub fn global_cost(nodes: &[ConsensusNode], alloc: &[NodeAllocation]) -> f64 {
    debug_assert_eq!(nodes.len(), alloc.len());
    let mut total = 0.0;
    for (node, plan) in nodes.iter().zip(alloc) {
        let spend = node.tx_margin * plan.outflow.iter().sum::<f64>()
            + node.rx_margin * plan.inflow.iter().sum::<f64>();
        total += hinge(spend - node.green_power);
        let mut dev = 0.0;
        for j in 0..plan.outflow.len() {
            let d = plan.outflow[j] - node.desired_out[j];
            dev += d * d;
        }
        total += node.tracking_weight * dev + node.slack_penalty * plan.slack * plan.slack;
    }
    total
}

/// Largest stable dual-ascent step `2 / ||A Q^-1 A^T||` for sparse
/// constraint rows `A` and a positive quadratic diagonal `Q`.
///
/// The spectral norm comes from power iteration on `v -> A Q^-1 A^T v`,
/// which is exact enough here because the operator is symmetric positive
/// semidefinite. Returns infinity for an empty row set.
pub fn step_size_bound(rows: &[Vec<(usize, f64)>], q_diag: &[f64]) -> Result<f64, Error> {
    if q_diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::SingularWeights);
    }
    if rows.is_empty() {
        return Ok(f64::INFINITY);
    }
    let m = rows.len();
    let nv = q_diag.len();
    let apply = |v: &[f64], scratch: &mut [f64], out: &mut [f64]| {
        scratch.iter_mut().for_each(|s| *s = 0.0);
        for (r, row) in rows.iter().enumerate() {
            for &(c, coef) in row {
                scratch[c] += coef * v[r];
            }
        }
        for c in 0..nv {
            scratch[c] /= q_diag[c];
        }
        for (r, row) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(c, coef) in row {
                acc += coef * scratch[c];
            }
            out[r] = acc;
        }
    };

    // Deterministic start with a mild asymmetry so no eigenspace is missed
    // by accident.
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.01 * ((i % 7) as f64)).collect();
    let norm = sqrt(norm_sq(&v));
    v.iter_mut().for_each(|x| *x /= norm);
    let mut scratch = vec![0.0; nv];
    let mut mv = vec![0.0; m];
    let mut lambda = 0.0f64;
    for _ in 0..600 {
        apply(&v, &mut scratch, &mut mv);
        let next = crate::numeric::dot(&v, &mv);
        let norm = sqrt(norm_sq(&mv));
        if norm <= f64::MIN_POSITIVE {
            // A^T v vanished: the operator is zero on this vector and the
            // iteration cannot recover; treat the norm as the best seen.
            break;
        }
        for i in 0..m {
            v[i] = mv[i] / norm;
        }
        let settled = (next - lambda).abs() <= 1e-13 * next.max(1.0);
        lambda = next;
        if settled {
            break;
        }
    }
    if lambda <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 / lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Job, JobId, NodeId};
    use approx::assert_relative_eq;

    fn border_job(id: u64, intensity: f64, deadline: f64) -> Job {
        Job {
            id: JobId(id),
            type_ix: 0,
            vehicle: id,
            intensity,
            deadline,
            size: intensity * 1.6e9,
            intensity_0: intensity,
            size_0: intensity * 1.6e9,
            host: NodeId(0),
            migrations: 0,
        }
    }

    fn plain_node(id: usize, neighbors: Vec<usize>, desired_out: Vec<f64>, green: f64) -> ConsensusNode {
        ConsensusNode {
            id: NodeId(id),
            neighbors: neighbors.into_iter().map(NodeId).collect(),
            tx_margin: 771.6,
            rx_margin: 895.5,
            green_power: green,
            compute: 2.0,
            memory: 5.0e11,
            mem_to_rate: 1.64e-10,
            tracking_weight: 2.5,
            slack_penalty: 10.0,
            desired_out,
        }
    }

    #[test]
    fn desired_migration_groups_by_argmax_target() {
        let a = border_job(1, 10.0, 20.0);
        let b = border_job(2, 16.0, 30.0);
        let jobs: Vec<(&Job, &[f64])> = vec![
            (&a, &[0.1, 0.2, 0.7][..]),
            (&b, &[0.5, 0.3, 0.2][..]),
        ];
        let want = desired_migration(&jobs, 3);
        assert_relative_eq!(want.rates[2], 0.5);
        assert_relative_eq!(want.rates[0], 16.0 / 30.0);
        assert_relative_eq!(want.rates[1], 0.0);
        assert_eq!(want.job_sets[2], vec![JobId(1)]);
        assert_eq!(want.job_sets[0], vec![JobId(2)]);
        assert_relative_eq!(want.volumes[2], 1.6e10);
    }

    #[test]
    fn desired_migration_breaks_probability_ties_low() {
        let a = border_job(1, 10.0, 20.0);
        let jobs: Vec<(&Job, &[f64])> = vec![(&a, &[0.5, 0.5][..])];
        let want = desired_migration(&jobs, 2);
        assert_relative_eq!(want.rates[0], 0.5);
        assert_relative_eq!(want.rates[1], 0.0);
    }

    #[test]
    fn primal_tracks_desired_rates_under_green_surplus() {
        // Zero prices and plenty of green power: the minimizer is b itself.
        let node = plain_node(0, vec![1], vec![0.5], 1e6);
        let state = ConsensusNodeState::new(1);
        let (outflow, inflow, slack, case) = primal_step(&node, &state).unwrap();
        assert_eq!(case, PrimalCase::Surplus);
        assert_relative_eq!(outflow[0], 0.5);
        assert_relative_eq!(inflow[0], 0.0);
        assert_relative_eq!(slack, 0.0);
    }

    #[test]
    fn primal_backs_off_by_half_q_over_weight_under_deficit() {
        // Margins small enough that the backed-off plan still spends more
        // than the budget, so the strictly-active branch accepts.
        let node = ConsensusNode {
            tx_margin: 1.0,
            rx_margin: 1.2,
            ..plain_node(0, vec![1], vec![0.5], 0.0)
        };
        let mut state = ConsensusNodeState::new(1);
        state.desired_in[0] = 0.5;
        let (outflow, inflow, slack, case) = primal_step(&node, &state).unwrap();
        assert_eq!(case, PrimalCase::Deficit);
        assert_relative_eq!(outflow[0], 0.5 - 1.0 / 2.5);
        assert_relative_eq!(inflow[0], 0.5 - 1.2 / 2.5);
        assert_relative_eq!(slack, 0.0);
    }

    #[test]
    fn primal_treats_negative_budget_as_zero() {
        // Deep deficit: the plan lands exactly on zero spend rather than
        // chasing the out-of-range kink.
        let node = plain_node(0, vec![1], vec![0.5], -1e7);
        let state = ConsensusNodeState::new(1);
        let (outflow, inflow, _, case) = primal_step(&node, &state).unwrap();
        assert_eq!(case, PrimalCase::Breakeven);
        let spend = node.tx_margin * outflow[0] + node.rx_margin * inflow[0];
        assert!(spend.abs() <= 1e-6, "spend {spend}");
    }

    #[test]
    fn primal_breakeven_lands_exactly_on_the_hinge() {
        // Green power placed between the two smooth candidates' spends.
        let node = plain_node(0, vec![1], vec![0.5], 200.0);
        let state = ConsensusNodeState::new(1);
        let (outflow, inflow, slack, case) = primal_step(&node, &state).unwrap();
        assert_eq!(case, PrimalCase::Breakeven);
        let spend = node.tx_margin * outflow[0] + node.rx_margin * inflow[0];
        assert!((spend - node.green_power).abs() <= 1e-8, "gap {}", spend - node.green_power);
        assert_relative_eq!(slack, 0.0);
    }

    #[test]
    fn primal_cases_are_mutually_exclusive() {
        // The deficit candidate's energy gap never exceeds the surplus
        // candidate's, so the two acceptance tests cannot both pass. Swept
        // once with zero prices and once with sign prices canceling the
        // margins, which is the regime where the strictly-active branch wins.
        let mut any = [false; 3];
        for k in 0..400 {
            let g = -2000.0 + 25.0 * (k % 200) as f64;
            let node = plain_node(0, vec![1, 2], vec![0.4, 0.8], g);
            let mut state = ConsensusNodeState::new(2);
            state.capacity_price = 0.3 * (k % 5) as f64;
            state.agreement_price[0] = -0.2 * (k % 3) as f64;
            if k >= 200 {
                state.outflow_price = vec![node.tx_margin; 2];
                state.inflow_price = vec![node.rx_margin; 2];
            }
            let (outflow, inflow, _, case) = primal_step(&node, &state).unwrap();
            let spend = node.tx_margin * (outflow[0] + outflow[1])
                + node.rx_margin * (inflow[0] + inflow[1]);
            let budget = node.green_power.max(0.0);
            let tol = 1e-9 * (1.0 + budget.abs());
            match case {
                PrimalCase::Surplus => assert!(spend - budget <= tol),
                PrimalCase::Deficit => assert!(spend - budget > -tol),
                PrimalCase::Breakeven => {
                    assert!((spend - budget).abs() <= 1e-6, "gap {}", spend - budget)
                }
            }
            any[case as usize] = true;
        }
        assert!(any.iter().all(|&seen| seen), "sweep should visit every case");
    }

    #[test]
    fn dual_step_holds_still_at_agreement() {
        let mut state = ConsensusNodeState::new(1);
        state.peer_inflow[0] = 0.2;
        dual_step(&mut state, &[0.2], &[0.1], 0.0, 5.0, 0.1);
        assert_relative_eq!(state.capacity_price, 0.0);
        assert_relative_eq!(state.agreement_price[0], 0.0);
        assert_relative_eq!(state.slack_price, 0.0);
    }

    #[test]
    fn dual_step_prices_agreement_gaps() {
        let mut state = ConsensusNodeState::new(1);
        state.peer_inflow[0] = 0.1;
        dual_step(&mut state, &[0.3], &[0.0], 0.0, 5.0, 0.1);
        assert_relative_eq!(state.agreement_price[0], 0.02);
    }

    #[test]
    fn dual_step_prices_capacity_violations() {
        let mut state = ConsensusNodeState::new(1);
        // Inflow exceeds outflow plus capacity by exactly 1.0 with no slack.
        dual_step(&mut state, &[0.0], &[3.0], 0.0, 2.0, 0.1);
        assert_relative_eq!(state.capacity_price, 0.1);
    }

    #[test]
    fn step_bound_is_one_for_stacked_identities() {
        // A1 = A2 = I over Q = I gives ||[I;I][I;I]^T|| = 2, bound = 1.
        let n = 6;
        let mut rows = Vec::new();
        for v in 0..n {
            rows.push(vec![(v, 1.0)]);
        }
        for v in 0..n {
            rows.push(vec![(v, 1.0)]);
        }
        let q = vec![1.0; n];
        let bound = step_size_bound(&rows, &q).unwrap();
        assert_relative_eq!(bound, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn step_bound_scales_linearly_with_q() {
        let net = two_node_net(1e6);
        let (rows, mut q) = net.constraint_rows();
        let base = step_size_bound(&rows, &q).unwrap();
        q.iter_mut().for_each(|d| *d *= 10.0);
        let scaled = step_size_bound(&rows, &q).unwrap();
        assert_relative_eq!(scaled, 10.0 * base, max_relative = 1e-9);
    }

    #[test]
    fn step_bound_matches_dense_eigensolve() {
        let net = two_node_net(100.0);
        let (rows, q) = net.constraint_rows();
        let bound = step_size_bound(&rows, &q).unwrap();

        let m = rows.len();
        let nv = q.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(m, nv);
        for (r, row) in rows.iter().enumerate() {
            for &(c, coef) in row {
                a[(r, c)] += coef;
            }
        }
        let qinv = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            nv,
            q.iter().map(|d| 1.0 / d),
        ));
        let gram = &a * qinv * a.transpose();
        let top = gram
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max);
        assert_relative_eq!(bound, 2.0 / top, max_relative = 1e-8);
    }

    #[test]
    fn empty_constraint_set_means_unbounded_step() {
        assert_eq!(step_size_bound(&[], &[1.0, 1.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn singular_weights_are_rejected() {
        assert_eq!(step_size_bound(&[vec![(0, 1.0)]], &[0.0]), Err(Error::SingularWeights));
        let node = ConsensusNode { tracking_weight: 0.0, ..plain_node(0, vec![1], vec![0.1], 0.0) };
        let state = ConsensusNodeState::new(1);
        assert_eq!(primal_step(&node, &state), Err(Error::SingularWeights));
    }

    fn two_node_net(green: f64) -> Network {
        let a = plain_node(0, vec![1], vec![0.5], green);
        let b = plain_node(1, vec![0], vec![0.0], green);
        Network::new(vec![a, b]).unwrap()
    }

    #[test]
    fn abundant_green_converges_to_the_desired_rates() {
        let mut net = two_node_net(1e6);
        let alpha = 0.9 * net.step_size_bound().unwrap();
        let out = net.run_dual_ascent(alpha, &AscentOptions::default()).unwrap();
        assert!(out.converged, "residual {}", out.residual);
        let alloc = net.allocations();
        assert!((alloc[0].outflow[0] - 0.5).abs() <= 1e-3);
        assert!((alloc[1].inflow[0] - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn scarce_green_retracts_the_handoff() {
        let mut net = two_node_net(-500.0);
        let alpha = 0.9 * net.step_size_bound().unwrap();
        let out = net
            .run_dual_ascent(alpha, &AscentOptions { max_iters: 2000, ..AscentOptions::default() })
            .unwrap();
        assert!(out.converged);
        let alloc = net.allocations();
        assert!(alloc[0].outflow[0] < 0.1, "outflow {}", alloc[0].outflow[0]);
    }

    #[test]
    fn each_iteration_costs_two_messages_per_directed_edge() {
        let mut net = two_node_net(1e6);
        let edges = net.directed_edges() as u64;
        let out = net.run_dual_ascent(0.5 * net.step_size_bound().unwrap(), &AscentOptions::default()).unwrap();
        assert_eq!(net.setup_messages, edges);
        assert_eq!(net.messages, 2 * edges * u64::from(out.iterations));
    }

    #[test]
    fn complementary_slackness_at_convergence() {
        // Tight capacity forces the constraint active; its price times the
        // residual must vanish.
        let mut a = plain_node(0, vec![1], vec![0.0], 1e6);
        a.compute = 0.05;
        let mut b = plain_node(1, vec![0], vec![0.8], 1e6);
        b.compute = 5.0;
        let mut net = Network::new(vec![a, b]).unwrap();
        let alpha = 0.9 * net.step_size_bound().unwrap();
        let out = net
            .run_dual_ascent(alpha, &AscentOptions { max_iters: 5000, primal_tol: 1e-6, ..AscentOptions::default() })
            .unwrap();
        assert!(out.converged);
        for i in 0..2 {
            let st = &net.states[i];
            let flow_gap: f64 =
                st.inflow.iter().sum::<f64>() - st.outflow.iter().sum::<f64>();
            let residual = net.nodes[i].capacity() + st.slack - flow_gap;
            assert!(
                (st.capacity_price * residual).abs() <= 1e-3,
                "node {i}: price {} residual {residual}",
                st.capacity_price
            );
        }
    }

    #[test]
    fn global_cost_is_zero_on_a_satisfied_plan() {
        let node = plain_node(0, vec![1], vec![0.5], 1e6);
        let peer = plain_node(1, vec![0], vec![0.0], 1e6);
        let alloc = vec![
            NodeAllocation { outflow: vec![0.5], inflow: vec![0.0], slack: 0.0 },
            NodeAllocation { outflow: vec![0.0], inflow: vec![0.5], slack: 0.0 },
        ];
        assert_relative_eq!(global_cost(&[node, peer], &alloc), 0.0);
    }

    #[test]
    fn global_cost_prices_deviation_quadratically() {
        let node = plain_node(0, vec![1], vec![0.5], 1e6);
        let peer = plain_node(1, vec![0], vec![0.0], 1e6);
        let alloc = vec![
            NodeAllocation { outflow: vec![0.0], inflow: vec![0.0], slack: 0.0 },
            NodeAllocation { outflow: vec![0.0], inflow: vec![0.0], slack: 0.0 },
        ];
        assert_relative_eq!(global_cost(&[node, peer], &alloc), 2.5 * 0.25);
    }
}
