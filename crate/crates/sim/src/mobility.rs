//! Synthetic vehicular mobility: a hexagonal lattice of eNB sites, a
//! random-waypoint fleet roaming over it, nearest-site association, and the
//! directional handover predictor.

use mecsched_core::model::{JobId, NodeId};
use rand::Rng;

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Site geometry: centers, adjacency, and the roaming box.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub centers: Vec<(f64, f64)>,
    /// Sorted adjacency lists; symmetric by construction.
    pub neighbors: Vec<Vec<NodeId>>,
    pub pitch: f64,
    /// Roaming bounds as (x_min, y_min, x_max, y_max): the hull of the
    /// centers grown by the configured margin.
    pub bounds: (f64, f64, f64, f64),
}

impl Lattice {
    /// Builds `rows x cols` sites with odd rows shifted by half a pitch,
    /// so adjacent sites sit exactly `pitch` apart in all six directions.
    pub fn hex(rows: usize, cols: usize, pitch: f64, margin: f64) -> Lattice {
        assert!(rows >= 1 && cols >= 1 && pitch > 0.0 && margin >= 0.0);
        let dy = pitch * 3f64.sqrt() / 2.0;
        let mut centers = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let shift = if r % 2 == 1 { pitch / 2.0 } else { 0.0 };
            for c in 0..cols {
                centers.push((c as f64 * pitch + shift, r as f64 * dy));
            }
        }
        let adjacency = pitch * 1.05;
        let neighbors = (0..centers.len())
            .map(|i| {
                (0..centers.len())
                    .filter(|&j| j != i && dist2(centers[i], centers[j]) <= adjacency * adjacency)
                    .map(NodeId)
                    .collect()
            })
            .collect();
        let xs = centers.iter().map(|c| c.0);
        let ys = centers.iter().map(|c| c.1);
        let bounds = (
            xs.clone().fold(f64::INFINITY, f64::min) - margin,
            ys.clone().fold(f64::INFINITY, f64::min) - margin,
            xs.fold(f64::NEG_INFINITY, f64::max) + margin,
            ys.fold(f64::NEG_INFINITY, f64::max) + margin,
        );
        Lattice { centers, neighbors, pitch, bounds }
    }

    /// Nearest site; ties break toward the lower id.
    pub fn nearest(&self, pos: (f64, f64)) -> NodeId {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &c) in self.centers.iter().enumerate() {
            let d = dist2(pos, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        NodeId(best)
    }

    /// Distance from `pos` to the boundary of `cell`'s coverage region
    /// (positive inside, negative outside). Exact for nearest-site regions:
    /// half the gap between the distances to the second-closest and the
    /// owning center.
    pub fn border_distance(&self, pos: (f64, f64), cell: NodeId) -> f64 {
        let own = dist2(pos, self.centers[cell.0]).sqrt();
        let mut other = f64::INFINITY;
        for (i, &c) in self.centers.iter().enumerate() {
            if i != cell.0 {
                other = other.min(dist2(pos, c).sqrt());
            }
        }
        (other - own) / 2.0
    }

    pub fn random_point(&self, rng: &mut impl Rng) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.bounds;
        (rng.gen_range(x0..=x1), rng.gen_range(y0..=y1))
    }

    /// Draws a travel target: with probability `hotspot` it lands in the
    /// downtown district (a disk of one pitch radius around the area
    /// midpoint), otherwise anywhere in bounds. Urban trips concentrate on
    /// the center, so the middle sites carry more than their share.
    pub fn random_waypoint(&self, hotspot: f64, rng: &mut impl Rng) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.bounds;
        if hotspot > 0.0 && rng.gen::<f64>() < hotspot {
            let center = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let radius = self.pitch * rng.gen::<f64>().sqrt();
            let angle = rng.gen::<f64>() * core::f64::consts::TAU;
            (
                (center.0 + radius * angle.cos()).clamp(x0, x1),
                (center.1 + radius * angle.sin()).clamp(y0, y1),
            )
        } else {
            (rng.gen_range(x0..=x1), rng.gen_range(y0..=y1))
        }
    }
}

/// One roaming user. At most one outstanding job at a time.
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    pub serving: NodeId,
    /// Current random-waypoint target.
    pub waypoint: (f64, f64),
    pub job: Option<JobId>,
}

/// A serving-cell change observed during one mobility step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handover {
    pub vehicle: u64,
    pub from: NodeId,
    pub to: NodeId,
}

/// Uniformly scattered fleet with fresh waypoints and speeds.
pub fn spawn_fleet(
    count: usize,
    lattice: &Lattice,
    speed_min: f64,
    speed_max: f64,
    hotspot: f64,
    rng: &mut impl Rng,
) -> Vec<Vehicle> {
    (0..count as u64)
        .map(|id| {
            let position = lattice.random_point(rng);
            let waypoint = lattice.random_waypoint(hotspot, rng);
            let speed = rng.gen_range(speed_min..=speed_max);
            let velocity = aim(position, waypoint, speed);
            Vehicle { id, position, velocity, serving: lattice.nearest(position), waypoint, job: None }
        })
        .collect()
}

fn aim(from: (f64, f64), to: (f64, f64), speed: f64) -> (f64, f64) {
    let d = dist2(from, to).sqrt();
    if d < 1e-12 {
        (0.0, 0.0)
    } else {
        ((to.0 - from.0) / d * speed, (to.1 - from.1) / d * speed)
    }
}

/// Advances every vehicle by one slot of random-waypoint motion and
/// re-associates it with the nearest site. Waypoint arrivals within the slot
/// snap to the waypoint and draw a fresh leg; the residual slot time is not
/// carried over.
pub fn mobility_step(
    vehicles: &mut [Vehicle],
    lattice: &Lattice,
    tau: f64,
    speed_min: f64,
    speed_max: f64,
    hotspot: f64,
    rng: &mut impl Rng,
) -> Vec<Handover> {
    let mut events = Vec::new();
    for v in vehicles.iter_mut() {
        let speed = (v.velocity.0 * v.velocity.0 + v.velocity.1 * v.velocity.1).sqrt();
        let step = speed * tau;
        let remaining = dist2(v.position, v.waypoint).sqrt();
        if speed > 0.0 && step >= remaining {
            v.position = v.waypoint;
            v.waypoint = lattice.random_waypoint(hotspot, rng);
            let speed = rng.gen_range(speed_min..=speed_max);
            v.velocity = aim(v.position, v.waypoint, speed);
        } else {
            v.position.0 += v.velocity.0 * tau;
            v.position.1 += v.velocity.1 * tau;
        }
        let cell = lattice.nearest(v.position);
        if cell != v.serving {
            events.push(Handover { vehicle: v.id, from: v.serving, to: cell });
            v.serving = cell;
        }
    }
    events
}

/// Probability that the vehicle's next handover lands on each neighbor of
/// its serving cell, aligned with the lattice's sorted adjacency list.
///
/// Directional softmax: mass proportional to exp(kappa * cos(angle between
/// the velocity and the direction to the neighbor's center)). Zero velocity
/// (or kappa = 0) yields the uniform vector.
pub fn handover_probs(vehicle: &Vehicle, lattice: &Lattice, kappa: f64) -> Vec<f64> {
    let nbs = &lattice.neighbors[vehicle.serving.0];
    if nbs.is_empty() {
        return Vec::new();
    }
    let uniform = 1.0 / nbs.len() as f64;
    let speed = (vehicle.velocity.0 * vehicle.velocity.0 + vehicle.velocity.1 * vehicle.velocity.1).sqrt();
    if speed < 1e-12 || kappa == 0.0 {
        return vec![uniform; nbs.len()];
    }
    let scores: Vec<f64> = nbs
        .iter()
        .map(|nb| {
            let c = lattice.centers[nb.0];
            let dir = (c.0 - vehicle.position.0, c.1 - vehicle.position.1);
            let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
            if len < 1e-12 {
                kappa
            } else {
                kappa * (vehicle.velocity.0 * dir.0 + vehicle.velocity.1 * dir.1) / (speed * len)
            }
        })
        .collect();
    // Shift by the max before exponentiating so large kappa stays finite.
    let top = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}
