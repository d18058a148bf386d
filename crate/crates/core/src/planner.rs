//! Waypoint plans over the landmark graph and their supervision during a rollout.

use serde::{Deserialize, Serialize};

use crate::env::{distance, ObsSpace};
use crate::error::Result;
use crate::graph::{DistanceModel, LandmarkGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Raw points in path order; the last one is the goal.
    pub waypoints: Vec<Vec<f64>>,
    /// Steps allowed on each waypoint before moving on.
    pub budgets: Vec<usize>,
    pub cursor: usize,
    /// Geodesic cost of the path, infinite for a direct plan.
    pub cost: f64,
    steps_on_current: usize,
}

impl Plan {
    /// Pursue `goal` directly for up to `horizon` steps.
    pub fn direct(goal: Vec<f64>, horizon: usize) -> Self {
        Plan { waypoints: vec![goal], budgets: vec![horizon.max(1)], cursor: 0, cost: f64::INFINITY, steps_on_current: 0 }
    }

    pub fn is_direct(&self) -> bool {
        self.waypoints.len() == 1 && self.cost.is_infinite()
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn goal(&self) -> &[f64] {
        self.waypoints.last().expect("plans hold at least the goal")
    }

    pub fn target(&self) -> &[f64] {
        &self.waypoints[self.cursor.min(self.waypoints.len() - 1)]
    }

    pub fn steps_on_current(&self) -> usize {
        self.steps_on_current
    }

    pub fn total_budget(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// Moves past the current waypoint when it has been reached or its
    /// budget is exceeded, then returns the current target. The goal is
    /// never passed.
    pub fn advance(&mut self, position: [f64; 2], threshold: f64, space: &ObsSpace) -> &[f64] {
        let last = self.waypoints.len() - 1;
        while self.cursor < last {
            let reached = distance(position, space.position_of(&self.waypoints[self.cursor])) <= threshold;
            if reached || self.steps_on_current > self.budgets[self.cursor] {
                self.cursor += 1;
                self.steps_on_current = 0;
            } else {
                break;
            }
        }
        self.target()
    }

    /// Counts one environment step against the current waypoint.
    pub fn record_step(&mut self) {
        self.steps_on_current += 1;
    }
}

/// Endpoints of a plan query.
#[derive(Debug, Clone, Copy)]
pub struct PlanQuery<'a> {
    pub start: &'a [f64],
    pub start_latent: &'a [f64],
    pub goal: &'a [f64],
    pub goal_latent: &'a [f64],
    /// Graph vertex that already is the goal, if any.
    pub goal_vertex: Option<usize>,
}

/// Shortest path from a transient start vertex to the goal. Endpoints that
/// end up with no edge are joined through their nearest landmark. Falls back
/// to a direct plan when no path exists. The graph is restored on return.
pub fn make_plan<D: DistanceModel>(
    graph: &mut LandmarkGraph,
    query: PlanQuery<'_>,
    model: &D,
    horizon: usize,
) -> Result<Plan> {
    if graph.permanent_len() == 0 {
        return Ok(Plan::direct(query.goal.to_vec(), horizon));
    }
    let result = plan_on(graph, query, model, horizon);
    graph.remove_transients();
    result
}

fn plan_on<D: DistanceModel>(graph: &mut LandmarkGraph, q: PlanQuery<'_>, model: &D, horizon: usize) -> Result<Plan> {
    let cutoff = graph.cutoff();
    let clamp = |w: f64| if w.is_finite() { w.min(cutoff) } else { cutoff };

    let s = graph.insert_transient(q.start.to_vec(), q.start_latent.to_vec(), model);
    if graph.out_edges(s).is_empty() {
        if let Some(near) = graph.nearest_vertex(q.start_latent) {
            let w = clamp(model.distance(q.start, &graph.vertex(near)?.point));
            graph.connect(s, near, w)?;
        }
    }
    let g = match q.goal_vertex {
        Some(v) => v,
        None => {
            let g = graph.insert_transient(q.goal.to_vec(), q.goal_latent.to_vec(), model);
            let has_in = (0..graph.len()).any(|v| graph.out_edges(v).iter().any(|&(to, _)| to == g));
            if !has_in {
                if let Some(near) = graph.nearest_vertex(q.goal_latent) {
                    let w = clamp(model.distance(&graph.vertex(near)?.point, q.goal));
                    graph.connect(near, g, w)?;
                }
            }
            g
        }
    };

    let Some((path, cost)) = graph.shortest_path(s, g)? else {
        return Ok(Plan::direct(q.goal.to_vec(), horizon));
    };
    let mut waypoints = Vec::with_capacity(path.len() - 1);
    let mut budgets = Vec::with_capacity(path.len() - 1);
    let mut room = horizon + path.len() - 1;
    for pair in path.windows(2) {
        let w = graph.out_edges(pair[0]).iter().filter(|&&(to, _)| to == pair[1]).map(|&(_, w)| w).fold(f64::INFINITY, f64::min);
        let remaining = path.len() - 1 - budgets.len();
        let cap = room.saturating_sub(remaining - 1).max(1);
        let b = (w.ceil() as usize).max(1).min(cap);
        room -= b.min(room);
        budgets.push(b);
        waypoints.push(graph.vertex(pair[1])?.point.clone());
    }
    let last = waypoints.len() - 1;
    waypoints[last] = q.goal.to_vec();
    Ok(Plan { waypoints, budgets, cursor: 0, cost, steps_on_current: 0 })
}
