//! Landmark graph over the quantized goal space.
//!
//! Edges are directed and weighted by the temporal distance recovered from
//! the graph critic; only pairs within `cutoff` steps are connected.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::QFunction;
use crate::env::ObsSpace;
use crate::error::{CqmError, Result};
use crate::exec::Execution;
use crate::quantizer::sq_dist;

/// Steps needed to reach a goal whose discounted value is `q`, under a -1
/// per-step reward. Values at or below `-1/(1-gamma)` map to infinity.
pub fn temporal_dist(q: f64, gamma: f64) -> f64 {
    let floor = -1.0 / (1.0 - gamma);
    if q >= 0.0 {
        return 0.0;
    }
    if q.is_nan() || q <= floor + 1e-3 {
        return f64::INFINITY;
    }
    (1.0 + (1.0 - gamma) * q).ln() / gamma.ln()
}

/// Source of a temporal distance between two raw points.
pub trait DistanceModel: Sync {
    fn distance(&self, from: &[f64], to: &[f64]) -> f64;
}

impl DistanceModel for QFunction {
    fn distance(&self, from: &[f64], to: &[f64]) -> f64 {
        temporal_dist(self.max_value(from, to), self.config.gamma)
    }
}

/// Moves needed to travel from one point to another. The critic counts the
/// penalised moves; one more enters the success ball and one more reaches
/// the point itself. Points already inside the ball are `euclidean / step`
/// apart. Path lengths therefore stay additive along chains of landmarks.
pub struct MoveDistance<'a> {
    pub critic: &'a QFunction,
    pub space: &'a ObsSpace,
    pub threshold: f64,
    pub step: f64,
}

impl DistanceModel for MoveDistance<'_> {
    fn distance(&self, from: &[f64], to: &[f64]) -> f64 {
        let euclid = crate::env::distance(self.space.position_of(from), self.space.position_of(to));
        if euclid <= self.threshold {
            return euclid / self.step;
        }
        self.critic.distance(from, to) + 2.0
    }
}

/// Adapts a closure into a [`DistanceModel`].
pub struct FnDistance<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> DistanceModel for FnDistance<F> {
    fn distance(&self, from: &[f64], to: &[f64]) -> f64 {
        (self.0)(from, to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkSource {
    Code(usize),
    Transient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    /// Point in raw observation space.
    pub point: Vec<f64>,
    /// Latent used to match observations to this landmark.
    pub latent: Vec<f64>,
    pub source: LandmarkSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGraph {
    vertices: Vec<Landmark>,
    out_edges: Vec<Vec<(usize, f64)>>,
    cutoff: f64,
    generation: u64,
    permanent: usize,
    base_degree: Vec<usize>,
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl LandmarkGraph {
    /// Graph with no vertices, at generation 0.
    pub fn empty(cutoff: f64) -> Self {
        LandmarkGraph { vertices: Vec::new(), out_edges: Vec::new(), cutoff, generation: 0, permanent: 0, base_degree: Vec::new() }
    }

    /// Evaluates every ordered pair and keeps edges with weight `<= cutoff`.
    /// With `symmetric`, both directions use the larger of the two distances.
    pub fn build<D: DistanceModel>(
        landmarks: Vec<Landmark>,
        model: &D,
        cutoff: f64,
        symmetric: bool,
        generation: u64,
        exec: Execution,
    ) -> Self {
        let n = landmarks.len();
        let mut vertices = landmarks;
        for (i, v) in vertices.iter_mut().enumerate() {
            v.id = i;
        }
        let rows: Vec<Vec<f64>> = exec.map_range(n, |i| {
            (0..n).map(|j| if i == j { 0.0 } else { model.distance(&vertices[i].point, &vertices[j].point) }).collect()
        });
        let out_edges: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .filter_map(|j| {
                        let w = if symmetric { rows[i][j].max(rows[j][i]) } else { rows[i][j] };
                        (w >= 0.0 && w <= cutoff).then_some((j, w))
                    })
                    .collect()
            })
            .collect();
        let base_degree = out_edges.iter().map(Vec::len).collect();
        LandmarkGraph { vertices, out_edges, cutoff, generation, permanent: n, base_degree }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn vertices(&self) -> &[Landmark] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> Result<&Landmark> {
        self.vertices.get(id).ok_or(CqmError::UnknownVertex(id))
    }

    pub fn out_edges(&self, id: usize) -> &[(usize, f64)] {
        &self.out_edges[id]
    }

    /// Number of vertices that are not transient.
    pub fn permanent_len(&self) -> usize {
        self.permanent
    }

    /// Permanent vertex whose latent is nearest to `latent`; lowest id on ties.
    pub fn nearest_vertex(&self, latent: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for v in &self.vertices[..self.permanent] {
            let d = sq_dist(&v.latent, latent);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((v.id, d));
            }
        }
        best.map(|b| b.0)
    }

    /// Single-source shortest distances and predecessors.
    pub fn dijkstra(&self, from: usize) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        let n = self.len();
        if from >= n {
            return Err(CqmError::UnknownVertex(from));
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: from });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(next, w) in &self.out_edges[node] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    prev[next] = Some(node);
                    heap.push(HeapItem { dist: nd, node: next });
                }
            }
        }
        Ok((dist, prev))
    }

    /// Shortest-path length, infinite when unreachable.
    pub fn geodesic(&self, from: usize, to: usize) -> Result<f64> {
        if to >= self.len() {
            return Err(CqmError::UnknownVertex(to));
        }
        if from == to && from < self.len() {
            return Ok(0.0);
        }
        Ok(self.dijkstra(from)?.0[to])
    }

    /// Vertex sequence from `from` to `to` (both included) and its cost.
    pub fn shortest_path(&self, from: usize, to: usize) -> Result<Option<(Vec<usize>, f64)>> {
        if to >= self.len() {
            return Err(CqmError::UnknownVertex(to));
        }
        let (dist, prev) = self.dijkstra(from)?;
        if !dist[to].is_finite() {
            return Ok(None);
        }
        let mut path = vec![to];
        let mut cur = to;
        while let Some(p) = prev[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(Some((path, dist[to])))
    }

    /// Adds a temporary vertex connected to and from every permanent vertex
    /// within the cutoff. Undo with [`LandmarkGraph::remove_transients`].
    pub fn insert_transient<D: DistanceModel>(&mut self, point: Vec<f64>, latent: Vec<f64>, model: &D) -> usize {
        let id = self.vertices.len();
        let mut out = Vec::new();
        for v in 0..self.permanent {
            let target = &self.vertices[v].point;
            let w_out = model.distance(&point, target);
            if w_out >= 0.0 && w_out <= self.cutoff {
                out.push((v, w_out));
            }
            let w_in = model.distance(target, &point);
            if w_in >= 0.0 && w_in <= self.cutoff {
                self.out_edges[v].push((id, w_in));
            }
        }
        self.vertices.push(Landmark { id, point, latent, source: LandmarkSource::Transient });
        self.out_edges.push(out);
        id
    }

    /// Directed edge touching a transient vertex; dropped by
    /// [`LandmarkGraph::remove_transients`]. Weights above the cutoff are ignored.
    pub fn connect(&mut self, from: usize, to: usize, weight: f64) -> Result<()> {
        if from >= self.len() {
            return Err(CqmError::UnknownVertex(from));
        }
        if to >= self.len() {
            return Err(CqmError::UnknownVertex(to));
        }
        if from < self.permanent && to < self.permanent {
            return Err(CqmError::Config("edges between permanent vertices are fixed at build time".into()));
        }
        if weight >= 0.0 && weight <= self.cutoff {
            self.out_edges[from].push((to, weight));
        }
        Ok(())
    }

    pub fn remove_transients(&mut self) {
        self.vertices.truncate(self.permanent);
        self.out_edges.truncate(self.permanent);
        for (row, &deg) in self.out_edges.iter_mut().zip(&self.base_degree) {
            row.truncate(deg);
        }
    }

    /// Vertex points followed by weighted edges, one per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# vertices {} edges {} generation {} cutoff {}", self.len(), self.edge_count(), self.generation, self.cutoff);
        for v in &self.vertices {
            let pts: Vec<String> = v.point.iter().map(|x| format!("{x}")).collect();
            let src = match v.source {
                LandmarkSource::Code(c) => format!("code{c}"),
                LandmarkSource::Transient => "transient".into(),
            };
            let _ = writeln!(s, "v {} {} {}", v.id, src, pts.join(" "));
        }
        for (i, row) in self.out_edges.iter().enumerate() {
            for &(j, w) in row {
                let _ = writeln!(s, "e {i} {j} {w}");
            }
        }
        s
    }
}

/// Farthest-point selection of `k` candidates: each round takes the
/// candidate with the largest running minimum distance from the selected
/// set (initially infinite), breaking ties towards the lowest index.
/// Returns indices in selection order.
pub fn sparsify<F: Fn(usize, usize) -> f64>(n: usize, k: usize, dist: F) -> Result<Vec<usize>> {
    if k > n {
        return Err(CqmError::TooFewCandidates { requested: k, available: n });
    }
    let mut min_dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let pick = best.expect("k <= n leaves a candidate");
        taken[pick] = true;
        order.push(pick);
        for i in 0..n {
            if !taken[i] {
                min_dist[i] = min_dist[i].min(dist(pick, i));
            }
        }
    }
    Ok(order)
}

/// [`sparsify`] over landmarks, using `model` for distances.
pub fn sparsify_landmarks<D: DistanceModel>(candidates: Vec<Landmark>, k: usize, model: &D) -> Result<Vec<Landmark>> {
    let order = sparsify(candidates.len(), k, |a, b| model.distance(&candidates[a].point, &candidates[b].point))?;
    let mut slots: Vec<Option<Landmark>> = candidates.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().expect("each index selected once")).collect())
}
