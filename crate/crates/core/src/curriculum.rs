//! Curriculum goal selection over the landmark graph and the schedule that
//! mixes in final goals as achieved goals come to cover them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::ObsSpace;
use crate::error::{CqmError, Result};
use crate::exec::Execution;
use crate::graph::{Landmark, LandmarkGraph};

/// Visits per landmark since the last graph rebuild.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCounts {
    counts: Vec<u64>,
    generation: u64,
    epsilon: f64,
}

impl VisitCounts {
    pub fn new(landmarks: usize, generation: u64, epsilon: f64) -> Self {
        VisitCounts { counts: vec![0; landmarks], generation, epsilon }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Zeroes the counts if the graph has moved to a new generation; returns
    /// whether a reset happened.
    pub fn sync_with(&mut self, graph: &LandmarkGraph) -> bool {
        if graph.generation() == self.generation && graph.permanent_len() == self.counts.len() {
            return false;
        }
        self.counts = vec![0; graph.permanent_len()];
        self.generation = graph.generation();
        true
    }

    /// Adds one visit to the nearest landmark of each latent.
    pub fn record(&mut self, latents: &[Vec<f64>], graph: &LandmarkGraph) -> Result<()> {
        if graph.generation() != self.generation {
            return Err(CqmError::GenerationMismatch { counts: self.generation, graph: graph.generation() });
        }
        for z in latents {
            if let Some(v) = graph.nearest_vertex(z) {
                self.counts[v] += 1;
            }
        }
        Ok(())
    }

    /// Empirical visit distribution; all zeros when nothing was recorded.
    pub fn distribution(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// `1 / (mu + epsilon)` per landmark.
    pub fn uncertainty(&self) -> Vec<f64> {
        self.distribution().into_iter().map(|m| 1.0 / (m + self.epsilon)).collect()
    }
}

/// Default frontier size: `max(5, ceil(0.1 * reachable))`.
pub fn default_top_k(reachable: usize) -> usize {
    5usize.max((0.1 * reachable as f64).ceil() as usize)
}

/// Indices of the `top_k` largest finite distances, farthest first; ties go
/// to the lower index.
pub fn top_k_farthest(distances: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).filter(|&i| distances[i].is_finite()).collect();
    idx.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    idx
}

/// `argmax_i eta_i * u_i` with one uniform draw per candidate, in order.
pub fn weighted_argmax<R: Rng + ?Sized>(candidates: &[usize], eta: &[f64], rng: &mut R) -> usize {
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &c in candidates {
        let u: f64 = rng.random();
        let score = eta[c] * u;
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

/// Uniform point in a disc of the given radius.
pub fn disc_noise<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> [f64; 2] {
    if radius <= 0.0 {
        return [0.0, 0.0];
    }
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    [r * theta.cos(), r * theta.sin()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalKind {
    Frontier,
    Final,
}

impl GoalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GoalKind::Frontier => "frontier",
            GoalKind::Final => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumGoal {
    /// Landmark the goal was drawn from; `None` for final goals.
    pub landmark: Option<Landmark>,
    /// Raw goal vector, noise included.
    pub point: Vec<f64>,
    pub noise: [f64; 2],
    pub kind: GoalKind,
    pub top_k_size: usize,
}

/// Frontier goal: among the `top_k` landmarks farthest from the initial
/// landmark (by `distances`), the one maximizing `eta * u`, plus disc noise.
pub fn sample_frontier_goal<R: Rng + ?Sized>(
    graph: &LandmarkGraph,
    counts: &VisitCounts,
    distances: &[f64],
    top_k: usize,
    noise_radius: f64,
    space: &ObsSpace,
    rng: &mut R,
) -> Result<CurriculumGoal> {
    let candidates = top_k_farthest(distances, top_k.max(1));
    if candidates.is_empty() {
        return Err(CqmError::NoReachableLandmark);
    }
    let eta = counts.uncertainty();
    let pick = weighted_argmax(&candidates, &eta, rng);
    let landmark = graph.vertex(pick)?.clone();
    let noise = disc_noise(noise_radius, rng);
    let pos = space.position_of(&landmark.point);
    let point = space.with_position(&landmark.point, [pos[0] + noise[0], pos[1] + noise[1]]);
    Ok(CurriculumGoal { landmark: Some(landmark), point, noise, kind: GoalKind::Frontier, top_k_size: candidates.len() })
}

/// Final goal with probability `alpha`, otherwise the frontier goal. The
/// uniform draw is always made.
pub fn choose_goal<R: Rng + ?Sized>(alpha: f64, frontier: Option<CurriculumGoal>, final_goal: Vec<f64>, rng: &mut R) -> CurriculumGoal {
    let u: f64 = rng.random();
    match frontier {
        Some(f) if u >= alpha => f,
        other => CurriculumGoal {
            landmark: None,
            point: final_goal,
            noise: [0.0, 0.0],
            kind: GoalKind::Final,
            top_k_size: other.map_or(0, |f| f.top_k_size),
        },
    }
}

/// Product-Gaussian kernel density estimate with per-dimension Scott bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKde {
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl GaussianKde {
    pub fn fit(points: Vec<Vec<f64>>, min_bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        let n = points.len() as f64;
        let d = points[0].len();
        let factor = n.powf(-1.0 / (d as f64 + 4.0));
        let bandwidth: Vec<f64> = (0..d)
            .map(|k| {
                let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
                let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                (var.sqrt() * factor).max(min_bandwidth)
            })
            .collect();
        let log_norm = -n.ln() - bandwidth.iter().map(|h| (h * (std::f64::consts::TAU).sqrt()).ln()).sum::<f64>();
        Ok(GaussianKde { points, bandwidth, log_norm })
    }

    /// Same isotropic bandwidth `h` on every axis.
    pub fn with_bandwidth(points: Vec<Vec<f64>>, h: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        if !(h > 0.0) {
            return Err(CqmError::Config(format!("kde bandwidth must be positive, got {h}")));
        }
        let bandwidth = vec![h; points[0].len()];
        let log_norm = -(points.len() as f64).ln() - bandwidth.iter().map(|h| (h * (std::f64::consts::TAU).sqrt()).ln()).sum::<f64>();
        Ok(GaussianKde { points, bandwidth, log_norm })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let exps: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                let e = -0.5 * p.iter().zip(x).zip(&self.bandwidth).map(|((pi, xi), h)| ((xi - pi) / h).powi(2)).sum::<f64>();
                max = max.max(e);
                e
            })
            .collect();
        max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + self.log_norm
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let p = &self.points[rng.random_range(0..self.points.len())];
        p.iter()
            .zip(&self.bandwidth)
            .map(|(m, h)| m + h * Normal::new(0.0, 1.0).expect("unit normal").sample(rng))
            .collect()
    }
}

/// Monte Carlo estimate of `KL(p || q)` with densities floored at `floor`.
pub fn kl_divergence<R: Rng + ?Sized>(p: &GaussianKde, q: &GaussianKde, n_mc: usize, floor: f64, rng: &mut R, exec: Execution) -> f64 {
    let xs: Vec<Vec<f64>> = (0..n_mc).map(|_| p.sample(rng)).collect();
    let ln_floor = floor.ln();
    let terms = exec.map(&xs, |x| p.log_density(x).max(ln_floor) - q.log_density(x).max(ln_floor));
    terms.iter().sum::<f64>() / n_mc.max(1) as f64
}

/// `1 / max(beta + kappa * kl, 1)`.
pub fn alpha_from_kl(beta: f64, kappa: f64, kl: f64) -> f64 {
    1.0 / (beta + kappa * kl).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub beta: f64,
    pub kappa: f64,
    pub initial_alpha: f64,
    pub min_fit_samples: usize,
    pub n_mc: usize,
    pub density_floor: f64,
    pub min_bandwidth: f64,
    /// Fixed bandwidth; `None` uses Scott's rule.
    pub bandwidth: Option<f64>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            beta: -20.0,
            kappa: 1.0,
            initial_alpha: 0.0,
            min_fit_samples: 10,
            n_mc: 512,
            density_floor: 1e-12,
            min_bandwidth: 0.1,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalMixture {
    pub config: MixtureConfig,
    pub alpha: f64,
    pub last_kl: Option<f64>,
}

impl GoalMixture {
    pub fn new(config: MixtureConfig) -> Self {
        GoalMixture { alpha: config.initial_alpha, config, last_kl: None }
    }

    /// Refits both densities and recomputes alpha. With too few samples in
    /// either set, alpha keeps its previous value.
    pub fn update<R: Rng + ?Sized>(&mut self, achieved: &[Vec<f64>], finals: &[Vec<f64>], rng: &mut R, exec: Execution) -> f64 {
        let c = self.config;
        if achieved.len() < c.min_fit_samples || finals.len() < c.min_fit_samples {
            return self.alpha;
        }
        let fit = |pts: &[Vec<f64>]| match c.bandwidth {
            Some(h) => GaussianKde::with_bandwidth(pts.to_vec(), h),
            None => GaussianKde::fit(pts.to_vec(), c.min_bandwidth),
        };
        let (Ok(p_gf), Ok(p_ag)) = (fit(finals), fit(achieved)) else {
            return self.alpha;
        };
        let kl = kl_divergence(&p_gf, &p_ag, c.n_mc, c.density_floor, rng, exec);
        self.last_kl = Some(kl);
        self.alpha = alpha_from_kl(c.beta, c.kappa, kl);
        self.alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MazeMap, ObsMode};
    use crate::graph::{FnDistance, LandmarkSource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_graph(n: usize) -> LandmarkGraph {
        let lms = (0..n)
            .map(|i| Landmark { id: i, point: vec![i as f64 + 0.5, 0.5, 0.0, 0.0], latent: vec![i as f64 + 0.5, 0.5, 0.0, 0.0], source: LandmarkSource::Code(i) })
            .collect();
        let model = FnDistance(|a: &[f64], b: &[f64]| (a[0] - b[0]).abs());
        LandmarkGraph::build(lms, &model, 1.5, false, 1, Execution::Sequential)
    }

    fn space(n: usize) -> ObsSpace {
        let map = MazeMap::parse(&format!("S{}G", ".".repeat(n.saturating_sub(2))), 1.0).unwrap();
        ObsSpace::new(ObsMode::State, &map)
    }

    #[test]
    fn visits_follow_nearest_landmark() {
        let g = line_graph(4);
        let mut c = VisitCounts::new(4, 1, 1e-3);
        c.record(&[], &g).unwrap();
        assert_eq!(c.counts(), &[0, 0, 0, 0]);
        let obs: Vec<Vec<f64>> = (0..7).map(|_| vec![2.4, 0.5, 0.0, 0.0]).collect();
        c.record(&obs, &g).unwrap();
        assert_eq!(c.counts(), &[0, 0, 7, 0]);
        let mu = c.distribution();
        assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let stale = VisitCounts::new(4, 0, 1e-3);
        assert!(matches!(stale.clone().record(&obs, &g), Err(CqmError::GenerationMismatch { .. })));
    }

    #[test]
    fn counts_reset_only_on_new_generation() {
        let g = line_graph(3);
        let mut c = VisitCounts::new(3, 1, 1e-3);
        c.record(&[vec![0.5, 0.5, 0.0, 0.0]], &g).unwrap();
        assert!(!c.sync_with(&g));
        assert_eq!(c.counts()[0], 1);
        let model = FnDistance(|a: &[f64], b: &[f64]| (a[0] - b[0]).abs());
        let g2 = LandmarkGraph::build(g.vertices().to_vec(), &model, 1.5, false, 2, Execution::Sequential);
        assert!(c.sync_with(&g2));
        assert_eq!(c.counts(), &[0, 0, 0]);
    }

    #[test]
    fn top_k_excludes_unreachable() {
        let d = [0.0, 3.0, f64::INFINITY, 7.0, 3.0];
        assert_eq!(top_k_farthest(&d, 3), vec![3, 1, 4]);
        assert_eq!(top_k_farthest(&[f64::INFINITY], 3), Vec::<usize>::new());
        assert_eq!(default_top_k(10), 5);
        assert_eq!(default_top_k(128), 13);
    }

    #[test]
    fn single_reachable_landmark_is_always_chosen() {
        let g = line_graph(3);
        let c = VisitCounts::new(3, 1, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = [f64::INFINITY, 4.0, f64::INFINITY];
        for _ in 0..50 {
            let goal = sample_frontier_goal(&g, &c, &d, 5, 0.0, &space(3), &mut rng).unwrap();
            assert_eq!(goal.landmark.unwrap().id, 1);
        }
        let none = [f64::INFINITY; 3];
        assert!(matches!(sample_frontier_goal(&g, &c, &none, 5, 0.0, &space(3), &mut rng), Err(CqmError::NoReachableLandmark)));
    }

    #[test]
    fn equal_counts_split_evenly() {
        let eta = [1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let first = (0..n).filter(|_| weighted_argmax(&[0, 1], &eta, &mut rng) == 0).count();
        assert!((first as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn noise_stays_in_disc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let v = disc_noise(2.0, &mut rng);
            assert!(v[0].hypot(v[1]) <= 2.0);
        }
    }

    #[test]
    fn choose_goal_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = line_graph(3);
        let c = VisitCounts::new(3, 1, 1e-3);
        let f = sample_frontier_goal(&g, &c, &[0.0, 1.0, 2.0], 2, 0.0, &space(3), &mut rng).unwrap();
        let count = |alpha: f64, rng: &mut ChaCha8Rng| {
            (0..10_000).filter(|_| choose_goal(alpha, Some(f.clone()), vec![9.0; 4], rng).kind == GoalKind::Final).count()
        };
        assert_eq!(count(1.0, &mut rng), 10_000);
        assert!(count(1e-4, &mut rng) <= 100);
        assert!((count(0.5, &mut rng) as f64 / 1e4 - 0.5).abs() <= 0.02);
        let fin = choose_goal(0.0, None, vec![9.0; 4], &mut rng);
        assert_eq!((fin.kind, fin.point), (GoalKind::Final, vec![9.0; 4]));
    }

    #[test]
    fn alpha_table() {
        assert_eq!(alpha_from_kl(-20.0, 1.0, 0.0), 1.0);
        assert!((alpha_from_kl(-20.0, 1.0, 25.0) - 0.2).abs() < 1e-15);
        assert_eq!(alpha_from_kl(-3.0, 2e-3, 1000.0), 1.0);
        assert!((alpha_from_kl(-3.0, 2e-3, 5000.0) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn kde_is_normalized_in_one_dimension() {
        let kde = GaussianKde::fit(vec![vec![0.0], vec![1.0], vec![3.0]], 0.05).unwrap();
        let (lo, hi, n) = (-10.0, 14.0, 24_000);
        let dx = (hi - lo) / n as f64;
        let mass: f64 = (0..n).map(|i| kde.density(&[lo + (i as f64 + 0.5) * dx]) * dx).sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn self_kl_is_small_and_disjoint_kl_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<Vec<f64>> = (0..500).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        let pa = GaussianKde::fit(a.clone(), 0.01).unwrap();
        let kl = kl_divergence(&pa, &pa.clone(), 512, 1e-12, &mut rng, Execution::Sequential);
        assert!(kl.abs() <= 0.05);
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 20.0, p[1]]).collect();
        let pb = GaussianKde::fit(b, 0.01).unwrap();
        assert!(kl_divergence(&pa, &pb, 512, 1e-12, &mut rng, Execution::Sequential) > 20.0);
    }

    #[test]
    fn mixture_keeps_alpha_with_too_few_samples() {
        let mut m = GoalMixture::new(MixtureConfig { initial_alpha: 0.3, ..MixtureConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.update(&[vec![0.0, 0.0]], &vec![vec![1.0, 1.0]; 20], &mut rng, Execution::Sequential), 0.3);
        let same: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        assert_eq!(m.update(&same, &same, &mut rng, Execution::Sequential), 1.0);
        assert!(m.last_kl.unwrap().abs() < 1e-12);
    }
}
