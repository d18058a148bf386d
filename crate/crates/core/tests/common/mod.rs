//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::path::PathBuf;

use cqm::curriculum::{alpha_from_kl, kl_divergence, sample_frontier_goal, GaussianKde, VisitCounts};
use cqm::env::{MazeMap, ObsMode, ObsSpace, Observation};
use cqm::graph::{temporal_dist, FnDistance, Landmark, LandmarkGraph, LandmarkSource};
use cqm::harness::{metrics, RunConfig, RunSummary, Trainer};
use cqm::mlp::Mlp;
use cqm::quantizer::{sq_dist, Codebook, Quantizer, QuantizerConfig};
use cqm::replay::{ReplayStore, RlBuffer, Transition, VqBuffer};
use cqm::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Result of one check: whether it held and a one-line account.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-9 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

// Temporal distance

pub fn temporal_roundtrip() -> Outcome {
    let gamma = 0.99;
    let worst = (1..=200)
        .map(|n| {
            let q = -(1.0 - f64::powi(gamma, n)) / (1.0 - gamma);
            (temporal_dist(q, gamma) - n as f64).abs()
        })
        .fold(0.0, f64::max);
    Outcome::new(worst <= 1e-9, format!("max |recovered - n| over n=1..200 is {worst:.2e}"))
}

// Shortest paths

/// Random directed graph with `n` vertices on a line and random edge weights.
pub fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> LandmarkGraph {
    let weights: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (i != j && rng.random_bool(0.35)).then(|| f64::from(rng.random_range(1u32..20)) / 4.0))
                .collect()
        })
        .collect();
    let landmarks: Vec<Landmark> = (0..n)
        .map(|i| Landmark { id: i, point: vec![i as f64], latent: vec![i as f64], source: LandmarkSource::Code(i) })
        .collect();
    let model = FnDistance(move |a: &[f64], b: &[f64]| weights[a[0] as usize][b[0] as usize].unwrap_or(f64::INFINITY));
    LandmarkGraph::build(landmarks, &model, 10.0, false, 1, Execution::Sequential)
}

/// Cheapest simple path by enumerating every vertex ordering.
pub fn brute_force(graph: &LandmarkGraph, from: usize, to: usize) -> f64 {
    fn go(g: &LandmarkGraph, at: usize, to: usize, seen: &mut Vec<bool>, cost: f64, best: &mut f64) {
        if at == to {
            *best = best.min(cost);
            return;
        }
        for &(next, w) in g.out_edges(at) {
            if !seen[next] {
                seen[next] = true;
                go(g, next, to, seen, cost + w, best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; graph.len()];
    seen[from] = true;
    let mut best = f64::INFINITY;
    go(graph, from, to, &mut seen, 0.0, &mut best);
    best
}

pub fn dijkstra_vs_brute_force(graphs: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut pairs = 0;
    for _ in 0..graphs {
        let n = rng.random_range(1..=8);
        let g = random_graph(n, &mut rng);
        for s in 0..n {
            let (dist, _) = g.dijkstra(s).unwrap();
            for t in 0..n {
                pairs += 1;
                if dist[t] != brute_force(&g, s, t) {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome::new(mismatches == 0, format!("{graphs} graphs, {pairs} pairs, {mismatches} mismatches"))
}

// Quantizer

pub fn nearest_code_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let codes: Vec<Vec<f64>> = (0..128).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let book = Codebook::from_points(codes.clone()).unwrap();
    let mut wrong = 0;
    for _ in 0..10_000 {
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut best = 0;
        for (i, c) in codes.iter().enumerate() {
            if sq_dist(&z, c) < sq_dist(&z, &codes[best]) {
                best = i;
            }
        }
        if book.nearest(&z).0 != best {
            wrong += 1;
        }
    }
    Outcome::new(wrong == 0, format!("10000 queries against 128 codes, {wrong} disagreements"))
}

/// Distance from the worst-covered cluster mean to its nearest code, in
/// units of sigma, for a codebook of the default size.
pub fn ema_clustering(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.5;
    let means: Vec<[f64; 2]> = (0..8)
        .map(|i| {
            let t = i as f64 * std::f64::consts::TAU / 8.0;
            [10.0 * t.cos(), 10.0 * t.sin()]
        })
        .collect();
    let noise = Normal::new(0.0, sigma).unwrap();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let m = means[rng.random_range(0..means.len())];
        vec![m[0] + noise.sample(rng), m[1] + noise.sample(rng)]
    };
    let init: Vec<Vec<f64>> = (0..128).map(|_| draw(&mut rng)).collect();
    let mut q = Quantizer::identity(Codebook::from_points(init).unwrap(), QuantizerConfig::default());
    for step in 0..2000 {
        let batch: Vec<Vec<f64>> = (0..64).map(|_| draw(&mut rng)).collect();
        q.train_step(&batch, Execution::Sequential).unwrap();
        if step % 10 == 9 {
            q.codebook.tick_rollout();
            q.resample_dead_codes(&batch, 5, &mut rng);
        }
    }
    means
        .iter()
        .map(|m| q.codebook.nearest(m).1.sqrt() / sigma)
        .fold(0.0, f64::max)
}

// Gradients

fn fd_grad(params: &mut [f64], i: usize, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let old = params[i];
    params[i] = old + h;
    let up = loss(params);
    params[i] = old - h;
    let down = loss(params);
    params[i] = old;
    (up - down) / (2.0 * h)
}

/// Worst relative error of `Mlp::backward` against central differences of a
/// squared-error loss, over random nets, inputs and targets.
pub fn mlp_gradient_check(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (i, h, o) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..5));
        let mut net = Mlp::new(i, h, o, &mut rng);
        let x: Vec<f64> = (0..i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (hid, out) = net.forward_cached(&x);
        let g_out: Vec<f64> = out.iter().zip(&y).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&x, &hid, &g_out, &mut grad);
        let template = net.clone();
        let loss = |p: &[f64]| {
            let mut n = template.clone();
            n.params_mut().copy_from_slice(p);
            n.forward(&x).iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        for k in 0..net.num_params() {
            let fd = fd_grad(net.params_mut(), k, &loss);
            worst = worst.max(relative_error(grad[k], fd));
        }
    }
    worst
}

/// Worst relative error of the straight-through quantizer gradients. The
/// oracle differentiates the surrogate loss in which the code offset
/// `z_q - z_e` is frozen at the current parameters, which is the function
/// the straight-through estimator differentiates exactly.
pub fn quantizer_gradient_check(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (d, lat, hid) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(2..6));
        let batch: Vec<Vec<f64>> = (0..rng.random_range(1..5)).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let init: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let config = QuantizerConfig { lambda_commit: rng.random_range(0.0..1.0), ..QuantizerConfig::default() };
        let mut q = Quantizer::mlp(d, hid, lat, &init, config, &mut rng).unwrap();
        let g = q.gradients(&batch, Execution::Sequential).unwrap();
        let codes: Vec<Vec<f64>> = g.assignment.iter().map(|&c| q.codebook.embedding(c).to_vec()).collect();
        let offsets: Vec<Vec<f64>> = g.latents.iter().zip(&codes).map(|(ze, zq)| zq.iter().zip(ze).map(|(a, b)| a - b).collect()).collect();
        let (b, lam) = (batch.len() as f64, config.lambda_commit);
        let surrogate = |enc: &Mlp, dec: &Mlp| -> f64 {
            let mut total = 0.0;
            for ((x, off), zq) in batch.iter().zip(&offsets).zip(&codes) {
                let ze = enc.forward(x);
                let st: Vec<f64> = ze.iter().zip(off).map(|(a, o)| a + o).collect();
                let r = dec.forward(&st);
                total += r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (b * d as f64);
                total += lam * ze.iter().zip(zq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (b * lat as f64);
            }
            total
        };
        let enc = q.encoder.mlp().unwrap().clone();
        let dec = q.decoder.mlp().unwrap().clone();
        for k in 0..enc.num_params() {
            let mut p = enc.params().to_vec();
            let fd = fd_grad(&mut p, k, |p| {
                let mut e = enc.clone();
                e.params_mut().copy_from_slice(p);
                surrogate(&e, &dec)
            });
            worst = worst.max(relative_error(g.encoder[k], fd));
        }
        for k in 0..dec.num_params() {
            let mut p = dec.params().to_vec();
            let fd = fd_grad(&mut p, k, |p| {
                let mut m = dec.clone();
                m.params_mut().copy_from_slice(p);
                surrogate(&enc, &m)
            });
            worst = worst.max(relative_error(g.decoder[k], fd));
        }
        q.train_step(&batch, Execution::Sequential).unwrap();
    }
    worst
}

// Mixture

/// `(beta, kappa, kl, alpha)` evaluated by hand.
pub const ALPHA_TABLE: [(f64, f64, f64, f64); 8] = [
    (-20.0, 1.0, 0.0, 1.0),
    (-20.0, 1.0, 21.0, 1.0),
    (-20.0, 1.0, 21.5, 1.0 / 1.5),
    (-20.0, 1.0, 22.0, 0.5),
    (-20.0, 1.0, 120.0, 0.01),
    (0.0, 2.0, 5.0, 0.1),
    (0.0, 1.0, 0.5, 1.0),
    (5.0, 0.5, 10.0, 0.1),
];

pub fn alpha_checks() -> Outcome {
    let table_ok = ALPHA_TABLE.iter().all(|&(b, k, kl, a)| (alpha_from_kl(b, k, kl) - a).abs() < 1e-12);
    let mut monotone = true;
    let mut in_range = true;
    for &(b, k) in &[(-20.0, 1.0), (0.0, 2.0), (3.0, 0.1)] {
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let a = alpha_from_kl(b, k, i as f64 * 0.1);
            in_range &= a > 0.0 && a <= 1.0;
            monotone &= a <= prev;
            prev = a;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let pts: Vec<Vec<f64>> = (0..500).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let p = GaussianKde::fit(pts, 1e-3).unwrap();
    let self_kl = kl_divergence(&p, &p.clone(), 500, 1e-12, &mut rng, Execution::Sequential);
    Outcome::new(
        table_ok && monotone && in_range && self_kl.abs() <= 0.05,
        format!("table {table_ok}, monotone {monotone}, alpha in (0,1] {in_range}, self KL {self_kl:.2e}"),
    )
}

// Sampling

pub fn state_space() -> ObsSpace {
    let map = MazeMap::parse("S.........G\n", 1.0).unwrap();
    ObsSpace::new(ObsMode::State, &map)
}

/// Landmarks on a line, `counts[i]` visits each, initial landmark 0.
pub struct SelectionFixture {
    pub graph: LandmarkGraph,
    pub counts: VisitCounts,
    pub distances: Vec<f64>,
    pub top_k: usize,
}

pub fn selection_fixture(counts: &[u64], top_k: usize) -> SelectionFixture {
    let space = state_space();
    let landmarks: Vec<Landmark> = (0..counts.len())
        .map(|i| {
            let p = space.encode(&Observation::at([0.5 + i as f64, 0.5]));
            Landmark { id: i, point: p.clone(), latent: p, source: LandmarkSource::Code(i) }
        })
        .collect();
    let model = FnDistance(|a: &[f64], b: &[f64]| (a[0] - b[0]).abs());
    let graph = LandmarkGraph::build(landmarks, &model, 1.5, false, 7, Execution::Sequential);
    let mut visits = VisitCounts::new(counts.len(), 7, 1e-3);
    for (i, &n) in counts.iter().enumerate() {
        let z = graph.vertex(i).unwrap().latent.clone();
        visits.record(&vec![z; n as usize], &graph).unwrap();
    }
    let distances = graph.dijkstra(0).unwrap().0;
    SelectionFixture { graph, counts: visits, distances, top_k }
}

/// Largest gap between the implementation's selection frequencies and a
/// Monte-Carlo evaluation of `argmax_{top-k} eta_i u_i`.
pub fn selection_gap(fx: &SelectionFixture, draws: usize, seed: u64) -> f64 {
    let n = fx.graph.len();
    let space = state_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut got = vec![0usize; n];
    for _ in 0..draws {
        let g = sample_frontier_goal(&fx.graph, &fx.counts, &fx.distances, fx.top_k, 0.0, &space, &mut rng).unwrap();
        got[g.landmark.unwrap().id] += 1;
    }
    // oracle: rank by distance, keep k, then argmax of eta * u over fresh uniforms
    let total: u64 = fx.counts.counts().iter().sum();
    let eta: Vec<f64> = fx
        .counts
        .counts()
        .iter()
        .map(|&c| 1.0 / (if total > 0 { c as f64 / total as f64 } else { 0.0 } + 1e-3))
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| fx.distances[i].is_finite()).collect();
    order.sort_by(|&a, &b| fx.distances[b].total_cmp(&fx.distances[a]).then(a.cmp(&b)));
    order.truncate(fx.top_k);
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let oracle_draws = 200_000;
    let mut expect = vec![0usize; n];
    for _ in 0..oracle_draws {
        let best = order
            .iter()
            .map(|&i| (i, eta[i] * oracle_rng.random::<f64>()))
            .fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
            .0;
        expect[best] += 1;
    }
    (0..n)
        .map(|i| (got[i] as f64 / draws as f64 - expect[i] as f64 / oracle_draws as f64).abs())
        .fold(0.0, f64::max)
}

pub fn her_fraction(ratio: f64) -> f64 {
    let space = state_space();
    let mut store = ReplayStore::new(RlBuffer::new(1000, 150, space.clone(), 0.5), VqBuffer::new(100));
    let goal = space.encode(&Observation::at([10.5, 0.5]));
    for e in 0..4u64 {
        let tr: Vec<Transition> = (0..20)
            .map(|t| Transition {
                obs: Observation::at([0.5 + 0.25 * t as f64, 0.5]),
                action: cqm::env::Action::new(0).unwrap(),
                next_obs: Observation::at([0.75 + 0.25 * t as f64, 0.5]),
                goal: goal.clone(),
                reward: -1.0,
                done: false,
                episode_id: e,
                step_index: t,
                relabeled: false,
            })
            .collect();
        store.store_episode(&tr);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = store.rl.sample_batch(10_000, ratio, &mut rng).unwrap();
    batch.iter().filter(|t| t.relabeled).count() as f64 / batch.len() as f64
}

// End-to-end runs

pub fn load_config(name: &str, seed: u64, ablation: Option<&str>) -> RunConfig {
    let mut cfg = RunConfig::load(&config_path(name)).unwrap();
    cfg.seed = seed;
    if let Some(a) = ablation {
        cfg.enable_ablation(a).unwrap();
    }
    cfg
}

pub struct Run {
    pub summary: RunSummary,
    pub trainer: Trainer,
}

pub fn run(cfg: RunConfig) -> Run {
    let mut trainer = Trainer::new(cfg).unwrap();
    let summary = trainer.run().unwrap();
    Run { summary, trainer }
}

/// Mean of `f` over the three consecutive thirds of the training log.
pub fn thirds(run: &Run, f: impl Fn(&metrics::EpisodeRecord) -> f64) -> [f64; 3] {
    let log = &run.trainer.state.log;
    let n = log.len();
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let part = &log[k * n / 3..(k + 1) * n / 3];
        *o = part.iter().map(&f).sum::<f64>() / part.len().max(1) as f64;
    }
    out
}
