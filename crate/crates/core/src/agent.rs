//! Goal-conditioned discrete-action Q-learning.
//!
//! Two critics are trained from the same replay buffer: the policy critic
//! drives action selection and the graph critic only supplies temporal
//! distances between landmarks. Both regress towards
//! `r + gamma * (1 - done) * max_a' Q_target(s', a', g)`, clipped to
//! `[-1/(1-gamma), 0]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ObsSpace, NUM_ACTIONS};
use crate::error::{CqmError, Result};
use crate::exec::Execution;
use crate::mlp::Mlp;
use crate::replay::{RlBuffer, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    /// Initial value of every table entry; the default treats unseen goals as unreachable.
    pub q_init: f64,
    pub target_interp: f64,
    pub target_update_interval: u64,
    /// Break ties between equal maxima toward the goal direction before the lowest index.
    pub directed_ties: bool,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig { gamma: 0.99, learning_rate: 0.5, q_init: -100.0, target_interp: 0.995, target_update_interval: 10, directed_ties: false }
    }
}

impl QConfig {
    pub fn q_min(&self) -> f64 {
        -1.0 / (1.0 - self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CqmError::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) || self.target_update_interval == 0 || !(0.0..=1.0).contains(&self.target_interp) {
            return Err(CqmError::Config("invalid Q learning rate, target interpolation or interval".into()));
        }
        if !(self.q_init >= self.q_min() - 1e-9 && self.q_init <= 0.0) {
            return Err(CqmError::Config(format!("q_init must lie in [{}, 0]", self.q_min())));
        }
        Ok(())
    }
}

/// Q table over lattice positions of the agent and the goal.
///
/// The target table is updated lazily: every entry remembers the number of
/// soft updates it has absorbed and catches up in closed form before it is
/// read or before its online value changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    nx: usize,
    ny: usize,
    resolution: f64,
    online: Vec<f32>,
    target: Vec<f32>,
    synced: Vec<u32>,
}

impl TabularQ {
    pub fn new(extent: [f64; 2], resolution: f64, q_init: f64) -> Self {
        let nx = (extent[0] / resolution).round() as usize + 1;
        let ny = (extent[1] / resolution).round() as usize + 1;
        let n = nx * ny * nx * ny * NUM_ACTIONS;
        TabularQ {
            nx,
            ny,
            resolution,
            online: vec![q_init as f32; n],
            target: vec![q_init as f32; n],
            synced: vec![0; n],
        }
    }

    fn cell(&self, pos: [f64; 2]) -> usize {
        let ix = ((pos[0] / self.resolution).round().max(0.0) as usize).min(self.nx - 1);
        let iy = ((pos[1] / self.resolution).round().max(0.0) as usize).min(self.ny - 1);
        iy * self.nx + ix
    }

    fn base(&self, pos: [f64; 2], goal: [f64; 2]) -> usize {
        (self.cell(pos) * self.nx * self.ny + self.cell(goal)) * NUM_ACTIONS
    }

    fn sync(&mut self, i: usize, rounds: u32, tau: f64) {
        let n = rounds - self.synced[i];
        if n > 0 {
            let w = tau.powi(n as i32);
            self.target[i] = (w * self.target[i] as f64 + (1.0 - w) * self.online[i] as f64) as f32;
            self.synced[i] = rounds;
        }
    }

    fn target_value(&self, i: usize, rounds: u32, tau: f64) -> f64 {
        let n = rounds - self.synced[i];
        let w = tau.powi(n as i32);
        w * self.target[i] as f64 + (1.0 - w) * self.online[i] as f64
    }

    pub fn entries(&self) -> usize {
        self.online.len()
    }
}

/// Perceptron over `obs ++ goal` with one output per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptronQ {
    online: Mlp,
    target: Mlp,
}

impl PerceptronQ {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let online = Mlp::new(2 * obs_dim, hidden, NUM_ACTIONS, rng);
        PerceptronQ { target: online.clone(), online }
    }

    fn input(obs: &[f64], goal: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(obs.len() + goal.len());
        x.extend_from_slice(obs);
        x.extend_from_slice(goal);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QModel {
    Tabular(TabularQ),
    Perceptron(PerceptronQ),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub config: QConfig,
    pub model: QModel,
    space: ObsSpace,
    updates: u64,
    soft_rounds: u32,
}

impl QFunction {
    pub fn tabular(config: QConfig, space: ObsSpace, extent: [f64; 2], resolution: f64) -> Result<Self> {
        config.validate()?;
        let model = QModel::Tabular(TabularQ::new(extent, resolution, config.q_init));
        Ok(QFunction { config, model, space, updates: 0, soft_rounds: 0 })
    }

    pub fn perceptron<R: Rng + ?Sized>(config: QConfig, space: ObsSpace, hidden: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let model = QModel::Perceptron(PerceptronQ::new(space.dim(), hidden, rng));
        Ok(QFunction { config, model, space, updates: 0, soft_rounds: 0 })
    }

    pub fn space(&self) -> &ObsSpace {
        &self.space
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn clip(&self, v: f64) -> f64 {
        v.clamp(self.config.q_min(), 0.0)
    }

    /// Online action values for a raw observation and a raw goal.
    pub fn values(&self, obs: &[f64], goal: &[f64]) -> [f64; NUM_ACTIONS] {
        let mut out = [0.0; NUM_ACTIONS];
        match &self.model {
            QModel::Tabular(t) => {
                let b = t.base(self.space.position_of(obs), self.space.position_of(goal));
                for (a, o) in out.iter_mut().enumerate() {
                    *o = t.online[b + a] as f64;
                }
            }
            QModel::Perceptron(p) => {
                let y = p.online.forward(&PerceptronQ::input(obs, goal));
                for (o, v) in out.iter_mut().zip(y) {
                    *o = self.clip(v);
                }
            }
        }
        out
    }

    /// `max_a Q(obs, a, goal)`: the value of the greedy action.
    pub fn max_value(&self, obs: &[f64], goal: &[f64]) -> f64 {
        self.values(obs, goal).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, obs: &[f64], goal: &[f64]) -> Action {
        let v = self.values(obs, goal);
        let mut best = 0;
        for a in 1..NUM_ACTIONS {
            if v[a] > v[best] {
                best = a;
            }
        }
        if self.config.directed_ties {
            let (p, g) = (self.space.position_of(obs), self.space.position_of(goal));
            let to = [g[0] - p[0], g[1] - p[1]];
            let norm = to[0].hypot(to[1]);
            if norm > 0.0 {
                let cos = |a: usize| {
                    let d = Action::new(a).expect("index below NUM_ACTIONS").direction();
                    (d[0] * to[0] + d[1] * to[1]) / (norm * d[0].hypot(d[1]))
                };
                for a in best + 1..NUM_ACTIONS {
                    if v[a] == v[best] && cos(a) > cos(best) + 1e-12 {
                        best = a;
                    }
                }
            }
        }
        Action::new(best).expect("index below NUM_ACTIONS")
    }

    /// Sets the online value of one entry; test and diagnostic helper.
    pub fn set_value(&mut self, obs: &[f64], goal: &[f64], action: Action, value: f64) {
        let value = self.clip(value);
        if let QModel::Tabular(t) = &mut self.model {
            let i = t.base(self.space.position_of(obs), self.space.position_of(goal)) + action.index();
            t.sync(i, self.soft_rounds, self.config.target_interp);
            t.online[i] = value as f32;
        }
    }

    fn bootstrap(&self, tr: &Transition, next_raw: &[f64]) -> f64 {
        if tr.done {
            return self.clip(tr.reward);
        }
        let g = self.config.gamma;
        let next_max = match &self.model {
            QModel::Tabular(t) => {
                let b = t.base(tr.next_obs.position, self.space.position_of(&tr.goal));
                (0..NUM_ACTIONS)
                    .map(|a| t.target_value(b + a, self.soft_rounds, self.config.target_interp))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
            QModel::Perceptron(p) => p
                .target
                .forward(&PerceptronQ::input(next_raw, &tr.goal))
                .into_iter()
                .map(|v| self.clip(v))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        self.clip(tr.reward + g * next_max)
    }

    /// One Q-learning step on `batch`; returns the mean absolute TD error.
    pub fn train(&mut self, batch: &[Transition], exec: Execution) -> Result<f64> {
        if batch.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        let lr = self.config.learning_rate;
        let tau = self.config.target_interp;
        let mut abs_td = 0.0;
        match &self.model {
            QModel::Tabular(_) => {
                let targets: Vec<f64> = batch.iter().map(|tr| self.bootstrap(tr, &[])).collect();
                let rounds = self.soft_rounds;
                let goals: Vec<[f64; 2]> = batch.iter().map(|tr| self.space.position_of(&tr.goal)).collect();
                let QModel::Tabular(t) = &mut self.model else { unreachable!() };
                for ((tr, y), g) in batch.iter().zip(targets).zip(goals) {
                    let i = t.base(tr.obs.position, g) + tr.action.index();
                    t.sync(i, rounds, tau);
                    let q = t.online[i] as f64;
                    let delta = y - q;
                    abs_td += delta.abs();
                    t.online[i] = (q + lr * delta) as f32;
                }
            }
            QModel::Perceptron(p) => {
                let space = &self.space;
                let n = batch.len() as f64;
                let grads: Vec<(Vec<f64>, f64)> = exec.map(batch, |tr| {
                    let obs = space.encode(&tr.obs);
                    let next = space.encode(&tr.next_obs);
                    let y = self.bootstrap(tr, &next);
                    let x = PerceptronQ::input(&obs, &tr.goal);
                    let (h, out) = p.online.forward_cached(&x);
                    let delta = out[tr.action.index()] - y;
                    let mut g_out = [0.0; NUM_ACTIONS];
                    g_out[tr.action.index()] = delta / n;
                    let mut grad = vec![0.0; p.online.num_params()];
                    p.online.backward(&x, &h, &g_out, &mut grad);
                    (grad, delta.abs())
                });
                let mut total = vec![0.0; p.online.num_params()];
                for (g, d) in &grads {
                    abs_td += d;
                    for (t, v) in total.iter_mut().zip(g) {
                        *t += v;
                    }
                }
                if total.iter().any(|v| !v.is_finite()) {
                    return Err(CqmError::NonFinite { stage: "critic training", detail: "gradient".into() });
                }
                let QModel::Perceptron(p) = &mut self.model else { unreachable!() };
                p.online.sgd_step(&total, lr);
            }
        }
        let mean = abs_td / batch.len() as f64;
        if !mean.is_finite() {
            return Err(CqmError::NonFinite { stage: "critic training", detail: format!("mean |td| = {mean}") });
        }
        self.updates += 1;
        if self.updates % self.config.target_update_interval == 0 {
            self.soft_rounds += 1;
            if let QModel::Perceptron(p) = &mut self.model {
                p.target.interpolate_from(&p.online, tau);
            }
        }
        Ok(mean)
    }
}

/// epsilon-greedy action; the exploration draw is made on every call.
pub fn act<R: Rng + ?Sized>(q: &QFunction, obs: &[f64], goal: &[f64], epsilon: f64, rng: &mut R) -> Action {
    let u: f64 = rng.random();
    if u < epsilon {
        Action::new(rng.random_range(0..NUM_ACTIONS)).expect("index below NUM_ACTIONS")
    } else {
        q.greedy(obs, goal)
    }
}

/// Linear decay from `start` to `end` over the first `fraction` of `total` episodes.
pub fn epsilon_schedule(episode: usize, total: usize, start: f64, end: f64, fraction: f64) -> f64 {
    let span = (total as f64 * fraction).max(1.0);
    let t = (episode as f64 / span).min(1.0);
    start + (end - start) * t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCritics {
    pub policy: QFunction,
    pub graph: QFunction,
    pub policy_her: f64,
    pub graph_her: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub policy_td: f64,
    pub graph_td: f64,
}

impl DualCritics {
    pub fn new(policy: QFunction, graph: QFunction) -> Self {
        DualCritics { policy, graph, policy_her: 0.8, graph_her: 1.0 }
    }

    /// One update of each critic from its own relabeled batch.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &RlBuffer,
        batch_size: usize,
        rng: &mut R,
        exec: Execution,
    ) -> Result<CriticReport> {
        let b = buffer.sample_batch(batch_size, self.policy_her, rng)?;
        let policy_td = self.policy.train(&b, exec)?;
        let b = buffer.sample_batch(batch_size, self.graph_her, rng)?;
        let graph_td = self.graph.train(&b, exec)?;
        Ok(CriticReport { policy_td, graph_td })
    }
}
