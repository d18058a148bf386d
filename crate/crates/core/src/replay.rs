//! Episode-contiguous transition storage with hindsight relabeling, plus the
//! smaller recent-observation buffer used to train the quantizer.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{goal_reward, Action, ObsSpace, Observation};
use crate::error::{CqmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub next_obs: Observation,
    /// Raw goal vector in observation space.
    pub goal: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub episode_id: u64,
    pub step_index: usize,
    /// True when the goal was replaced by a hindsight goal.
    pub relabeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredEpisode {
    id: u64,
    first_step: usize,
    observations: Vec<Observation>,
    actions: Vec<Action>,
    goal: Vec<f64>,
}

impl StoredEpisode {
    fn len(&self) -> usize {
        self.actions.len()
    }
}

/// Ring of whole episodes holding at most `capacity` transitions.
///
/// When room is needed the oldest episodes are dropped whole. A single
/// episode longer than the capacity keeps only its last `capacity` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlBuffer {
    capacity: usize,
    future_window: usize,
    space: ObsSpace,
    threshold: f64,
    episodes: VecDeque<StoredEpisode>,
    /// Cumulative transition counts; `ends[i]` is one past episode `i`.
    ends: Vec<usize>,
}

impl RlBuffer {
    pub fn new(capacity: usize, future_window: usize, space: ObsSpace, threshold: f64) -> Self {
        RlBuffer {
            capacity: capacity.max(1),
            future_window: future_window.max(1),
            space,
            threshold,
            episodes: VecDeque::new(),
            ends: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    fn push_episode(&mut self, mut ep: StoredEpisode) {
        if ep.len() == 0 {
            return;
        }
        if ep.len() > self.capacity {
            let cut = ep.len() - self.capacity;
            ep.actions.drain(..cut);
            ep.observations.drain(..cut);
            ep.first_step += cut;
        }
        let mut total = self.len() + ep.len();
        while total > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            total -= old.len();
        }
        self.episodes.push_back(ep);
        self.ends.clear();
        let mut acc = 0;
        for e in &self.episodes {
            acc += e.len();
            self.ends.push(acc);
        }
    }

    /// Episode index and in-episode offset of a global transition index.
    fn locate(&self, index: usize) -> (usize, usize) {
        let e = self.ends.partition_point(|&end| end <= index);
        let start = if e == 0 { 0 } else { self.ends[e - 1] };
        (e, index - start)
    }

    /// Offsets `j` (within the same stored episode) that a hindsight goal
    /// for transition `index` may be drawn from: `obs[j + 1]` is the goal.
    pub fn future_offsets(&self, index: usize) -> (u64, std::ops::Range<usize>) {
        let (e, t) = self.locate(index);
        let ep = &self.episodes[e];
        (ep.id, t..(t + self.future_window).min(ep.len()))
    }

    pub fn transition(&self, index: usize) -> Transition {
        let (e, t) = self.locate(index);
        let ep = &self.episodes[e];
        self.make(ep, t, ep.goal.clone(), false)
    }

    fn make(&self, ep: &StoredEpisode, t: usize, goal: Vec<f64>, relabeled: bool) -> Transition {
        let next_obs = ep.observations[t + 1];
        let reward = goal_reward(next_obs.position, self.space.position_of(&goal), self.threshold);
        Transition {
            obs: ep.observations[t],
            action: ep.actions[t],
            next_obs,
            goal,
            reward,
            done: reward == 0.0,
            episode_id: ep.id,
            step_index: ep.first_step + t,
            relabeled,
        }
    }

    /// Uniform transitions, each relabeled with probability `her_ratio` to the
    /// achieved goal of a uniform future step of its own episode.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, her_ratio: f64, rng: &mut R) -> Result<Vec<Transition>> {
        if self.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        let total = self.len();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let index = rng.random_range(0..total);
            let (e, t) = self.locate(index);
            let ep = &self.episodes[e];
            let u: f64 = rng.random();
            if u < her_ratio {
                let hi = (t + self.future_window).min(ep.len());
                let j = rng.random_range(t..hi);
                let goal = self.space.encode(&ep.observations[j + 1]);
                out.push(self.make(ep, t, goal, true));
            } else {
                out.push(self.make(ep, t, ep.goal.clone(), false));
            }
        }
        Ok(out)
    }
}

/// Ring of recent observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqBuffer {
    capacity: usize,
    data: VecDeque<Observation>,
}

impl VqBuffer {
    pub fn new(capacity: usize) -> Self {
        VqBuffer { capacity: capacity.max(1), data: VecDeque::new() }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(obs);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.data.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Observation> {
        self.data.get(i)
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
        if self.data.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        Ok((0..n).map(|_| self.data[rng.random_range(0..self.data.len())]).collect())
    }
}

/// Both buffers, written together once per rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStore {
    pub rl: RlBuffer,
    pub vq: VqBuffer,
}

impl ReplayStore {
    pub fn new(rl: RlBuffer, vq: VqBuffer) -> Self {
        ReplayStore { rl, vq }
    }

    /// Appends one episode, given as its ordered transitions.
    pub fn store_episode(&mut self, traj: &[Transition]) {
        let Some(first) = traj.first() else { return };
        debug_assert!(traj.iter().all(|t| t.episode_id == first.episode_id));
        debug_assert!(traj.windows(2).all(|w| w[1].step_index == w[0].step_index + 1 && w[1].obs == w[0].next_obs));
        let mut observations = Vec::with_capacity(traj.len() + 1);
        observations.extend(traj.iter().map(|t| t.obs));
        observations.push(traj[traj.len() - 1].next_obs);
        for o in &observations {
            self.vq.push(*o);
        }
        self.rl.push_episode(StoredEpisode {
            id: first.episode_id,
            first_step: first.step_index,
            observations,
            actions: traj.iter().map(|t| t.action).collect(),
            goal: first.goal.clone(),
        });
    }
}
