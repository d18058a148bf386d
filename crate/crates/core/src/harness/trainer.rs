//! The training loop: warmup, per-episode goal selection, waypoint-guided
//! rollouts, periodic graph and mixture updates, and learning steps.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{act, epsilon_schedule, DualCritics, QConfig, QFunction};
use crate::curriculum::{
    choose_goal, default_top_k, sample_frontier_goal, CurriculumGoal, GoalMixture, MixtureConfig, VisitCounts,
};
use crate::env::{distance, EpisodeConfig, Maze, MazeMap, ObsMode, ObsSpace, Observation};
use crate::error::{CqmError, Result};
use crate::exec::Execution;
use crate::graph::{sparsify_landmarks, DistanceModel, LandmarkGraph, MoveDistance};
use crate::planner::{make_plan, Plan, PlanQuery};
use crate::quantizer::{Codebook, Quantizer, QuantizerConfig};
use crate::replay::{ReplayStore, RlBuffer, Transition, VqBuffer};

use super::config::RunConfig;
use super::metrics::{EpisodeRecord, MetricsRow, RunSummary};

/// Everything except the replay buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: RunConfig,
    pub maze: Maze,
    pub space: ObsSpace,
    pub rng: ChaCha8Rng,
    pub quantizer: Option<Quantizer>,
    pub critics: DualCritics,
    pub graph: LandmarkGraph,
    pub counts: VisitCounts,
    pub mixture: GoalMixture,
    pub init_landmark: Option<usize>,
    /// Completed training episodes.
    pub episode: usize,
    pub next_episode_id: u64,
    pub warmed_up: bool,
    /// Raw observations of rollouts since the last graph cycle.
    pub recent: Vec<Vec<f64>>,
    pub metrics: Vec<MetricsRow>,
    pub log: Vec<EpisodeRecord>,
}

impl TrainerState {
    /// Edge-weight model over the graph critic.
    pub fn moves(&self) -> MoveDistance<'_> {
        MoveDistance { critic: &self.critics.graph, space: &self.space, threshold: self.config.success_threshold, step: self.config.move_step }
    }
}

pub struct Trainer {
    pub state: TrainerState,
    pub replay: ReplayStore,
    exec: Execution,
}

/// Outcome of one rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub reached: bool,
    pub final_position: [f64; 2],
    pub plan: Plan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success: bool,
    pub final_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
}

impl EvalSummary {
    pub fn from_results(results: &[EvalResult]) -> Self {
        let n = results.len().max(1) as f64;
        EvalSummary {
            episodes: results.len(),
            success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
            mean_final_distance: results.iter().map(|r| r.final_distance).sum::<f64>() / n,
        }
    }
}

/// Independent generator for evaluation episode `index` after training episode `episode`.
pub fn eval_rng(seed: u64, episode: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0E7A_15EE_D5ED);
    rng.set_stream((episode << 20) | (index & 0xF_FFFF));
    rng
}

pub fn new_replay(config: &RunConfig, space: &ObsSpace) -> ReplayStore {
    ReplayStore::new(
        RlBuffer::new(config.rl_capacity, config.her_window(), space.clone(), config.success_threshold),
        VqBuffer::new(config.vq_capacity),
    )
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let map = MazeMap::parse(&config.maze_text()?, config.cell_size)?;
        let maze = Maze::new(
            map,
            EpisodeConfig { horizon: config.horizon, success_threshold: config.success_threshold, move_step: config.move_step },
        )?;
        let space = ObsSpace::new(config.obs_mode()?, &maze.map);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let qc = QConfig {
            gamma: config.gamma,
            learning_rate: config.q_learning_rate,
            q_init: config.q_init,
            target_interp: config.target_interp,
            target_update_interval: config.target_update_interval,
            directed_ties: config.directed_ties,
        };
        let make_q = |rng: &mut ChaCha8Rng| -> Result<QFunction> {
            match space.mode() {
                ObsMode::State => QFunction::tabular(qc, space.clone(), maze.map.extent(), config.move_step),
                ObsMode::HighDim => QFunction::perceptron(qc, space.clone(), config.hidden_dim, rng),
            }
        };
        let policy = make_q(&mut rng)?;
        let graph_q = make_q(&mut rng)?;
        let mut critics = DualCritics::new(policy, graph_q);
        critics.policy_her = config.policy_her_ratio;
        critics.graph_her = config.graph_her_ratio;
        let mixture = GoalMixture::new(MixtureConfig {
            beta: config.beta,
            kappa: config.kappa,
            initial_alpha: config.initial_alpha,
            min_fit_samples: 10,
            n_mc: config.kl_samples,
            density_floor: config.density_floor,
            min_bandwidth: config.kde_min_bandwidth,
            bandwidth: (config.kde_bandwidth > 0.0).then_some(config.kde_bandwidth),
        });
        let replay = new_replay(&config, &space);
        let exec = config.execution_mode()?;
        let state = TrainerState {
            graph: LandmarkGraph::empty(config.cutoff),
            counts: VisitCounts::new(0, 0, config.visit_epsilon),
            config,
            maze,
            space,
            rng,
            quantizer: None,
            critics,
            mixture,
            init_landmark: None,
            episode: 0,
            next_episode_id: 0,
            warmed_up: false,
            recent: Vec::new(),
            metrics: Vec::new(),
            log: Vec::new(),
        };
        Ok(Trainer { state, replay, exec })
    }

    pub fn from_parts(state: TrainerState, replay: ReplayStore) -> Result<Self> {
        let exec = state.config.execution_mode()?;
        Ok(Trainer { state, replay, exec })
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    pub fn episode(&self) -> usize {
        self.state.episode
    }

    pub fn graph(&self) -> &LandmarkGraph {
        &self.state.graph
    }

    fn epsilon(&self) -> f64 {
        let c = &self.state.config;
        epsilon_schedule(self.state.episode, c.episodes, c.eps_start, c.eps_end, c.eps_anneal_fraction)
    }

    fn latent(&self, raw: &[f64]) -> Vec<f64> {
        match &self.state.quantizer {
            Some(q) => q.encode(raw),
            None => raw.to_vec(),
        }
    }

    fn planning_enabled(&self) -> bool {
        let c = &self.state.config;
        !(c.no_planning || c.no_graph) && self.state.graph.permanent_len() > 0
    }

    /// Plan from `start` to `goal` on a scratch copy of the graph.
    fn plan(&self, graph: &mut LandmarkGraph, start: &[f64], goal: &[f64], goal_vertex: Option<usize>) -> Result<Plan> {
        let horizon = self.state.config.horizon;
        if !self.planning_enabled() {
            return Ok(Plan::direct(goal.to_vec(), horizon));
        }
        let start_latent = self.latent(start);
        let goal_latent = self.latent(goal);
        let query = PlanQuery { start, start_latent: &start_latent, goal, goal_latent: &goal_latent, goal_vertex };
        let plan = make_plan(graph, query, &self.state.moves(), horizon)?;
        if plan.total_budget() > horizon + plan.len() {
            return Err(CqmError::Config(format!("plan budget {} exceeds horizon bound", plan.total_budget())));
        }
        Ok(plan)
    }

    /// Runs one episode towards `goal`, following `plan`'s waypoints. Training
    /// episodes use the whole horizon; with `stop_on_reach` the episode ends
    /// at the goal.
    #[allow(clippy::too_many_arguments)]
    fn rollout<R: Rng + ?Sized>(
        &self,
        start: Observation,
        goal: &[f64],
        mut plan: Plan,
        epsilon: f64,
        episode_id: u64,
        stop_on_reach: bool,
        rng: &mut R,
    ) -> Rollout {
        let s = &self.state;
        let goal_pos = s.space.position_of(goal);
        let threshold = s.config.success_threshold;
        let mut obs = start;
        let mut transitions = Vec::with_capacity(s.config.horizon);
        let mut reached = false;
        for t in 0..s.config.horizon {
            let target = plan.advance(obs.position, threshold, &s.space).to_vec();
            let raw = s.space.encode(&obs);
            let action = act(&s.critics.policy, &raw, &target, epsilon, rng);
            let step = s.maze.step(&obs, action, goal_pos);
            plan.record_step();
            transitions.push(Transition {
                obs,
                action,
                next_obs: step.obs,
                goal: goal.to_vec(),
                reward: step.reward,
                done: step.done,
                episode_id,
                step_index: t,
                relabeled: false,
            });
            obs = step.obs;
            reached |= step.done;
            if reached && stop_on_reach {
                break;
            }
        }
        Rollout { transitions, reached, final_position: obs.position, plan }
    }

    fn store(&mut self, rollout: &Rollout) {
        self.replay.store_episode(&rollout.transitions);
        let s = &mut self.state;
        for t in &rollout.transitions {
            s.recent.push(s.space.encode(&t.obs));
        }
        if let Some(t) = rollout.transitions.last() {
            s.recent.push(s.space.encode(&t.next_obs));
        }
        if let Some(q) = &mut s.quantizer {
            q.codebook.tick_rollout();
        }
    }

    /// Random-action rollouts that seed the buffers, the codebook and the first graph.
    pub fn warmup(&mut self) -> Result<()> {
        if self.state.warmed_up {
            return Ok(());
        }
        for _ in 0..self.state.config.warmup_rollouts {
            let mut rng = self.state.rng.clone();
            let start = self.state.maze.reset(&mut rng);
            let goal = self.state.space.encode(&self.state.maze.sample_final_goal(&mut rng));
            let id = self.state.next_episode_id;
            let r = self.rollout(start, &goal, Plan::direct(goal.clone(), self.state.config.horizon), 1.0, id, false, &mut rng);
            self.state.rng = rng;
            self.state.next_episode_id += 1;
            self.store(&r);
        }
        self.init_quantizer()?;
        self.train_steps().map_err(|e| e.at(0, "warmup training"))?;
        self.rebuild_graph().map_err(|e| e.at(0, "initial graph"))?;
        self.state.recent.clear();
        self.state.warmed_up = true;
        Ok(())
    }

    fn vq_raw(&self) -> Vec<Vec<f64>> {
        self.replay.vq.iter().map(|o| self.state.space.encode(o)).collect()
    }

    fn init_quantizer(&mut self) -> Result<()> {
        let raw = self.vq_raw();
        if raw.is_empty() {
            return Err(CqmError::EmptyBuffer.at(0, "codebook initialization"));
        }
        let c = &self.state.config;
        let k = c.codes;
        let rng = &mut self.state.rng;
        let picks: Vec<usize> = if raw.len() >= k { index::sample(rng, raw.len(), k).into_vec() } else { (0..k).map(|_| rng.random_range(0..raw.len())).collect() };
        let init: Vec<Vec<f64>> = picks.iter().map(|&i| raw[i].clone()).collect();
        let qc = QuantizerConfig {
            lambda_commit: c.lambda_commit,
            ema_decay: c.ema_decay,
            eps_den: 1e-5,
            learning_rate: c.vq_learning_rate,
            freeze_codebook: false,
        };
        let q = match self.state.space.mode() {
            ObsMode::State => Quantizer::identity(Codebook::from_points(init)?, qc),
            ObsMode::HighDim => Quantizer::mlp(self.state.space.dim(), c.hidden_dim, c.latent_dim, &init, qc, rng)?,
        };
        self.state.quantizer = Some(q);
        Ok(())
    }

    fn train_steps(&mut self) -> Result<()> {
        let c = &self.state.config;
        let (steps, batch, vq_batch) = (c.train_steps, c.batch_size, c.vq_batch_size);
        for _ in 0..steps {
            self.state.critics.train_step(&self.replay.rl, batch, &mut self.state.rng, self.exec)?;
            let obs = self.replay.vq.sample(vq_batch, &mut self.state.rng)?;
            let raw: Vec<Vec<f64>> = obs.iter().map(|o| self.state.space.encode(o)).collect();
            if let Some(q) = &mut self.state.quantizer {
                q.train_step(&raw, self.exec)?;
            }
        }
        Ok(())
    }

    fn rebuild_graph(&mut self) -> Result<()> {
        let raw = self.vq_raw();
        let exec = self.exec;
        let s = &mut self.state;
        let Some(q) = &s.quantizer else { return Ok(()) };
        let mut landmarks = if s.config.landmarks_from_buffer {
            q.landmarks_from_buffer(&raw, true, &mut s.rng, exec)?
        } else {
            q.decode_assigned_landmarks(&raw, exec)
        };
        if landmarks.len() > s.config.max_graph_node {
            landmarks = sparsify_landmarks(landmarks, s.config.max_graph_node, &s.moves())?;
        }
        let generation = s.graph.generation() + 1;
        s.graph = LandmarkGraph::build(landmarks, &s.moves(), s.config.cutoff, s.config.symmetric_edges, generation, exec);
        s.counts.sync_with(&s.graph);
        let starts = s.maze.map.start_region();
        let mut mean = [0.0, 0.0];
        for &cell in starts {
            let c = s.maze.map.cell_center(cell);
            mean[0] += c[0] / starts.len() as f64;
            mean[1] += c[1] / starts.len() as f64;
        }
        let init_latent = q.encode(&s.space.encode(&Observation::at(mean)));
        s.init_landmark = s.graph.nearest_vertex(&init_latent);
        Ok(())
    }

    fn update_alpha(&mut self) {
        let s = &mut self.state;
        let n = s.config.kde_samples;
        let achieved: Vec<Vec<f64>> = match self.replay.vq.sample(n, &mut s.rng) {
            Ok(obs) => obs.iter().map(|o| o.position.to_vec()).collect(),
            Err(_) => Vec::new(),
        };
        let finals: Vec<Vec<f64>> =
            (0..s.config.final_goal_samples).map(|_| s.maze.sample_final_goal(&mut s.rng).position.to_vec()).collect();
        s.mixture.update(&achieved, &finals, &mut s.rng, self.exec);
    }

    fn frontier_distances(&self) -> Option<Vec<f64>> {
        let s = &self.state;
        let init = s.init_landmark?;
        if s.config.no_graph {
            let from = &s.graph.vertex(init).ok()?.point;
            let moves = s.moves();
            Some(
                self.exec
                    .map(s.graph.vertices(), |v| if v.id == init { 0.0 } else { moves.distance(from, &v.point) }),
            )
        } else {
            s.graph.dijkstra(init).ok().map(|d| d.0)
        }
    }

    /// Probability of pursuing the final goal this episode.
    pub fn effective_alpha(&self) -> f64 {
        let c = &self.state.config;
        if c.no_curriculum {
            1.0
        } else if c.no_goal_convergence {
            0.0
        } else {
            self.state.mixture.alpha
        }
    }

    /// Distance from a point to the nearest final-goal cell center.
    fn distance_to_final(&self, pos: [f64; 2]) -> f64 {
        let map = &self.state.maze.map;
        map.final_goal_regions()
            .iter()
            .flatten()
            .map(|&cell| distance(pos, map.cell_center(cell)))
            .fold(f64::INFINITY, f64::min)
    }

    /// One training episode followed by its graph cycle, learning steps and evaluation.
    pub fn train_episode(&mut self) -> Result<()> {
        self.warmup()?;
        let ep = self.state.episode;
        let epsilon = self.epsilon();
        let alpha = self.effective_alpha();

        let mut rng = self.state.rng.clone();
        let frontier = if self.state.config.no_curriculum || self.state.graph.permanent_len() == 0 {
            None
        } else {
            self.frontier_distances().and_then(|d| {
                let reachable = d.iter().filter(|x| x.is_finite()).count();
                let k = if self.state.config.top_k == 0 { default_top_k(reachable) } else { self.state.config.top_k };
                match sample_frontier_goal(
                    &self.state.graph,
                    &self.state.counts,
                    &d,
                    k,
                    self.state.config.noise_radius,
                    &self.state.space,
                    &mut rng,
                ) {
                    Ok(g) => Some(g),
                    Err(CqmError::NoReachableLandmark) => None,
                    Err(_) => None,
                }
            })
        };
        let start = self.state.maze.reset(&mut rng);
        let final_goal = self.state.space.encode(&self.state.maze.sample_final_goal(&mut rng));
        let goal: CurriculumGoal = choose_goal(alpha, frontier, final_goal, &mut rng);
        let goal_vertex = match (&goal.landmark, goal.noise) {
            (Some(l), [0.0, 0.0]) => Some(l.id),
            _ => None,
        };
        let mut scratch = self.state.graph.clone();
        let plan = self
            .plan(&mut scratch, &self.state.space.encode(&start), &goal.point, goal_vertex)
            .map_err(|e| e.at(ep, "planning"))?;
        let id = self.state.next_episode_id;
        let rollout = self.rollout(start, &goal.point, plan, epsilon, id, false, &mut rng);
        self.state.rng = rng;
        self.state.next_episode_id += 1;
        self.store(&rollout);

        if self.state.graph.permanent_len() > 0 {
            let latents: Vec<Vec<f64>> = rollout
                .transitions
                .iter()
                .map(|t| self.latent(&self.state.space.encode(&t.next_obs)))
                .collect();
            let s = &mut self.state;
            s.counts.sync_with(&s.graph);
            s.counts.record(&latents, &s.graph).map_err(|e| e.at(ep, "visit counts"))?;
        }

        let goal_pos = self.state.space.position_of(&goal.point);
        self.state.log.push(EpisodeRecord {
            episode: ep,
            goal_kind: goal.kind,
            goal_x: goal_pos[0],
            goal_y: goal_pos[1],
            alpha,
            kl: self.state.mixture.last_kl,
            top_k: goal.top_k_size,
            goal_distance: self.distance_to_final(goal_pos),
            steps: rollout.transitions.len(),
            reached: rollout.reached,
            waypoints: rollout.plan.len(),
            budget: rollout.plan.total_budget(),
        });

        if (ep + 1) % self.state.config.graph_cycle == 0 {
            self.update_alpha();
            let recent = std::mem::take(&mut self.state.recent);
            let max_age = self.state.config.graph_cycle as u32;
            let s = &mut self.state;
            if let Some(q) = &mut s.quantizer {
                q.resample_dead_codes(&recent, max_age, &mut s.rng);
            }
            self.rebuild_graph().map_err(|e| e.at(ep, "graph rebuild"))?;
        }
        self.train_steps().map_err(|e| e.at(ep, "training"))?;

        let results = self.evaluate_at(ep as u64, self.state.config.eval_episodes, self.state.config.seed)?;
        let s = &self.state;
        let active = s.quantizer.as_ref().map_or(0, |q| q.active_codes(s.config.graph_cycle as u32));
        for (i, r) in results.iter().enumerate() {
            self.state.metrics.push(MetricsRow {
                episode: ep,
                eval_index: i,
                success: r.success,
                final_distance: r.final_distance,
                alpha,
                kl: self.state.mixture.last_kl,
                goal_kind: goal.kind,
                goal_distance: self.distance_to_final(goal_pos),
                graph_vertices: self.state.graph.permanent_len(),
                graph_edges: self.state.graph.edge_count(),
                active_codes: active,
            });
        }
        self.state.episode += 1;
        Ok(())
    }

    /// Greedy episodes towards final goals, each with its own derived generator.
    pub fn evaluate_at(&self, episode: u64, n: usize, seed: u64) -> Result<Vec<EvalResult>> {
        let results = self.exec.map_range(n, |i| -> Result<EvalResult> {
            let mut rng = eval_rng(seed, episode, i as u64);
            let s = &self.state;
            let start = s.maze.reset(&mut rng);
            let goal = s.space.encode(&s.maze.sample_final_goal(&mut rng));
            let mut scratch = s.graph.clone();
            let plan = self.plan(&mut scratch, &s.space.encode(&start), &goal, None)?;
            let r = self.rollout(start, &goal, plan, 0.0, u64::MAX, true, &mut rng);
            Ok(EvalResult { success: r.reached, final_distance: distance(r.final_position, s.space.position_of(&goal)) })
        });
        results.into_iter().collect()
    }

    pub fn evaluate(&self, n: usize) -> Result<EvalSummary> {
        let results = self.evaluate_at(u64::from(u32::MAX), n, self.state.config.seed.wrapping_add(1))?;
        Ok(EvalSummary::from_results(&results))
    }

    /// Trains until `episodes` training episodes have completed.
    pub fn run_until(&mut self, episodes: usize) -> Result<()> {
        self.warmup()?;
        while self.state.episode < episodes {
            self.train_episode()?;
        }
        Ok(())
    }

    /// Runs the configured number of episodes and summarizes them.
    pub fn run(&mut self) -> Result<RunSummary> {
        let clock = Instant::now();
        self.run_until(self.state.config.episodes)?;
        Ok(self.summary(clock.elapsed().as_secs_f64()))
    }

    pub fn summary(&self, wall_clock_seconds: f64) -> RunSummary {
        RunSummary::from_state(&self.state, wall_clock_seconds)
    }
}
