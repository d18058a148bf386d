//! Run configuration as flat `key = value` text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::env::ObsMode;
use crate::error::{CqmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in maze name (`umaze`, `spiral`, `threeway`) or a path to an ASCII map.
    pub maze: String,
    pub seed: u64,
    pub episodes: usize,
    pub warmup_rollouts: usize,
    pub graph_cycle: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub vq_batch_size: usize,

    pub horizon: usize,
    pub success_threshold: f64,
    pub move_step: f64,
    pub cell_size: f64,
    /// `state` or `highdim`.
    pub obs_mode: String,

    pub codes: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub vq_learning_rate: f64,
    pub lambda_commit: f64,
    pub ema_decay: f64,

    pub gamma: f64,
    pub q_learning_rate: f64,
    pub q_init: f64,
    /// Equal action values are broken toward the goal, then by lowest index.
    pub directed_ties: bool,
    pub target_interp: f64,
    pub target_update_interval: u64,
    pub policy_her_ratio: f64,
    pub graph_her_ratio: f64,
    /// Hindsight window in steps; 0 means the horizon.
    pub her_future: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_fraction: f64,

    pub rl_capacity: usize,
    pub vq_capacity: usize,

    pub cutoff: f64,
    pub max_graph_node: usize,
    pub symmetric_edges: bool,
    /// Frontier size; 0 selects `max(5, ceil(0.1 * reachable))`.
    pub top_k: usize,
    pub visit_epsilon: f64,
    pub noise_radius: f64,

    pub beta: f64,
    pub kappa: f64,
    pub initial_alpha: f64,
    pub kde_samples: usize,
    pub final_goal_samples: usize,
    pub kl_samples: usize,
    pub kde_min_bandwidth: f64,
    /// Fixed KDE bandwidth; 0 selects Scott's rule.
    pub kde_bandwidth: f64,
    pub density_floor: f64,

    pub eval_episodes: usize,
    /// `parallel` or `sequential`; results are identical either way.
    pub execution: String,

    pub no_curriculum: bool,
    pub no_graph: bool,
    pub no_planning: bool,
    pub no_goal_convergence: bool,
    pub landmarks_from_buffer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            maze: "umaze".into(),
            seed: 0,
            episodes: 2000,
            warmup_rollouts: 20,
            graph_cycle: 5,
            train_steps: 100,
            batch_size: 64,
            vq_batch_size: 64,
            horizon: 150,
            success_threshold: 0.5,
            move_step: 0.5,
            cell_size: 1.0,
            obs_mode: "state".into(),
            codes: 128,
            latent_dim: 8,
            hidden_dim: 32,
            vq_learning_rate: 0.05,
            lambda_commit: 0.25,
            ema_decay: 0.99,
            gamma: 0.99,
            q_learning_rate: 0.5,
            q_init: -100.0,
            directed_ties: false,
            target_interp: 0.995,
            target_update_interval: 10,
            policy_her_ratio: 0.8,
            graph_her_ratio: 1.0,
            her_future: 0,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_anneal_fraction: 0.2,
            rl_capacity: 200_000,
            vq_capacity: 10_000,
            cutoff: 10.0,
            max_graph_node: 300,
            symmetric_edges: false,
            top_k: 0,
            visit_epsilon: 1e-3,
            noise_radius: 1.0,
            beta: -20.0,
            kappa: 1.0,
            initial_alpha: 0.0,
            kde_samples: 500,
            final_goal_samples: 100,
            kl_samples: 512,
            kde_min_bandwidth: 0.1,
            kde_bandwidth: 0.0,
            density_floor: 1e-12,
            eval_episodes: 1,
            execution: "parallel".into(),
            no_curriculum: false,
            no_graph: false,
            no_planning: false,
            no_goal_convergence: false,
            landmarks_from_buffer: false,
        }
    }
}

pub const ABLATIONS: [&str; 5] = ["no_curriculum", "no_graph", "no_planning", "no_goal_convergence", "landmarks_from_buffer"];

fn to_map(config: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(config).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = to_map(&RunConfig::default());
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CqmError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            map.insert(key.to_string(), parse_value(&map, key, value, n + 1)?);
        }
        let config: RunConfig = serde_json::from_value(Value::Object(map)).map_err(|e| CqmError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::parse(&text)?;
        if crate::mazes::by_name(&config.maze).is_none() {
            let p = PathBuf::from(&config.maze);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    config.maze = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(config)
    }

    /// Sets one field from text, as in a config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = to_map(self);
        map.insert(key.to_string(), parse_value(&map, key, value, 0)?);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| CqmError::Config(e.to_string()))?;
        self.validate()
    }

    pub fn enable_ablation(&mut self, flag: &str) -> Result<()> {
        if !ABLATIONS.contains(&flag) {
            return Err(CqmError::Config(format!("unknown ablation {flag:?}; expected one of {}", ABLATIONS.join(", "))));
        }
        self.set(flag, "true")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("warmup_rollouts", self.warmup_rollouts),
            ("graph_cycle", self.graph_cycle),
            ("train_steps", self.train_steps),
            ("batch_size", self.batch_size),
            ("vq_batch_size", self.vq_batch_size),
            ("horizon", self.horizon),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("rl_capacity", self.rl_capacity),
            ("vq_capacity", self.vq_capacity),
            ("max_graph_node", self.max_graph_node),
            ("kde_samples", self.kde_samples),
            ("final_goal_samples", self.final_goal_samples),
            ("kl_samples", self.kl_samples),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CqmError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.codes < 2 {
            return Err(CqmError::Config("codes must be at least 2".into()));
        }
        for (name, v) in [("policy_her_ratio", self.policy_her_ratio), ("graph_her_ratio", self.graph_her_ratio), ("initial_alpha", self.initial_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CqmError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end), ("eps_anneal_fraction", self.eps_anneal_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CqmError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [("noise_radius", self.noise_radius), ("kde_bandwidth", self.kde_bandwidth), ("visit_epsilon", self.visit_epsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CqmError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.cutoff > 0.0) || !(self.success_threshold > 0.0) || !(self.move_step > 0.0) || !(self.cell_size > 0.0) {
            return Err(CqmError::Config("cutoff, success_threshold, move_step and cell_size must be positive".into()));
        }
        self.obs_mode()?;
        self.execution_mode()?;
        Ok(())
    }

    pub fn obs_mode(&self) -> Result<ObsMode> {
        match self.obs_mode.as_str() {
            "state" => Ok(ObsMode::State),
            "highdim" => Ok(ObsMode::HighDim),
            other => Err(CqmError::Config(format!("obs_mode must be state or highdim, got {other:?}"))),
        }
    }

    pub fn execution_mode(&self) -> Result<crate::exec::Execution> {
        match self.execution.as_str() {
            "parallel" => Ok(crate::exec::Execution::Parallel),
            "sequential" => Ok(crate::exec::Execution::Sequential),
            other => Err(CqmError::Config(format!("execution must be parallel or sequential, got {other:?}"))),
        }
    }

    pub fn her_window(&self) -> usize {
        if self.her_future == 0 {
            self.horizon
        } else {
            self.her_future
        }
    }

    /// Text of the maze map, built-in or read from disk.
    pub fn maze_text(&self) -> Result<String> {
        match crate::mazes::by_name(&self.maze) {
            Some(t) => Ok(t.to_string()),
            None => Ok(std::fs::read_to_string(&self.maze)?),
        }
    }

    /// Sorted `key=value` lines, one per field.
    pub fn canonical(&self) -> String {
        let sorted: BTreeMap<String, Value> = to_map(self).into_iter().collect();
        let mut out = String::new();
        for (k, v) in sorted {
            out.push_str(&k);
            out.push('=');
            out.push_str(&render(&v));
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Names of fields whose values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let a = to_map(self);
        let b = to_map(other);
        let mut keys: Vec<String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
        keys.sort();
        keys
    }
}

fn parse_value(map: &Map<String, Value>, key: &str, value: &str, line: usize) -> Result<Value> {
    let bad = |what: &str| CqmError::Config(format!("line {line}: {key} expects {what}, got {value:?}"));
    match map.get(key) {
        None => Err(CqmError::Config(format!("line {line}: unknown key {key:?}"))),
        Some(Value::Bool(_)) => value.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Some(Value::String(_)) => Ok(Value::String(value.to_string())),
        Some(Value::Number(n)) if n.is_f64() => {
            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))
        }
        Some(Value::Number(_)) => value.parse::<u64>().map(|v| Value::Number(v.into())).map_err(|_| bad("a non-negative integer")),
        Some(_) => Err(bad("a scalar")),
    }
}
