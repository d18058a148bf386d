//! Per-episode metrics rows, the training log and the run summary.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::GoalKind;
use crate::error::Result;

use super::trainer::TrainerState;

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "episode,eval_index,success,final_distance,alpha,kl,goal_kind,goal_distance,graph_vertices,graph_edges,active_codes";

/// Column order of `episodes.csv`.
pub const EPISODES_HEADER: &str =
    "episode,goal_kind,goal_x,goal_y,alpha,kl,top_k,goal_distance,steps,reached,waypoints,budget";

/// One evaluation episode run after training episode `episode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub eval_index: usize,
    pub success: bool,
    /// Agent-to-goal distance at the end of the evaluation episode.
    pub final_distance: f64,
    pub alpha: f64,
    pub kl: Option<f64>,
    /// Provenance of the training episode's goal.
    pub goal_kind: GoalKind,
    /// Distance from the training goal to the nearest final-goal cell center.
    pub goal_distance: f64,
    pub graph_vertices: usize,
    pub graph_edges: usize,
    pub active_codes: usize,
}

/// One training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub goal_kind: GoalKind,
    pub goal_x: f64,
    pub goal_y: f64,
    pub alpha: f64,
    pub kl: Option<f64>,
    pub top_k: usize,
    pub goal_distance: f64,
    pub steps: usize,
    pub reached: bool,
    pub waypoints: usize,
    pub budget: usize,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.eval_index,
            u8::from(r.success),
            r.final_distance,
            r.alpha,
            opt(r.kl),
            r.goal_kind.as_str(),
            r.goal_distance,
            r.graph_vertices,
            r.graph_edges,
            r.active_codes
        );
    }
    out
}

pub fn episodes_csv(rows: &[EpisodeRecord]) -> String {
    let mut out = String::from(EPISODES_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.goal_kind.as_str(),
            r.goal_x,
            r.goal_y,
            r.alpha,
            opt(r.kl),
            r.top_k,
            r.goal_distance,
            r.steps,
            u8::from(r.reached),
            r.waypoints,
            r.budget
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub maze: String,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
    /// Success rate over the last 50 evaluation episodes.
    pub success_last_50: f64,
    pub mean_final_distance_last_50: f64,
    /// First training episode whose evaluation succeeded.
    pub first_success_episode: Option<usize>,
    pub final_alpha: f64,
    pub graph_vertices: usize,
    pub graph_edges: usize,
    pub wall_clock_seconds: f64,
}

/// Success rate and mean final distance over the last `n` rows.
pub fn tail_stats(rows: &[MetricsRow], n: usize) -> (f64, f64) {
    let tail = &rows[rows.len().saturating_sub(n)..];
    if tail.is_empty() {
        return (0.0, 0.0);
    }
    let k = tail.len() as f64;
    let success = tail.iter().filter(|r| r.success).count() as f64 / k;
    let dist = tail.iter().map(|r| r.final_distance).sum::<f64>() / k;
    (success, dist)
}

pub fn first_success(rows: &[MetricsRow]) -> Option<usize> {
    rows.iter().find(|r| r.success).map(|r| r.episode)
}

impl RunSummary {
    pub fn from_state(s: &TrainerState, wall_clock_seconds: f64) -> Self {
        let (success_last_50, mean_final_distance_last_50) = tail_stats(&s.metrics, 50);
        RunSummary {
            maze: s.config.maze.clone(),
            seed: s.config.seed,
            config_hash: s.config.hash_hex(),
            episodes: s.episode,
            success_last_50,
            mean_final_distance_last_50,
            first_success_episode: first_success(&s.metrics),
            final_alpha: s.metrics.last().map_or(s.mixture.alpha, |r| r.alpha),
            graph_vertices: s.graph.permanent_len(),
            graph_edges: s.graph.edge_count(),
            wall_clock_seconds,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Writes `metrics.csv`, `episodes.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, state: &TrainerState, summary: &RunSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&state.metrics))?;
    write_file(&dir.join("episodes.csv"), &episodes_csv(&state.log))?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| crate::error::CqmError::Config(e.to_string()))?;
    write_file(&dir.join("summary.json"), &(json + "\n"))
}
