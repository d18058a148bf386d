mod common;

use std::path::Path;
use std::process::Command;

use cqm::harness::{checkpoint, metrics, RunConfig, Trainer};
use cqm::CqmError;

const OPEN_5X5: &str = "S....\n.....\n.....\n.....\n....G\n";
const SMALL_U: &str = "######\n#S...#\n####.#\n#G...#\n######\n";

fn small_config(dir: &Path, maze: &str, episodes: usize) -> RunConfig {
    let path = dir.join("maze.txt");
    std::fs::write(&path, maze).unwrap();
    let mut c = RunConfig::default();
    c.maze = path.to_string_lossy().into_owned();
    c.episodes = episodes;
    c.horizon = 40;
    c.warmup_rollouts = 4;
    c.train_steps = 20;
    c.codes = 16;
    c.top_k = 3;
    c.kde_samples = 100;
    c.kl_samples = 64;
    c.final_goal_samples = 20;
    c.rl_capacity = 5_000;
    c.vq_capacity = 1_000;
    c
}

fn trained(cfg: RunConfig, episodes: usize) -> Trainer {
    let mut t = Trainer::new(cfg).unwrap();
    t.run_until(episodes).unwrap();
    t
}

#[test]
fn identical_runs_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 25);
    let a = trained(cfg.clone(), 25);
    let b = trained(cfg.clone(), 25);
    assert_eq!(metrics::metrics_csv(&a.state.metrics), metrics::metrics_csv(&b.state.metrics));
    assert_eq!(metrics::episodes_csv(&a.state.log), metrics::episodes_csv(&b.state.log));
    let mut seq = cfg;
    seq.execution = "sequential".into();
    let c = trained(seq, 25);
    assert_eq!(metrics::metrics_csv(&a.state.metrics), metrics::metrics_csv(&c.state.metrics));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 10);
    let t = trained(cfg.clone(), 10);
    for with_buffers in [true, false] {
        let bytes = checkpoint::to_bytes(&t, with_buffers).unwrap();
        let back = checkpoint::from_bytes(&bytes, Some(&cfg)).unwrap();
        assert_eq!(checkpoint::to_bytes(&back, with_buffers).unwrap(), bytes);
        assert_eq!(back.state, t.state);
    }
    let file = dir.path().join("c.cqm");
    checkpoint::save(&t, &file, true).unwrap();
    assert_eq!(checkpoint::load(&file, None).unwrap().state, t.state);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 20);
    let straight = trained(cfg.clone(), 20);
    let half = trained(cfg.clone(), 10);
    let mut resumed = checkpoint::from_bytes(&checkpoint::to_bytes(&half, true).unwrap(), Some(&cfg)).unwrap();
    resumed.run_until(20).unwrap();
    assert_eq!(metrics::metrics_csv(&resumed.state.metrics), metrics::metrics_csv(&straight.state.metrics));
    assert_eq!(resumed.state, straight.state);
}

#[test]
fn config_mismatch_and_corruption_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 2);
    let t = trained(cfg.clone(), 2);
    let bytes = checkpoint::to_bytes(&t, false).unwrap();
    let mut other = cfg.clone();
    other.beta = -5.0;
    other.seed = 3;
    match checkpoint::from_bytes(&bytes, Some(&other)) {
        Err(CqmError::ConfigMismatch(diff)) => {
            assert_eq!(diff.len(), 2, "{diff:?}");
            assert!(diff.iter().any(|d| d.contains("beta")));
        }
        other => panic!("expected a config mismatch, got {:?}", other.err()),
    }
    let sections = checkpoint::decode_sections(&bytes).unwrap();
    let (_, hash) = sections.iter().find(|(n, _)| n == "config_hash").unwrap();
    let offset = hash.as_ptr() as usize - bytes.as_ptr() as usize;
    let mut bad = bytes.clone();
    bad[offset] ^= 1;
    assert!(matches!(checkpoint::from_bytes(&bad, None), Err(CqmError::CorruptCheckpoint(_))));
}

#[test]
fn zero_episodes_give_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 0);
    let mut t = Trainer::new(cfg).unwrap();
    let summary = t.run().unwrap();
    metrics::write_outputs(dir.path(), &t.state, &summary).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", metrics::METRICS_HEADER));
    assert_eq!(summary.episodes, 0);
    assert_eq!(summary.first_success_episode, None);
}

#[test]
fn untrained_agent_fails_the_u_maze() {
    let cfg = common::load_config("umaze.cfg", 0, None);
    let t = Trainer::new(cfg).unwrap();
    let s = t.evaluate(20).unwrap();
    assert!(s.success_rate <= 0.05, "{s:?}");
}

#[test]
fn open_gridworld_is_solved() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), OPEN_5X5, 150);
    cfg.horizon = 30;
    let t = trained(cfg, 150);
    let s = t.evaluate(20).unwrap();
    assert_eq!(s.success_rate, 1.0, "{s:?}");
}

#[test]
fn cli_runs_evaluates_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL_U, 6);
    let cfg_path = dir.path().join("small.cfg");
    std::fs::write(&cfg_path, cfg.canonical()).unwrap();
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_cqm");
    let run = Command::new(bin)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "4", "--set", "eval_episodes=2", "--snapshot-every", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["seed"], 4);
    assert_eq!(summary["episodes"], 6);
    for f in ["metrics.csv", "episodes.csv", "summary.json", "graph.txt", "graph_000003.txt", "graph_000006.txt", "checkpoint.cqm"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let rows = std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 6 * 2);

    let eval = Command::new(bin).args(["eval", "--episodes", "3", "--checkpoint"]).arg(out.join("checkpoint.cqm")).output().unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let e: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(e["episodes"], 3);

    let graph = Command::new(bin).args(["export-graph", "--checkpoint"]).arg(out.join("checkpoint.cqm")).output().unwrap();
    assert!(graph.status.success());
    assert_eq!(String::from_utf8(graph.stdout).unwrap(), std::fs::read_to_string(out.join("graph.txt")).unwrap());

    let bad = Command::new(bin).args(["run", "--config"]).arg(&cfg_path).args(["--ablation", "no_such_flag"]).output().unwrap();
    assert!(!bad.status.success());
}
