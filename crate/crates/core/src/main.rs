use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cqm::harness::{checkpoint, metrics, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "cqm", about = "Curriculum RL over a quantized landmark graph in 2D mazes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics, a summary and a checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation flag to enable; may repeat.
        #[arg(long = "ablation")]
        ablations: Vec<String>,
        /// Override a config key, as `key=value`; may repeat.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Output directory; defaults to `runs/<config stem>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a graph edge list every this many episodes (0 disables).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
        /// Leave the replay buffers out of the checkpoint.
        #[arg(long)]
        no_buffers: bool,
    },
    /// Greedy evaluation of a checkpoint against final goals.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Print the landmark graph of a checkpoint as an edge list.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, ablations, overrides, out, snapshot_every, no_buffers } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            for a in &ablations {
                cfg.enable_ablation(a)?;
            }
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not key=value"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
            let mut tag = format!("{stem}-seed{}", cfg.seed);
            for a in &ablations {
                tag.push('-');
                tag.push_str(a);
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(tag));
            std::fs::create_dir_all(&out)?;

            let clock = Instant::now();
            let total = cfg.episodes;
            let mut trainer = Trainer::new(cfg)?;
            trainer.warmup()?;
            let step = if snapshot_every == 0 { total.max(1) } else { snapshot_every };
            while trainer.episode() < total {
                let next = (trainer.episode() + step).min(total);
                trainer.run_until(next)?;
                if snapshot_every > 0 {
                    std::fs::write(out.join(format!("graph_{next:06}.txt")), trainer.graph().to_edge_list())?;
                }
                let (s, d) = metrics::tail_stats(&trainer.state.metrics, 50);
                eprintln!("episode {next}/{total}: success(last 50) {s:.2}, final distance {d:.2}, alpha {:.3}", trainer.effective_alpha());
            }
            let summary = trainer.summary(clock.elapsed().as_secs_f64());
            metrics::write_outputs(&out, &trainer.state, &summary)?;
            std::fs::write(out.join("graph.txt"), trainer.graph().to_edge_list())?;
            checkpoint::save(&trainer, &out.join("checkpoint.cqm"), !no_buffers)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { checkpoint: path, episodes } => {
            let trainer = checkpoint::load(&path, None)?;
            let summary = trainer.evaluate(episodes)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::ExportGraph { checkpoint: path } => {
            let trainer = checkpoint::load(&path, None)?;
            print!("{}", trainer.graph().to_edge_list());
        }
    }
    Ok(())
}
