use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gatroute::harness::{self, csv_string, format_summary, summarize, ExperimentConfig, ReportRow};

#[derive(Parser)]
#[command(name = "gatroute", version, about = "Packet-routing experiments with graph-attention Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CSV output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Topology file overriding the config's topology.
    #[arg(long, global = true)]
    topology: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a neural model on Q-routing transitions and evaluate it.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        /// Where to save the trained parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the config's load schedule.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several configs on the same topology and schedule.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(path: &Path, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = &common.topology {
        cfg.topology = t.display().to_string();
    }
    Ok(cfg)
}

fn emit(rows: &[ReportRow], out: Option<&Path>) -> Result<()> {
    let text = csv_string(rows)?;
    match out {
        Some(path) => File::create(path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    eprint!("{}", format_summary(&summarize(rows)));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain {
            config,
            steps,
            params,
            common,
        } => {
            let mut cfg = load_config(&config, &common)?;
            cfg.pretrain_steps = steps;
            let outcome = harness::pretrain(&cfg, steps)?;
            let fmt = |r: &harness::EvalReport| {
                format!(
                    "delay {} censored {:.3} delivered {} undelivered {}",
                    r.average_delay.map_or("-".into(), |d| format!("{d:.3}")),
                    r.censored_delay,
                    r.delivered,
                    r.undelivered
                )
            };
            eprintln!(
                "teacher ({}): {}",
                if outcome.teacher_converged { "converged" } else { "not converged" },
                fmt(&outcome.teacher_report)
            );
            eprintln!("model after {steps} steps: {}", fmt(&outcome.report));
            if let Some(path) = params {
                std::fs::write(&path, outcome.params.to_checkpoint())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let s = &cfg.pretrain;
            let row = ReportRow {
                load: s.eval_load,
                step_window: format!("{}-{}", s.eval_warmup_steps, s.eval_warmup_steps + s.eval_steps),
                avg_e2e_delay: outcome.report.average_delay,
                delivered: outcome.report.delivered,
                in_flight: outcome.report.undelivered as usize,
                algorithm: cfg.algorithm.label().to_string(),
                paradigm: cfg.paradigm_label().to_string(),
                seed: cfg.seed,
                config_hash: harness::config_hash(&cfg),
                pretrain_steps: steps,
            };
            let text = csv_string(&[row])?;
            match &common.out {
                Some(path) => std::fs::write(path, text)?,
                None => io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Sweep { config, common } => {
            let cfg = load_config(&config, &common)?;
            let report = harness::load_sweep(&cfg)?;
            emit(&report.rows(), common.out.as_deref())?;
        }
        Command::Compare { configs, common } => {
            let cfgs = configs
                .iter()
                .map(|p| load_config(p, &common))
                .collect::<Result<Vec<_>>>()?;
            let cmp = harness::compare(&cfgs)?;
            emit(&cmp.rows(), common.out.as_deref())?;
        }
    }
    Ok(())
}
