//! Command-line entry point for training, evaluation, transfer studies,
//! curricula, fine-tuning, and the ablation grid.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use transfqmix_core::config::ExperimentConfig;
use transfqmix_core::model::ModelFamily;
use transfqmix_core::runtime::{run_experiment, Command, StageSpec};

#[derive(Parser)]
#[command(
    name = "transfqmix",
    about = "TransfQMix: transformer agents and mixer for cooperative Q-learning on Spread",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// TOML config file; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all rng streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root directory (default: $TRANSFQMIX_RUNS, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Blank wall-clock columns so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Scenario, e.g. spread:3.
    #[arg(long, global = true)]
    scenario: Option<String>,

    /// Model family: transfqmix, qmix, qmix_graph_state,
    /// qmix_transformer_mixer, or transformer_agents.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Total env steps (per stage for curriculum).
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; `--load` resumes a checkpoint with its counters.
    Train {
        #[arg(long)]
        load: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint (or fresh weights without `--load`).
    Eval {
        #[arg(long)]
        load: Option<PathBuf>,
    },
    /// POL grid: each loaded checkpoint evaluated on each scenario.
    ZeroShot {
        /// Checkpoint to include as a grid row; repeatable.
        #[arg(long = "load", required = true)]
        loads: Vec<PathBuf>,
        /// Comma-separated list, default spread:3,spread:4,spread:5,spread:6.
        #[arg(long)]
        scenarios: Option<String>,
    },
    /// Sequential training over scenarios, carrying parameters across stages.
    Curriculum {
        /// Comma-separated stages, e.g. spread:3,spread:4=200000.
        #[arg(long)]
        stages: String,
    },
    /// Continue training a checkpoint on a new scenario with fresh
    /// optimizer, buffer, and exploration.
    FineTune {
        #[arg(long)]
        load: PathBuf,
    },
    /// Train the four baseline variants from one base config.
    Ablate,
}

fn build_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = Some(out.clone());
    }
    if cli.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(scenario) = &cli.scenario {
        cfg.run.scenario = scenario.clone();
    }
    if let Some(model) = &cli.model {
        cfg.run.model = model
            .parse::<ModelFamily>()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    if let Some(steps) = cli.steps {
        cfg.train.total_env_steps = steps;
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = build_config(&cli)?;
    let command = match &cli.cmd {
        Cmd::Train { load } => Command::Train { load: load.clone() },
        Cmd::Eval { load } => Command::Eval { load: load.clone() },
        Cmd::ZeroShot { loads, scenarios } => {
            let scenarios = scenarios
                .as_deref()
                .map(|s| s.split(',').map(str::to_string).collect())
                .unwrap_or_default();
            Command::ZeroShot { loads: loads.clone(), scenarios }
        }
        Cmd::Curriculum { stages } => {
            let mut parsed = Vec::new();
            for item in stages.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    bail!("empty stage in --stages '{stages}'");
                }
                parsed.push(StageSpec::parse(item).map_err(|e| anyhow::anyhow!("{e}"))?);
            }
            Command::Curriculum { stages: parsed }
        }
        Cmd::FineTune { load } => Command::FineTune { load: load.clone() },
        Cmd::Ablate => Command::Ablate,
    };
    let outcome = run_experiment(cfg, command).map_err(|e| anyhow::anyhow!("{e}"))?;
    for line in &outcome.lines {
        println!("{line}");
    }
    Ok(())
}
