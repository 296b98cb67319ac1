use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use trusttune::config::ExperimentConfig;
use trusttune::experiments::{self, Manifest, Pretrained};
use trusttune::Result;

#[derive(Parser)]
#[command(name = "trusttune", version, about = "Noise-regularized fine-tuning and representational-collapse experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, overriding run.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seeds run concurrently; TRUSTTUNE_DETERMINISTIC=1 forces 1.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-token pretraining of the encoder.
    Pretrain(Common),
    /// Fine-tune one method on one task for every seed.
    Finetune(Common),
    /// Seed distributions of every method.
    Stability(Common),
    /// Sequential chain with source-task probing.
    Chain(Common),
    /// Cyclic chain with next-task probing.
    Cycle(Common),
    /// Source fine-tune followed by probes of the other tasks.
    ProbeMatrix(Common),
    /// Gaussian KL pushforward checks.
    Theory(Common),
    /// Method x task table over finished finetune/stability runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &common.seeds {
        cfg.run.seeds = seeds.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.run.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrained(cfg: &ExperimentConfig) -> Result<Pretrained> {
    Pretrained::load(&cfg.checkpoint_path()?)
}

fn run(cli: Cli) -> Result<Option<Manifest>> {
    type Cmd = fn(&ExperimentConfig, &Pretrained, &std::path::Path) -> Result<Manifest>;
    let with_encoder = |common: &Common, f: Cmd| -> Result<Option<Manifest>> {
        let cfg = load(common)?;
        Ok(Some(f(&cfg, &pretrained(&cfg)?, &common.out)?))
    };
    match cli.command {
        Command::Pretrain(c) => Ok(Some(experiments::cmd_pretrain(&load(&c)?, &c.out)?)),
        Command::Finetune(c) => with_encoder(&c, experiments::cmd_finetune),
        Command::Stability(c) => with_encoder(&c, experiments::cmd_stability),
        Command::Chain(c) => with_encoder(&c, experiments::cmd_chain),
        Command::Cycle(c) => with_encoder(&c, experiments::cmd_cycle),
        Command::ProbeMatrix(c) => with_encoder(&c, experiments::cmd_probe_matrix),
        Command::Theory(c) => Ok(Some(experiments::cmd_theory(&load(&c)?, &c.out)?)),
        Command::Report { runs, out } => {
            let cells = experiments::cmd_report(&runs, &out)?;
            info!("report over {} cells written to {}", cells.len(), out.display());
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Some(m)) if !m.is_ok() => {
            eprintln!("error: {} failed: {}", m.command, m.failure.unwrap_or_default());
            ExitCode::from(1)
        }
        Ok(m) => {
            if let Some(m) = m {
                info!(
                    "{} finished: config {} ({} failed runs, {} xFP)",
                    m.command, m.config_hash, m.failed_runs, m.xfp
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
