use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use multigrpo::harness::{self, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "multigrpo", version, about = "Tree-structured GRPO alignment of toy rectified flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Flat key = value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Flow-matching pretraining; writes the checkpoint and loss curve.
    Pretrain(Common),
    /// GRPO alignment from `checkpoint`; writes metrics and checkpoints.
    Align(Common),
    /// Leaf diversity per single branch step.
    Diversity(Common),
    /// Per-step noise coefficients for each configured step count.
    NoiseTable(Common),
    /// Paired alignment runs over schedules and/or reward weights.
    Ablate(Common),
    /// Samples from `checkpoint` and reports mean rewards.
    Eval(Common),
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let config = load_config(&c)?;
            harness::run_pretrain(&config, &c.out).context("pretrain")?;
            println!("pretrained checkpoint written under {}", c.out.display());
        }
        Command::Align(c) => {
            let config = load_config(&c)?;
            let (_, log) = harness::run_align(&config, &c.out).context("align")?;
            if let Some(last) = log.last() {
                println!("iteration {}: mean reward {:?}", last.iteration, last.mean_reward);
            }
        }
        Command::Diversity(c) => {
            let config = load_config(&c)?;
            for row in harness::run_diversity(&config, &c.out).context("diversity")? {
                println!("branch step {:>3}: diversity {:.4} +- {:.4}", row.branch_step, row.mean, row.std);
            }
        }
        Command::NoiseTable(c) => {
            let config = load_config(&c)?;
            let rows = harness::run_noise_table(&config, &c.out).context("noise-table")?;
            println!("{} rows written under {}", rows.len(), c.out.display());
        }
        Command::Ablate(c) => {
            let config = load_config(&c)?;
            for run in harness::run_ablate(&config, &c.out).context("ablate")? {
                println!("{}: {:?} -> {:?}", run.name, run.initial_mean_reward, run.final_mean_reward);
            }
        }
        Command::Eval(c) => {
            let config = load_config(&c)?;
            let report = harness::run_eval(&config, &c.out).context("eval")?;
            println!(
                "{} {} samples: mean reward {:?}, mode hit rate {:.3}",
                report.samples, report.sampler, report.mean_reward, report.mode_hit_rate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|e| e.downcast_ref::<multigrpo::Error>())
                .map_or("error", multigrpo::Error::category);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(match category {
                "config" | "schedule" => 2,
                "io" | "format" => 3,
                "numeric" => 4,
                _ => 1,
            })
        }
    }
}
