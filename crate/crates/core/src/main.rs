use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use blocksel::harness::{
    cmd_block_accuracy, cmd_block_importance, cmd_plot, cmd_report, cmd_run_ga, BlockImportanceOptions, RunConfig,
    RunGaOptions, RunGaOutcome,
};

#[derive(Parser)]
#[command(name = "blocksel", version, about = "GA block selection and OT block importance for CNN transfer")]
struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the toy CNN and synthetic datasets instead of the configured ones.
    #[arg(long, global = true)]
    toy: bool,
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Genetic block selection, final fine-tune and evaluation.
    RunGa {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Also fine-tune all blocks for comparison.
        #[arg(long)]
        all_ones_baseline: bool,
    },
    /// Optimal-transport importance of every block.
    BlockImportance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use a disjoint resample of the source as the target.
        #[arg(long)]
        null_target: bool,
    },
    /// Accuracy with each block fine-tuned on its own.
    BlockAccuracy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Comparison table of every run under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Re-render charts from the CSVs under a directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn resolve_config(cli: &Cli, config: Option<&Path>, output_dir: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (config, cli.toy) {
        (Some(path), false) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (Some(path), true) => {
            let loaded = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            RunConfig::toy(loaded.output_dir)
        }
        (None, true) => RunConfig::toy("runs/toy"),
        (None, false) => bail!("--config is required unless --toy is given"),
    };
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::RunGa {
            config,
            output_dir,
            all_ones_baseline,
        } => {
            let cfg = resolve_config(cli, config.as_deref(), output_dir.as_deref())?;
            let opts = RunGaOptions {
                all_ones_baseline: *all_ones_baseline || cli.toy,
                stop_after: None,
            };
            match cmd_run_ga(&cfg, &opts)? {
                RunGaOutcome::Completed(s) => {
                    println!(
                        "best genotype {} accuracy {:.4} trainable params {} ({})",
                        s.record.genotype,
                        s.record.accuracy,
                        s.record.trainable_params,
                        cfg.output_dir.display()
                    );
                    if let Some(b) = &s.all_ones {
                        println!("all blocks accuracy {:.4} trainable params {}", b.accuracy, b.trainable_params);
                    }
                }
                RunGaOutcome::Interrupted { generation } => println!("stopped after generation {generation}"),
            }
        }
        Command::BlockImportance {
            config,
            output_dir,
            null_target,
        } => {
            let cfg = resolve_config(cli, config.as_deref(), output_dir.as_deref())?;
            let report = cmd_block_importance(
                &cfg,
                &BlockImportanceOptions {
                    null_target: *null_target,
                },
            )?;
            for b in &report.blocks {
                println!("block {} BI {:.4}{}", b.block_id, b.bi, if b.degenerate { " (degenerate)" } else { "" });
            }
        }
        Command::BlockAccuracy { config, output_dir } => {
            let cfg = resolve_config(cli, config.as_deref(), output_dir.as_deref())?;
            let report = cmd_block_accuracy(&cfg)?;
            for b in &report.blocks {
                println!("block {} train BA {:.4} test BA {:.4}", b.block_id, b.train_acc, b.test_acc);
            }
        }
        Command::Report { dir } => {
            let out = cmd_report(dir)?;
            println!("{} runs -> {}", out.runs, out.markdown.display());
            for m in &out.missing {
                println!("missing: {m}");
            }
        }
        Command::Plot { dir } => {
            for p in cmd_plot(dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        blocksel::par::set_enabled(false);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
