use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sinkauction_cli::commands::{self, CliError};
use sinkauction_cli::{ConfigError, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "sinkauction", about = "Learn and evaluate auction mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` for training and `eval.seed` otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for evaluation. Training always runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Train a mechanism and write metrics and a checkpoint.
    Train,
    /// Measure revenue and regret of a checkpoint.
    Evaluate,
    /// Revenue of VCG and the known optimal mechanism.
    Baseline,
    /// Allocation grid of a single-bidder two-item checkpoint.
    Heatmap,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(ck) = &cli.checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    if cli.threads == 0 {
        return Err(ConfigError::InvalidValue {
            key: "threads".into(),
            value: "0".into(),
            reason: "must be at least 1".into(),
        }
        .into());
    }
    cfg.eval.regret.threads = cli.threads;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => cfg.train.seed = seed,
            _ => cfg.eval.seed = seed,
        }
    }
    if cli.config.is_none() && cli.command != Command::Train && cli.command != Command::Baseline {
        // Without a config file, inherit the one stored in the checkpoint.
        let stored = sinkauction_cli::checkpoint::load(&commands::checkpoint_path(&cfg))?.config;
        let mut merged = stored;
        merged.out_dir = cfg.out_dir;
        merged.checkpoint = cfg.checkpoint;
        merged.eval.regret.threads = cfg.eval.regret.threads;
        if cli.seed.is_some() {
            merged.eval.seed = cfg.eval.seed;
        }
        cfg = merged;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Train => {
            println!("{}", commands::METRICS_HEADER);
            commands::train(&cfg, |m| {
                println!(
                    "{},{:.6},{:.6},{},{:.4},{:.1}",
                    m.epoch, m.revenue_mean, m.regret_mean, m.rho, m.lambda_mean, m.seconds
                )
            })?;
            println!("checkpoint: {}", commands::checkpoint_path(&cfg).display());
        }
        Command::Evaluate => {
            let rep = commands::run_evaluate(&cfg)?;
            print!("{}", commands::report_body(&rep));
        }
        Command::Baseline => {
            let rows = commands::run_baseline(&cfg)?;
            let d = cfg.demand();
            println!("{}x{} {:?}-{} over {} samples", d.n, d.m, d.kind, d.k, cfg.baseline_samples);
            for r in rows {
                println!("{:<18} {:.4}", r.mechanism, r.revenue);
            }
        }
        Command::Heatmap => {
            let path = commands::run_heatmap(&cfg)?;
            println!("heatmap: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
