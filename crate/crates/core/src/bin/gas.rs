use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gas_core::cli::{error_record, load_config_for, run_command, Command, SummaryRow};
use gas_core::Error;

/// Data-free distillation experiments.
#[derive(Parser)]
#[command(name = "gas", version)]
struct Args {
    /// train-teacher, distill, evaluate, gradcheck, exp-fig1, exp-modes,
    /// exp-mnist, exp-cartpole or exp-mountaincar
    subcommand: String,
    /// JSON run config
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the config's seed list
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_aggregates(rows: &[SummaryRow]) {
    println!("{:<14} {:<16} {:<22} {:>12} {:>12}", "method", "task", "metric", "mean", "std");
    let means = rows.iter().filter(|r| r.run_id == "mean");
    for m in means {
        let std = rows
            .iter()
            .find(|r| r.run_id == "std" && r.method == m.method && r.task == m.task && r.metric == m.metric)
            .map_or(0.0, |r| r.value);
        println!("{:<14} {:<16} {:<22} {:>12.4} {:>12.4}", m.method, m.task, m.metric, m.value, std);
    }
}

fn fail(command: &str, out: Option<&PathBuf>, err: &Error) -> ExitCode {
    let record = error_record(command, err);
    eprintln!("{record}");
    if let Some(dir) = out.filter(|d| d.is_dir()) {
        let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
    }
    ExitCode::from(if matches!(err, Error::Config(_)) { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let Some(command) = Command::parse(&args.subcommand) else {
        let names: Vec<_> = Command::ALL.iter().map(|c| c.name()).collect();
        let err = Error::Config(format!("unknown subcommand `{}`; expected one of {}", args.subcommand, names.join(", ")));
        return fail(&args.subcommand, None, &err);
    };
    let mut cfg = match load_config_for(&args.config, Some(command)) {
        Ok(c) => c,
        Err(e) => return fail(command.name(), args.out.as_ref(), &e),
    };
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    match run_command(&cfg) {
        Ok(rows) => {
            print_aggregates(&rows);
            ExitCode::SUCCESS
        }
        Err(e) => fail(command.name(), Some(&cfg.out_dir), &e),
    }
}
