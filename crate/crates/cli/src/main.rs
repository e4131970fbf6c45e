use std::path::PathBuf;
use std::process::ExitCode;

use bilab_cli::config::{Experiment, ExperimentConfig};
use bilab_cli::{init_threads, resolve, run, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilab", about = "Induction-head lab experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a JSON config.
    Run {
        /// Config file (same as --config).
        config_pos: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set train.eta=0.2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the full default config of an experiment.
    Defaults {
        #[arg(value_parser = parse_experiment)]
        experiment: Experiment,
    },
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    serde_json::from_value(serde_json::json!(s)).map_err(|e| e.to_string())
}

fn fail(e: CliError, out: Option<&std::path::Path>) -> ExitCode {
    let rep = serde_json::to_string(&e.report()).unwrap_or_default();
    eprintln!("{rep}");
    if let Some(dir) = out {
        if dir.is_dir() {
            let _ = std::fs::write(dir.join("error.json"), format!("{rep}\n"));
        }
    }
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Defaults { experiment } => {
            let c = ExperimentConfig::defaults(experiment);
            println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
            ExitCode::SUCCESS
        }
        Cmd::Run {
            config_pos,
            config,
            sets,
            out,
            seed,
        } => {
            if config_pos.is_some() && config.is_some() {
                return fail(CliError::schema("--config", "config given twice"), None);
            }
            if let Err(e) = init_threads(std::env::var("BIL_THREADS").ok()) {
                return fail(e, None);
            }
            let path = config.or(config_pos);
            let cfg = match resolve(path.as_deref(), &sets, seed, out) {
                Ok(c) => c,
                Err(e) => return fail(e, None),
            };
            match run(&cfg) {
                Ok(summary) => {
                    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e, Some(&cfg.output_dir)),
            }
        }
    }
}
