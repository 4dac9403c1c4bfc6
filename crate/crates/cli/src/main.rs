use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modex_cli::commands::{cmd_eval, cmd_train};
use modex_cli::config::RunConfig;
use modex_cli::report::cmd_report;
use modex_cli::verify::{cmd_verify, SuiteConfig};
use modex_cli::CliError;

#[derive(Parser)]
#[command(name = "modex", version, about = "Courtroom-mixture evidential classifier: train, evaluate, verify, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt and history.csv
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured tasks
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the distribution identities on random parameters
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials that also run the Monte Carlo checks
        #[arg(long, default_value_t = 10)]
        mc_trials: usize,
    },
    /// Aggregate results files in a directory into report.md
    Report { results_dir: PathBuf },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let done = cmd_train(&cfg)?;
            println!("{}", done.checkpoint.display());
            println!("{}", done.history_path.display());
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            out,
        } => {
            let cfg = load(&config, seed, out)?;
            for r in cmd_eval(&cfg, &checkpoint)? {
                let value = r.headline().map_or("-".into(), |v| format!("{v:.2}"));
                println!("{:<20} {:<24} {value}", r.task, r.dataset);
            }
        }
        Command::Verify {
            trials,
            seed,
            mc_trials,
        } => {
            let suite = SuiteConfig {
                mc_trials,
                ..SuiteConfig::new(trials, seed)
            };
            let report = cmd_verify(&suite)?;
            if !report.passed() {
                return Err(CliError::VerifyFailed(report.failed_names().len()));
            }
        }
        Command::Report { results_dir } => print!("{}", cmd_report(&results_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("modex: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
