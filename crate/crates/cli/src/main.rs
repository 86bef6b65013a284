mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "didact",
    version,
    about = "Tutoring episodes with a privileged teacher, leakage audits and a meta-RL lab"
)]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Problem set (JSON lines)
    #[arg(long, global = true, value_name = "PATH")]
    pub problems: Option<PathBuf>,
    /// Episode mode
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Maximum student attempts per episode
    #[arg(long, global = true, value_name = "N")]
    pub max_turns: Option<u32>,
    /// Batch seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent episodes
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Export view
    #[arg(long, global = true, value_enum)]
    pub view: Option<ViewArg>,
    /// Trajectory store (defaults to <out>/trajectories.jsonl)
    #[arg(long, global = true, value_name = "PATH")]
    pub store: Option<PathBuf>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Didactic,
    Single,
    Autodidact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Student,
    Worldmodel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and print its record
    Run {
        #[arg(long)]
        problem_id: String,
    },
    /// Run every problem, store trajectories and write the accuracy curve
    Bench,
    /// Re-check stored teacher turns for leakage, with the judge if configured
    Audit,
    /// Write training examples from the store
    Export {
        /// Keep only solved episodes
        #[arg(long)]
        solved_only: bool,
    },
    /// Accuracy curves and summary from the store
    Report,
    /// Number-guessing meta-RL lab
    Lab {
        #[command(subcommand)]
        command: LabCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Rl2f,
    Single,
}

#[derive(Debug, Subcommand)]
pub enum LabCommand {
    /// Train a tabular policy and write theta.json and learning_curve.csv
    Train {
        #[arg(long, value_enum, default_value = "rl2f")]
        regime: RegimeArg,
        /// Size of the answer space
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 500_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Evaluate a trained policy and print its accuracy curve
    Eval {
        #[arg(long, value_name = "PATH")]
        theta: PathBuf,
        /// World model for autodidact evaluation
        #[arg(long, value_name = "PATH")]
        phi: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        episodes: usize,
    },
    /// Fit a world model on didactic episodes of a policy
    WorldModel {
        /// Behavior policy (uniform guessing when omitted)
        #[arg(long, value_name = "PATH")]
        theta: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 2_000_000)]
        episodes: usize,
        #[arg(long, default_value_t = 2.0)]
        lr: f64,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Train both regimes over several seeds and compare them
    Ordering {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 500_000)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 20_000)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
