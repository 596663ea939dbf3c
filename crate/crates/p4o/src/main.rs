use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p4o::commands::{self, compare_dir};
use p4o::config::parse_scalar;
use p4o::{CliError, CliResult, RunConfig};
use serde::Serialize;
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "p4o", version, about = "Recurrent PPO with a predictive-coding world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// p4o, p4o-no-pp, lstm-ppo-800 or lstm-ppo-1024.
    #[arg(long)]
    variant: Option<String>,
    /// pixel-catch, tmaze or external.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    batches: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    /// Any other setting, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics and checkpoints to `out`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Play full episodes with a trained agent.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Take the most probable action instead of sampling.
        #[arg(long)]
        deterministic: bool,
    },
    /// Report latent, prediction and error statistics of a trained agent.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Train two configurations over several seeds and test the difference.
    Compare {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference child process for `env = "external"`.
    #[command(hide = true)]
    StubEnv {
        #[arg(long, default_value_t = 18)]
        actions: usize,
        #[arg(long, num_args = 3, default_values_t = [3, 210, 160])]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        episode_len: usize,
        #[arg(long)]
        constant: bool,
    },
}

fn flags(run: &RunArgs) -> CliResult<Table> {
    let mut t = Table::new();
    if let Some(s) = run.seed {
        t.insert("seed".into(), Value::Integer(s as i64));
    }
    if let Some(v) = &run.variant {
        t.insert("variant".into(), Value::String(v.clone()));
    }
    if let Some(e) = &run.env {
        t.insert("env".into(), Value::String(e.clone()));
    }
    if let Some(b) = run.batches {
        t.insert("batches".into(), Value::Integer(b as i64));
    }
    if let Some(o) = &run.out {
        t.insert("out".into(), Value::String(o.display().to_string()));
    }
    if let Some(p) = run.precision {
        t.insert("precision".into(), Value::Integer(p.into()));
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        t.insert(k.trim().to_string(), parse_scalar(v.trim()));
    }
    Ok(t)
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = RunConfig::resolve(run.config.as_deref(), std::env::vars(), &flags(&run)?)?;
            print_json(&commands::train(&cfg, resume)?)
        }
        Command::Eval { checkpoint, episodes, deterministic } => {
            print_json(&commands::eval(&checkpoint, deterministic, episodes)?)
        }
        Command::Diagnose { checkpoint, steps } => {
            let report = commands::diagnose(&checkpoint, steps)?;
            if report.r_squared.is_none() {
                eprintln!("p4o: warning: R² undefined (no predictions or zero-variance latents)");
            }
            print_json(&report)
        }
        Command::Compare { config_a, config_b, seeds, out } => {
            let a = RunConfig::resolve(Some(&config_a), std::env::vars(), &Table::new())?;
            let b = RunConfig::resolve(Some(&config_b), std::env::vars(), &Table::new())?;
            let dir = out.unwrap_or_else(|| compare_dir(&a));
            let report = commands::compare(&a, &b, seeds, &dir)?;
            std::fs::write(dir.join("compare.json"), serde_json::to_string_pretty(&report)?)?;
            print_json(&report)
        }
        Command::StubEnv { actions, shape, episode_len, constant } => {
            let shape = [shape[0], shape[1], shape[2]];
            let stdin = std::io::stdin().lock();
            p4o::external::serve_stub(actions, shape, episode_len, constant, stdin, std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("p4o: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
