//! Command-line driver: simulated training runs, protocol cost sweeps and a
//! multi-process TCP demo.

mod bench;
mod config;
mod demo;
mod error;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{expand_config_file, RunArgs, RunMode};
use error::CliError;

/// Environment variable holding the log filter, e.g. `BASA_LOG=info`.
const LOG_ENV: &str = "BASA_LOG";

#[derive(Debug, Parser)]
#[command(name = "basa", version, about = "Buffered asynchronous secure aggregation toolkit", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a simulation, a cost sweep or the TCP demo.
    #[command(allow_negative_numbers = true)]
    Run(Box<RunArgs>),
    #[command(hide = true)]
    Aa(demo::AaArgs),
    #[command(hide = true)]
    Server(demo::ServerArgs),
    #[command(hide = true)]
    User(demo::UserArgs),
}

fn run(args: &RunArgs) -> Result<ExitCode, CliError> {
    match args.mode {
        RunMode::BasaAfl | RunMode::NosaAfl | RunMode::SyncFedavg => {
            let out = train::run(args)?;
            let o = &out.report.outcome;
            match o.time_to_target_s {
                Some(t) => println!("{}: target reached at {t:.3} s after {} rounds", o.mode, o.rounds),
                None => println!("{}: censored at {:.3} s after {} rounds", o.mode, o.simulated_time_s, o.rounds),
            }
            println!("summary: {}", out.summary_path.display());
            Ok(ExitCode::SUCCESS)
        }
        RunMode::BenchUserCost => {
            let (s, path) = bench::run(args)?;
            let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            println!(
                "per-user cost flat in N: {}, linear R2 {}, round quadratic R2 {}",
                s.flat_in_users,
                fmt(s.per_user_linear_r2),
                fmt(s.round_quadratic_r2)
            );
            println!("costs: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        RunMode::DemoTcp => {
            let (s, path) = demo::run(args)?;
            println!(
                "demo-tcp: {} round(s), aggregate {} the loopback run",
                s.tcp.len(),
                if s.matches { "matches" } else { "DIFFERS FROM" }
            );
            println!("summary: {}", path.display());
            Ok(if s.matches { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter(LOG_ENV)).init();
    let argv = match expand_config_file(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.render().to_string();
            let head: Vec<&str> = rendered.lines().take_while(|l| !l.is_empty()).map(str::trim).collect();
            eprintln!("{}", head.join(" "));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Aa(a) => demo::authority_main(a).map(|()| ExitCode::SUCCESS),
        Cmd::Server(a) => demo::server_main(a).map(|()| ExitCode::SUCCESS),
        Cmd::User(a) => demo::user_main(a).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
