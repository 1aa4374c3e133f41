mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, Ieee13Action};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 64;

fn run(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Analyze(a) => commands::cmd_analyze(cli, a),
        Command::Simulate(a) => commands::cmd_simulate(cli, a),
        Command::Sweep(a) => commands::cmd_sweep(cli, a),
        Command::Export(a) => commands::cmd_export(cli, a),
        Command::Ieee13 {
            action: Ieee13Action::Gen(a),
        } => commands::cmd_ieee13(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DROOPSTAB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
