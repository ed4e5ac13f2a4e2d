mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Outcome;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Exit(code, msg)) => {
            eprintln!("afr: {msg}");
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("afr: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
