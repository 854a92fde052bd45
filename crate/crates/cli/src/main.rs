use std::process::ExitCode;

use clap::Parser;
use ela_cli::commands::{run, Cli};
use ela_cli::exit_code;

fn main() -> ExitCode {
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(exit_code(&result))
}
