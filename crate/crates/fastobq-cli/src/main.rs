use std::process::ExitCode;

use clap::Parser;
use fastobq_cli::cli::{self, Cli};

fn main() -> ExitCode {
    let parsed = Cli::parse();
    if let Err(e) = cli::configure_threads() {
        eprintln!("fastobq: {e}");
        return ExitCode::from(2);
    }
    match cli::run(parsed) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("fastobq: {e}");
            ExitCode::from(cli::exit_code_for(&e))
        }
    }
}
