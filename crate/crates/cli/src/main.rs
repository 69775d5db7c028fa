use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = distlab::cli::Cli::parse();
    match distlab::cli::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(distlab::cli::exit_code(&e))
        }
    }
}
