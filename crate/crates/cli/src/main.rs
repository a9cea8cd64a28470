use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ecam_cli::Cli::parse();
    match ecam_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ecam_cli::exit_code(&e))
        }
    }
}
