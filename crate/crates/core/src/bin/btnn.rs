use std::process::ExitCode;

use clap::Parser;

use btnn::cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("btnn: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
