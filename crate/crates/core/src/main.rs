use std::process::ExitCode;

use clap::Parser;
use mscib::cli::{execute, Cli};

fn main() -> ExitCode {
    // clap exits with 0 for --help/--version and 2 for usage errors
    let cli = Cli::parse();
    match execute(cli.command, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
