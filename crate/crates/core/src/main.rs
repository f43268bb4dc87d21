use std::process::ExitCode;

use clap::Parser;
use zvrd::cli::{exit_code, init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zvrd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
