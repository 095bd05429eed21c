use std::process::ExitCode;

use clap::Parser;
use divtt_cli::{output_root, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &output_root()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("divtt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
