use std::process::ExitCode;

use atop_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            println!("run directory: {}", outcome.run_dir.display());
            for a in outcome.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err((e, _)) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.record(cli.command.name()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
