use std::process::ExitCode;

use clap::Parser;
use hypoflow_cli::{error_record, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYPOFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
