mod args;
mod commands;
mod data;
mod error;
mod manifest;

use clap::Parser;

/// Environment variable fixing the worker thread count.
const THREADS_VAR: &str = "CPT_THREADS";

fn init_threads() -> Result<(), error::CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| error::CliError::Precondition(format!("{THREADS_VAR}={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| error::CliError::Internal(e.to_string()))
}

fn main() {
    let cli = args::Cli::parse();
    let result = init_threads().and_then(|()| commands::run(cli.command));
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
