use std::process::ExitCode;

use clap::Parser;

use iqdet_cli::{run, Cli, EXIT_INPUT};

/// Caps rayon's worker count when `IQDET_THREADS` is set.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("IQDET_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("IQDET_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("IQDET_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("iqdet: {msg}");
        return ExitCode::from(EXIT_INPUT as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iqdet: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
