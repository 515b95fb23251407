use std::process::ExitCode;

use clap::Parser;
use lidar_resample::cli::{exit_code, run, thread_limit, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_limit().and_then(|limit| {
        if let Some(n) = limit {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| lidar_resample::Error::Config(e.to_string()))?;
        }
        run(cli, &mut std::io::stdout().lock())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
