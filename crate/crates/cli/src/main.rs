use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use tfqkd_cli::{execute, RunConfig};

fn main() -> ExitCode {
    let cfg = RunConfig::parse();
    match execute(&cfg) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.stdout.as_bytes()).is_err() {
                return ExitCode::from(tfqkd_cli::EXIT_IO as u8);
            }
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}
