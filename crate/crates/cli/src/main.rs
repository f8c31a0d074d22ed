use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use transport_cli::{run, RunConfig, INPUT_ERROR};

fn main() -> ExitCode {
    let cfg = RunConfig::parse();
    match run(&cfg) {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(report.stdout.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(INPUT_ERROR);
            }
            ExitCode::from(report.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(INPUT_ERROR)
        }
    }
}
