//! Command-line driver: loads a TOML configuration, runs verification
//! checks and writes JSON reports, CSV side files and a run manifest.

pub mod args;
pub mod checks;
pub mod run;

use clap::Parser;

pub use args::Cli;
pub use run::{execute, RunManifest};

/// Exit status: 0 when every check passes, 1 when a check fails, 2 on
/// errors (bad arguments or config, I/O, numerical failure).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
