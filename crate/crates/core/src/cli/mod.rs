//! Command-line front end: `qsdlab run | compare | selftest`.

pub mod compare;
pub mod config;
pub mod run;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::QsdError;

pub use compare::{compare_dirs, CompareReport, PairReport};
pub use config::{parse_config, Backend, RunConfig, CONFIG_HELP};
pub use run::{run, simulate, simulate_trajectory, Manifest, TrajectoryOutput, TrajectoryStats};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "qsdlab", version, about = "Quantum state diffusion for the forced, damped Duffing oscillator")]
#[command(after_help = "Set QSDLAB_THREADS to cap the number of worker threads.\n\
Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured backend and write one section CSV per trajectory.
    #[command(after_help = CONFIG_HELP)]
    Run {
        /// Configuration file.
        config: PathBuf,
    },
    /// Compare the sections of two run directories and print a JSON report.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Run quick consistency checks.
    Selftest,
}

fn exit_code(e: &QsdError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn report(e: &QsdError) -> i32 {
    eprintln!("qsdlab: {e}");
    exit_code(e)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { config } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("qsdlab: cannot read {}: {e}", config.display());
                    return EXIT_USAGE;
                }
            };
            let cfg = match parse_config(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("qsdlab: {}: {e}", config.display());
                    return EXIT_USAGE;
                }
            };
            let threads = match run::thread_count_from_env() {
                Ok(t) => t,
                Err(e) => return report(&e),
            };
            match run(&cfg, threads) {
                Ok(m) => {
                    println!(
                        "wrote {} section file(s) and {} to {}",
                        m.trajectories.len(),
                        run::MANIFEST_FILE,
                        cfg.output_dir.display()
                    );
                    if m.validity_breakdown == Some(true) {
                        eprintln!("qsdlab: warning: linearized closure left its range of validity");
                    }
                    EXIT_OK
                }
                Err(e) => report(&e),
            }
        }
        Command::Compare { dir_a, dir_b } => match compare_dirs(&dir_a, &dir_b) {
            Ok(r) => {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                EXIT_OK
            }
            Err(e) => report(&e),
        },
        Command::Selftest => match selftest::run_selftest() {
            Ok(checks) => {
                let mut ok = true;
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                    ok &= c.passed;
                }
                if ok {
                    EXIT_OK
                } else {
                    EXIT_NUMERICAL
                }
            }
            Err(e) => report(&e),
        },
    }
}
