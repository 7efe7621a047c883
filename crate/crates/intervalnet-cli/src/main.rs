//! Experiment command line: train runs from a config file, run the
//! verification suites, produce reports, and export universal weights.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime abort, 4 verification
//! failure.

mod run;

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use intervalnet::error::Error;
use intervalnet::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "intervalnet", version, about = "Interval-embedding continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full training experiment from a config file.
    Train {
        /// Path to the TOML experiment config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one verification suite (or all of them).
    Verify {
        /// containment | worstcase | lemma1 | lipschitz | relaxation |
        /// gradcheck | nonforgetting | all
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Emit interval-length histograms and summary for a completed run.
    Report {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Export the standalone universal-embedding weight checkpoint.
    ExportUniversal {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an exported universal checkpoint against a run's benchmark.
    EvalUniversal {
        /// Run directory (supplies the benchmark config).
        #[arg(long)]
        run: PathBuf,
        /// Universal checkpoint produced by export-universal.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_RUNTIME: i32 = 3;
const EXIT_VERIFY: i32 = 4;

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownSuite(_) | Error::BadSplit(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { config } => match run::cmd_train(&config) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
        Command::Report { run } => match run::cmd_report(&run) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        Command::ExportUniversal { run, out } => match run::cmd_export_universal(&run, &out) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        Command::EvalUniversal { run, checkpoint } => {
            match run::cmd_eval_universal(&run, &checkpoint) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code_for(&e)
                }
            }
        }
    };
    std::process::exit(code);
}

fn cmd_verify(suite_arg: &str, seed: u64) -> i32 {
    let suites: Vec<Suite> = if suite_arg == "all" {
        Suite::all().to_vec()
    } else {
        match Suite::from_str(suite_arg) {
            Ok(s) => vec![s],
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    };
    let mut all_pass = true;
    for suite in suites {
        match run_suite(suite, seed) {
            Ok(rep) => {
                println!(
                    "{} {}: trials={} failures={} worst_margin={:.6e} ({})",
                    if rep.pass { "PASS" } else { "FAIL" },
                    rep.suite,
                    rep.trials,
                    rep.failures,
                    rep.worst_margin,
                    rep.detail
                );
                all_pass &= rep.pass;
            }
            Err(e) => {
                eprintln!("error running {}: {e}", suite.name());
                return EXIT_RUNTIME;
            }
        }
    }
    if all_pass {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}
