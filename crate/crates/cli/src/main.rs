//! `btm`: the condensation pipeline from the command line.
//!
//! Every subcommand reads the run configuration, works inside one output
//! directory and merges the files it wrote into `manifest.json` there.
//!
//! Exit codes: 0 success, 1 other failure (including failed certificates),
//! 2 usage or configuration error, 3 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use btm_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "btm", version, about = "Bezier trajectory matching for dataset condensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `condense.method`.
    #[arg(long, value_parser = ["btm", "mtt", "linear"])]
    pub method: Option<String>,
    /// Overrides `condense.ipc`.
    #[arg(long)]
    pub ipc: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train/val/test benchmark splits.
    GenData(Common),
    /// Train the teacher trajectories on the training split.
    TrainTeachers(Common),
    /// Fit a Bezier surrogate to every teacher.
    FitSurrogates(Common),
    /// Compare displacement spectra of SGD, Bezier and linear supervision.
    DiagnoseSpectrum(Common),
    /// Learn a synthetic dataset.
    Condense(Common),
    /// Evaluate the condensed set against the random-subset baseline.
    Evaluate(Common),
    /// Run the geometry certificates; fails unless all pass.
    VerifyTheory(Common),
    /// Print storage of SGD checkpoints versus Bezier surrogates.
    ReportStorage(Common),
    /// Run the full experiment suite.
    RunSuite(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainTeachers(_) => "train-teachers",
            Command::FitSurrogates(_) => "fit-surrogates",
            Command::DiagnoseSpectrum(_) => "diagnose-spectrum",
            Command::Condense(_) => "condense",
            Command::Evaluate(_) => "evaluate",
            Command::VerifyTheory(_) => "verify-theory",
            Command::ReportStorage(_) => "report-storage",
            Command::RunSuite(_) => "run-suite",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainTeachers(c)
            | Command::FitSurrogates(c)
            | Command::DiagnoseSpectrum(c)
            | Command::Condense(c)
            | Command::Evaluate(c)
            | Command::VerifyTheory(c)
            | Command::ReportStorage(c)
            | Command::RunSuite(c) => c,
        }
    }
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    /// Completed, but a check did not pass.
    ChecksFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // usage errors exit with status 2
    let cli = Cli::parse();
    let name = cli.command.name();
    let common = cli.command.common().clone();
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = match commands::Context::new(name, &common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::GenData(_) => commands::gen_data(&ctx),
        Command::TrainTeachers(_) => commands::train_teachers(&ctx),
        Command::FitSurrogates(_) => commands::fit_surrogates(&ctx),
        Command::DiagnoseSpectrum(_) => commands::diagnose_spectrum(&ctx),
        Command::Condense(_) => commands::condense(&ctx),
        Command::Evaluate(_) => commands::evaluate(&ctx),
        Command::VerifyTheory(_) => commands::verify_theory(&ctx),
        Command::ReportStorage(_) => commands::report_storage(&ctx),
        Command::RunSuite(_) => commands::run_suite(&ctx),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
