use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmhe_bench::experiment::{compare_fir, sweep_lambda, ExperimentSpec, Prepared};
use mmhe_bench::reports::{bound_report, riccati_report, rpi_csv, rpi_report, DEFAULT_GRID};
use mmhe_bench::scenario::vehicle_scenario;
use mmhe_bench::{BenchError, Result};
use mmhe_core::riccati::MonotonicityMode;

const EXIT_PROPERTY: u8 = 4;

#[derive(Parser)]
#[command(name = "mmhe", about = "Metamorphic moving-horizon estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (JSON); defaults to the built-in vehicle scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenarios: Option<usize>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Φ monotonicity in λ for the augmented Riccati recursion.
    RiccatiReport {
        #[command(flatten)]
        common: Common,
        /// Compare steady-state solutions instead of fixed-step iterates.
        #[arg(long)]
        steady_state: bool,
    },
    /// Outer invariant box for the observer error.
    Rpi {
        #[command(flatten)]
        common: Common,
    },
    /// One scenario, full trajectory log.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// ARMSE per λ plus the FIR baseline.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Per-scenario RMSE of the configured estimator and FIR.
    CompareFir {
        #[command(flatten)]
        common: Common,
    },
    /// Error-bound constants over λ for the initial-state estimator.
    BoundReport {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_json(&std::fs::read_to_string(path)?)?,
            None => vehicle_scenario(),
        };
        if let Some(seed) = self.seed {
            spec.base_seed = seed;
        }
        if let Some(n) = self.scenarios {
            spec.scenarios = n;
        }
        Ok(spec)
    }

    fn grid(&self, default: &[f64]) -> Vec<f64> {
        self.lambda.clone().unwrap_or_else(|| default.to_vec())
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text)?,
            None => print!("{text}"),
        }
        Ok(())
    }
}

/// `Ok(false)` signals a failed property check.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::RiccatiReport { common, steady_state } => {
            let mode = if steady_state { MonotonicityMode::SteadyState } else { MonotonicityMode::FixedInitial };
            let report = riccati_report(&common.spec()?, &common.grid(&DEFAULT_GRID), mode)?;
            common.emit(&report.to_csv())?;
            Ok(report.pass)
        }
        Command::Rpi { common } => {
            common.emit(&rpi_csv(&rpi_report(&common.spec()?)?))?;
            Ok(true)
        }
        Command::Run { common } => {
            let mut spec = common.spec()?;
            if let Some(l) = common.lambda.as_deref().and_then(|g| g.first()) {
                spec.estimator = spec.estimator.with_lambda(*l)?;
            }
            let log = Prepared::new(&spec)?.run_scenario(0)?;
            common.emit(&log.to_csv())?;
            Ok(true)
        }
        Command::Sweep { common } => {
            let table = sweep_lambda(&common.spec()?, &common.grid(&[0.0, 0.25, 0.5, 0.75]))?;
            common.emit(&table.to_csv())?;
            Ok(table.monotone_decreasing)
        }
        Command::CompareFir { common } => {
            let mut spec = common.spec()?;
            if let Some(l) = common.lambda.as_deref().and_then(|g| g.first()) {
                spec.estimator = spec.estimator.with_lambda(*l)?;
            }
            common.emit(&compare_fir(&spec)?.to_csv())?;
            Ok(true)
        }
        Command::BoundReport { common } => {
            let report = bound_report(&common.spec()?, &common.grid(&DEFAULT_GRID))?;
            common.emit(&report.to_csv())?;
            Ok(report.decay_pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PROPERTY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &BenchError) -> u8 {
    e.exit_code() as u8
}
