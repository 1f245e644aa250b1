use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod error;
mod fit;
mod io;
mod predict;
mod report;
mod simulate;
mod svg;

use error::Result;

/// Fit, predict and simulate generalized functional additive mixed models.
#[derive(Debug, Parser)]
#[command(name = "gfamm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; exits 0 on convergence, 2 when the optimizer did not converge.
    Fit {
        /// Long-format CSV with `curve,t,y` and covariate columns.
        #[arg(long)]
        data: PathBuf,
        /// Model configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated smoothing parameters to hold fixed; one extra
        /// trailing value fixes a free nuisance parameter.
        #[arg(long, value_delimiter = ',')]
        fixed_lambda: Option<Vec<f64>>,
        /// Level of the pointwise intervals (default 0.95).
        #[arg(long)]
        level: Option<f64>,
    },
    /// Run a simulation scenario and score every replicate.
    Simulate {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        replicates: usize,
        /// Base seed; replicate r uses seed + r.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long, env = "GFAMM_THREADS")]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        level: Option<f64>,
        /// Also write every replicate's data set as CSV.
        #[arg(long)]
        save_data: bool,
    },
    /// Evaluate a stored fit on new data.
    Predict {
        /// `fit.json` written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Model configuration whose column bindings describe the new data.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render term estimates and summaries from a results directory.
    Report {
        dir: PathBuf,
        /// Output directory (default: `<dir>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit { data, config, out, fixed_lambda, level } => {
            let converged = fit::run(fit::FitArgs { data: &data, config: &config, out: &out, fixed_lambda, level })?;
            if converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("warning: smoothing parameter optimization did not converge; results written");
                Ok(ExitCode::from(2))
            }
        }
        Command::Simulate { config, replicates, seed, threads, out, level, save_data } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| error::CliError::Input(format!("cannot start {n} threads: {e}")))?;
            }
            let failed = simulate::run(simulate::SimulateArgs {
                config: &config,
                replicates,
                seed,
                out: &out,
                level,
                save_data,
            })?;
            if failed > 0 {
                eprintln!("{failed} of {replicates} replicates failed; see the error column");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict { fit, data, out, config } => {
            let scores = predict::run(predict::PredictArgs { fit: &fit, data: &data, out: &out, config: config.as_deref() })?;
            if let Some(s) = scores {
                println!("deviance {}", io::fmt_float(s.deviance));
                if let Some(b) = s.brier {
                    println!("brier {}", io::fmt_float(b));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            for p in report::run(&dir, &out)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
