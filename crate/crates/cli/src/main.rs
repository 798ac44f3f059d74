use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(name = "zcorr", version, about = "Joint mean, variance and correlation regression for clustered data")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that read a model config.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Data CSV, overriding `data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory, overriding `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restart seed, overriding `fit.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write estimates, a summary and the iteration trace.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Start from a previous `estimates.csv`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Likelihood ratio test of a null model nested in a full model.
    Lrt {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        null: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit a model and tabulate residual correlations by covariate distance.
    Correlogram {
        #[arg(long)]
        config: PathBuf,
        /// Numeric covariate whose pairwise distance defines the strata.
        #[arg(long)]
        covariate: String,
        /// Strata as `lo:hi` ranges separated by commas, e.g. `0:1,1:inf`.
        #[arg(long)]
        strata: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a dataset from a simulation design.
    Simulate {
        #[arg(long, value_enum)]
        design: DesignArg,
        /// Number of groups.
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Student-t degrees of freedom; Gaussian errors when absent.
        #[arg(long)]
        t_df: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in numerical diagnostics.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DesignArg {
    Study1,
    Study2I,
    Study2Ii,
    Study2Iii,
    Study2Iv,
    Study3,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors share the parse-error status
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Fit { config, init, overrides } => commands::fit(&config, init.as_deref(), &overrides),
        Command::Lrt { full, null, overrides } => commands::lrt(&full, &null, &overrides),
        Command::Correlogram {
            config,
            covariate,
            strata,
            overrides,
        } => commands::correlogram(&config, &covariate, strata.as_deref(), &overrides),
        Command::Simulate { design, n, seed, t_df, out } => commands::simulate(design, n, seed, t_df, &out),
        Command::Selfcheck { seed } => commands::selfcheck(seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
