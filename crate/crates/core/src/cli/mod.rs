//! Command-line front end: `simulate`, `fit`, `experiment`, `validate`.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O. Errors are
//! printed to stderr as a single JSON object.

mod commands;
pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_experiment, cmd_fit, cmd_simulate, cmd_validate};
pub use config::{Config, Overrides};

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "config", message: message.into() }
    }

    pub fn numerical(e: crate::AvemError) -> Self {
        Self { code: 3, kind: "numerical", message: e.to_string() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 4, kind: "io", message: format!("{}: {e}", path.display()) }
    }

    pub fn csv(e: csv::Error) -> Self {
        Self { code: 4, kind: "io", message: e.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "exit_code": self.code, "message": self.message }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "avem", version, about = "Anchored variational EM for mixed HMMs and mixed-effects state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalOpts,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Relative ELBO change at which iteration stops.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// avem, avem-closed-form, avem-laplace, avem-quadrature, pavem, qem or mcem.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Gauss–Hermite nodes per dimension (E-step quadrature, QEM and PAVEM grids).
    #[arg(long, global = true)]
    pub quad_nodes: Option<usize>,
    /// Prior draws per MCEM iteration.
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    /// Disable sign alignment of MESSM latent coordinates.
    #[arg(long, global = true)]
    pub no_sign_align: bool,
    /// Include wall-clock times in outputs (breaks byte-identical reruns).
    #[arg(long, global = true)]
    pub timings: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset with its truth files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit every configured method to a dataset CSV.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte Carlo grid and write `results.csv`.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an oracle suite: oracle-hmm, oracle-kalman, oracle-estep, oracle-qem, oracle-pavem or all.
    Validate { suite: String },
}

impl GlobalOpts {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            method: self.method.clone(),
            quad_nodes: self.quad_nodes,
            mc_samples: self.mc_samples,
            no_sign_align: self.no_sign_align,
        }
    }
}

fn load(path: &Path, g: &GlobalOpts) -> Result<Config, CliError> {
    let mut cfg = Config::load(path)?;
    g.overrides().apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { config, out } => {
            let cfg = load(config, g)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            cmd_simulate(&cfg, &dir)
        }
        Command::Fit { config, data, out } => {
            let cfg = load(config, g)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            cmd_fit(&cfg, data, &dir, g.threads, g.timings)
        }
        Command::Experiment { config, out } => {
            let cfg = load(config, g)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            cmd_experiment(&cfg, &dir, g.timings)
        }
        Command::Validate { suite } => {
            let (text, ok) = cmd_validate(suite, g.seed.unwrap_or(0))?;
            emit(&text);
            if ok {
                Ok(())
            } else {
                Err(CliError { code: 3, kind: "numerical", message: format!("suite {suite} exceeded its tolerance") })
            }
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            emit(&e.to_string());
            return 0;
        }
        Err(e) => {
            eprintln!("{}", CliError::config(e.to_string().trim_end()).to_json());
            return 2;
        }
    };
    let threads = cli.global.threads;
    match crate::par::with_threads(threads, || dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}
