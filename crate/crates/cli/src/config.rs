//! Flag surface of the CLI. Numeric flags parse locale-independently via
//! the standard float parser; mutually required flags are validated before
//! any computation starts.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "rkhs-calib",
    version,
    about = "Nonparametric functional calibration of computer models"
)]
pub struct Cli {
    /// Worker threads (default: machine parallelism). Mirrors RKHS_CALIB_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn effective_threads(&self) -> usize {
        self.threads
            .or_else(|| {
                std::env::var("RKHS_CALIB_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(0) // rayon: 0 means default parallelism
    }
}

/// Where the computer model comes from: a bundled analytic setting or a
/// trained emulator file.
#[derive(Args, Debug, Clone)]
pub struct ModelSource {
    /// Builtin model name: sim1, sim2, sim3, sim4.
    #[arg(long, conflicts_with = "emulator")]
    pub model: Option<String>,

    /// Trained emulator JSON file (user models enter through this path).
    #[arg(long)]
    pub emulator: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the calibration function on physical data.
    Calibrate {
        /// Physical data CSV with header x1,...,xd,y1,...,yr.
        #[arg(long)]
        physical: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        /// Kernel spec: `matern:<upsilon>:<phi>`, `cubic`, `sqexp:<ls,...>:<var>`.
        #[arg(long, default_value = "cubic")]
        kernel: String,
        /// Penalty: a positive number, or `gcv` to select it on the default grid.
        #[arg(long, default_value = "gcv")]
        lambda: String,
        /// Control-variable domain `lo,hi` (default: data range).
        #[arg(long)]
        domain: Option<String>,
        /// Subtract a constant from the physical responses so their mean
        /// matches these simulated runs over the common x-range (CSV).
        #[arg(long)]
        mean_shift: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output estimate JSON.
        #[arg(long)]
        out: PathBuf,
    },

    /// Scan GCV over a λ grid and emit `lambda,gcv,edf,sigma2` CSV.
    GcvScan {
        #[arg(long)]
        physical: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value = "cubic")]
        kernel: String,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate a saved estimate's plug-in predictions on a grid.
    Predict {
        /// Estimate JSON produced by `calibrate`.
        #[arg(long)]
        estimate: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        /// Number of grid cells over the domain.
        #[arg(long, default_value_t = 200)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Pointwise confidence bands for θ and/or the prediction.
    Uq {
        #[arg(long)]
        physical: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        estimate: PathBuf,
        /// Band target: theta, prediction, or both.
        #[arg(long, default_value = "both")]
        target: String,
        /// Comma-separated confidence levels.
        #[arg(long, default_value = "0.9")]
        levels: String,
        /// Override the diffuse-prior scale ρ.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 200)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Reproduce a benchmark table over seeded replications.
    Simulate {
        #[arg(long)]
        setting: u8,
        /// Comma-separated methods: const,param-exp,param-quad,rkhs-cubic.
        #[arg(long, default_value = "const,param-exp,param-quad,rkhs-cubic")]
        methods: String,
        /// cc (cheap code) or ec (emulator).
        #[arg(long, default_value = "cc")]
        code: String,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Train a GP emulator from computer runs (CSV x1..xd,t1..tq,y1..yr).
    Emulate {
        #[arg(long)]
        runs: PathBuf,
        /// Relative diagonal jitter.
        #[arg(long, default_value_t = 1e-8)]
        jitter: f64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Leave-C-out cross-validated absolute prediction error.
    Cv {
        #[arg(long)]
        physical: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        /// Method name: const, param-exp, param-quad, rkhs-cubic.
        #[arg(long, default_value = "rkhs-cubic")]
        method: String,
        /// Leave-out size (1 or 2).
        #[arg(long, default_value_t = 1)]
        c: usize,
        /// Random pairs when c = 2.
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long)]
        mean_shift: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}
