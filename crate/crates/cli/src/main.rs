//! `rkhs-calib`: calibrate computer models with a control-dependent
//! calibration function, select the penalty by GCV, and emit confidence
//! bands, benchmark tables, and cross-validation summaries as CSV/JSON.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use rkhs_calib_core::CalibError;

fn exit_code_for(err: &CalibError) -> u8 {
    match err {
        CalibError::Usage(_) => 2,
        CalibError::Data(_) | CalibError::Domain(_) | CalibError::Parameter(_) | CalibError::Io(_) => 3,
        CalibError::Numeric(_) | CalibError::Infeasible(_) | CalibError::Aggregate(_) => 4,
        CalibError::NonConvergence(_) => 5,
    }
}

fn error_kind(err: &CalibError) -> &'static str {
    match err {
        CalibError::Usage(_) => "usage",
        CalibError::Data(_) | CalibError::Io(_) => "data",
        CalibError::Domain(_) => "domain",
        CalibError::Parameter(_) => "parameter",
        CalibError::Numeric(_) => "numeric",
        CalibError::Infeasible(_) => "infeasible",
        CalibError::Aggregate(_) => "aggregate",
        CalibError::NonConvergence(_) => "non-convergence",
    }
}

fn main() -> ExitCode {
    let cli = config::Cli::parse();
    let threads = cli.effective_threads();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{{\"error\":{{\"kind\":\"usage\",\"message\":\"thread pool: {e}\"}}}}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": error_kind(&err), "message": err.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
