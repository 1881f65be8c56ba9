//! Execution of the parsed subcommands: load inputs, run the library,
//! persist artifacts with provenance.

use std::path::PathBuf;

use rkhs_calib_core::calibrate::{fit, FitOptions};
use rkhs_calib_core::emulator::{train_emulator, EmulatorOptions};
use rkhs_calib_core::harness::{loo_cv, mean_shift_align, run_setting, CodeMode, Method};
use rkhs_calib_core::io::{
    load_emulator, load_estimate, read_physical_csv, read_runs_csv, save_emulator, save_estimate,
    write_band_csv, write_gcv_csv, write_table_csv, Provenance,
};
use rkhs_calib_core::kernel::Kernel;
use rkhs_calib_core::model::builtin;
use rkhs_calib_core::select::{default_lambda_grid, linearize, select_lambda};
use rkhs_calib_core::uq::{default_rho, UqEngine};
use rkhs_calib_core::{CalibError, ComputerModel, PhysicalDataset, Result};

use crate::config::{Cli, Command, ModelSource};

fn parse_domain(spec: &Option<String>) -> Result<Option<(f64, f64)>> {
    match spec {
        None => Ok(None),
        Some(s) => {
            let parts: Vec<&str> = s.split(',').collect();
            if parts.len() != 2 {
                return Err(CalibError::Usage(format!("--domain expects `lo,hi`, got `{s}`")));
            }
            let lo: f64 = parts[0]
                .trim()
                .parse()
                .map_err(|_| CalibError::Usage(format!("bad domain bound `{}`", parts[0])))?;
            let hi: f64 = parts[1]
                .trim()
                .parse()
                .map_err(|_| CalibError::Usage(format!("bad domain bound `{}`", parts[1])))?;
            if !(lo < hi) {
                return Err(CalibError::Usage("--domain needs lo < hi".into()));
            }
            Ok(Some((lo, hi)))
        }
    }
}

enum LoadedModel {
    Builtin(rkhs_calib_core::BuiltinModel, u8),
    Emulator(rkhs_calib_core::Emulator),
}

impl LoadedModel {
    fn as_dyn(&self) -> &dyn ComputerModel {
        match self {
            LoadedModel::Builtin(m, _) => m,
            LoadedModel::Emulator(m) => m,
        }
    }

    fn describe(&self) -> String {
        match self {
            LoadedModel::Builtin(_, id) => format!("sim{id}"),
            LoadedModel::Emulator(_) => "emulator".to_string(),
        }
    }
}

fn load_model(source: &ModelSource) -> Result<LoadedModel> {
    match (&source.model, &source.emulator) {
        (Some(name), None) => {
            let id: u8 = name
                .strip_prefix("sim")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    CalibError::Usage(format!("unknown model `{name}`; expected sim1..sim4"))
                })?;
            let (model, _) = builtin(id)?;
            Ok(LoadedModel::Builtin(model, id))
        }
        (None, Some(path)) => Ok(LoadedModel::Emulator(load_emulator(path)?)),
        (None, None) => Err(CalibError::Usage(
            "missing model: pass --model sim1..sim4 or --emulator <file>".into(),
        )),
        (Some(_), Some(_)) => Err(CalibError::Usage(
            "--model and --emulator are mutually exclusive".into(),
        )),
    }
}

fn apply_mean_shift(
    data: PhysicalDataset,
    runs: &Option<PathBuf>,
) -> Result<(PhysicalDataset, Option<f64>)> {
    match runs {
        None => Ok((data, None)),
        Some(path) => {
            let (inputs, outputs, _, _) = read_runs_csv(path)?;
            let sim_xs: Vec<f64> = (0..inputs.nrows()).map(|i| inputs[(i, 0)]).collect();
            let sim_ys: Vec<f64> = (0..outputs.nrows()).map(|i| outputs[(i, 0)]).collect();
            let (shifted, shift) = mean_shift_align(&data, &sim_xs, &sim_ys)?;
            Ok((shifted, Some(shift)))
        }
    }
}

fn parse_levels(spec: &str) -> Result<Vec<f64>> {
    let levels: Vec<f64> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CalibError::Usage(format!("bad level `{t}`")))
        })
        .collect::<Result<_>>()?;
    if levels.is_empty() || levels.iter().any(|&l| !(0.0 < l && l < 1.0)) {
        return Err(CalibError::Usage("levels must lie in (0,1)".into()));
    }
    Ok(levels)
}

fn grid_over(domain: (f64, f64), cells: usize) -> Vec<f64> {
    rkhs_calib_core::harness::midpoint_grid(domain, cells.max(2))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate {
            physical,
            source,
            kernel,
            lambda,
            domain,
            mean_shift,
            seed,
            out,
        } => {
            let model = load_model(&source)?;
            let dom = parse_domain(&domain)?;
            let data = read_physical_csv(&physical, dom)?;
            let (data, shift) = apply_mean_shift(data, &mean_shift)?;
            let kern = Kernel::parse(&kernel, Some(data.domain()))?;
            let opts = FitOptions { seed, ..Default::default() };
            let estimate = if lambda == "gcv" {
                select_lambda(&data, model.as_dyn(), &kern, &default_lambda_grid(), &opts)?.estimate
            } else {
                let lam: f64 = lambda
                    .parse()
                    .map_err(|_| CalibError::Usage(format!("--lambda expects a number or `gcv`, got `{lambda}`")))?;
                fit(&data, model.as_dyn(), &kern, lam, &opts)?
            };
            let mut config = format!(
                "calibrate --physical {} --model {} --kernel {} --lambda {}",
                physical.display(),
                model.describe(),
                kernel,
                lambda
            );
            if let Some(s) = shift {
                config.push_str(&format!(" [mean-shift {s}]"));
            }
            save_estimate(&out, &estimate, &Provenance::new(config, Some(seed)))?;
            println!(
                "calibrated: lambda = {:.6e}, objective = {:.6e}, converged = {}",
                estimate.lambda, estimate.report.objective, estimate.report.converged
            );
            Ok(())
        }

        Command::GcvScan {
            physical,
            source,
            kernel,
            domain,
            seed,
            out,
        } => {
            let model = load_model(&source)?;
            let dom = parse_domain(&domain)?;
            let data = read_physical_csv(&physical, dom)?;
            let kern = Kernel::parse(&kernel, Some(data.domain()))?;
            let opts = FitOptions { seed, ..Default::default() };
            let sel = select_lambda(&data, model.as_dyn(), &kern, &default_lambda_grid(), &opts)?;
            let config = format!(
                "gcv-scan --physical {} --model {} --kernel {}",
                physical.display(),
                model.describe(),
                kernel
            );
            write_gcv_csv(&out, &sel.curve, &Provenance::new(config, Some(seed)))?;
            println!("gcv scan: minimum at lambda = {:.6e}", sel.lambda);
            Ok(())
        }

        Command::Predict {
            estimate,
            source,
            grid,
            out,
        } => {
            let model = load_model(&source)?;
            let est = load_estimate(&estimate)?;
            let (lo, hi) = match &est.kernel {
                Kernel::SobolevCubic { lo, hi } => (*lo, *hi),
                _ => {
                    let col = est.anchors.column(0);
                    (col.min(), col.max())
                }
            };
            let xs = grid_over((lo, hi), grid);
            let mut outp = String::new();
            let config = format!(
                "predict --estimate {} --model {} --grid {grid}",
                estimate.display(),
                model.describe()
            );
            outp.push_str(&format!(
                "# tool: rkhs-calib {}\n# config: {config}\n",
                env!("CARGO_PKG_VERSION")
            ));
            outp.push_str("x,prediction,theta_clamped\n");
            for &x in &xs {
                let (pred, clamped) = est.predict_at_flagged(model.as_dyn(), &[x])?;
                outp.push_str(&format!("{x},{},{}\n", pred[0], clamped));
            }
            std::fs::write(&out, outp)?;
            println!("predictions written for {} grid points", xs.len());
            Ok(())
        }

        Command::Uq {
            physical,
            source,
            estimate,
            target,
            levels,
            rho,
            grid,
            out,
        } => {
            let model = load_model(&source)?;
            let data = read_physical_csv(&physical, None)?;
            let est = load_estimate(&estimate)?;
            let levels = parse_levels(&levels)?;
            let sys = linearize(&est, &data, model.as_dyn())?;
            let sigma2 = sys.sigma2_hat(est.lambda)?;
            let rho = rho.unwrap_or_else(|| default_rho(&sys.phi));
            let engine = UqEngine::new(&sys, &est, sigma2, rho)?;
            let xs = grid_over(data.domain(), grid);
            let mut bands = Vec::new();
            let want_theta = target == "theta" || target == "both";
            let want_pred = target == "prediction" || target == "both";
            if !(want_theta || want_pred) {
                return Err(CalibError::Usage(format!(
                    "unknown --target `{target}`; expected theta, prediction, or both"
                )));
            }
            // θ bands are only interpretable when the optimal calibration
            // function is identifiable; flag the bundled non-identified
            // settings
            let caveat = match &model {
                LoadedModel::Builtin(_, id) if *id >= 3 => Some(
                    "optimal calibration function is not identifiable; interpret θ bands with care"
                        .to_string(),
                ),
                _ => None,
            };
            for &level in &levels {
                if want_theta {
                    for mut band in engine.theta_ci(&xs, level)? {
                        band.caveat = caveat.clone();
                        bands.push(band);
                    }
                }
                if want_pred {
                    bands.push(engine.prediction_ci(model.as_dyn(), &xs, level)?);
                }
            }
            let config = format!(
                "uq --physical {} --model {} --estimate {} --target {target} --levels {} --rho {rho:.6e}",
                physical.display(),
                model.describe(),
                estimate.display(),
                levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
            );
            write_band_csv(&out, &bands, &Provenance::new(config, None))?;
            println!(
                "bands written: {} target(s) × {} level(s), σ̂² = {sigma2:.6e}",
                if target == "both" { 2 } else { 1 },
                levels.len()
            );
            Ok(())
        }

        Command::Simulate {
            setting,
            methods,
            code,
            n,
            reps,
            seed,
            out,
        } => {
            let methods_v = Method::parse_list(&methods)?;
            let mode = CodeMode::parse(&code)?;
            let table = run_setting(setting, &methods_v, mode, n, reps, seed)?;
            let config = format!(
                "simulate --setting {setting} --methods {methods} --code {code} --n {n} --reps {reps}"
            );
            write_table_csv(&out, &table, &Provenance::new(config, Some(seed)))?;
            for row in &table.rows {
                println!(
                    "{}: loss {:.4} (se {:.4}), 90% width {:.4}, 90% coverage {:.4}{}",
                    row.method.name(),
                    row.loss_mean,
                    row.loss_se,
                    row.levels[0].width_mean,
                    row.levels[0].coverage_mean,
                    if row.flagged { "  [>5% replications failed]" } else { "" }
                );
            }
            Ok(())
        }

        Command::Emulate { runs, jitter, out } => {
            let (inputs, outputs, d, q) = read_runs_csv(&runs)?;
            let opts = EmulatorOptions {
                jitter_rel: jitter,
                ..Default::default()
            };
            let em = train_emulator(inputs, outputs, d, q, &opts)?;
            let config = format!("emulate --runs {} --jitter {jitter:e}", runs.display());
            save_emulator(&out, &em, &Provenance::new(config, None))?;
            println!(
                "emulator trained on {} runs; lengthscales {:?}, variance {:.6e}",
                em.num_runs(),
                em.lengthscales(),
                em.variance()
            );
            Ok(())
        }

        Command::Cv {
            physical,
            source,
            method,
            c,
            reps,
            mean_shift,
            seed,
            out,
        } => {
            let model = load_model(&source)?;
            let data = read_physical_csv(&physical, None)?;
            let (data, shift) = apply_mean_shift(data, &mean_shift)?;
            let m = Method::parse(&method)?;
            let summary = loo_cv(&data, model.as_dyn(), m, c, reps, seed)?;
            let mut config = format!(
                "cv --physical {} --model {} --method {method} --c {c} --reps {reps}",
                physical.display(),
                model.describe()
            );
            if let Some(s) = shift {
                config.push_str(&format!(" [mean-shift {s}]"));
            }
            let prov = Provenance::new(config, Some(seed));
            let mut text = String::new();
            text.push_str(&format!(
                "# tool: rkhs-calib {}\n# seed: {seed}\n# config: {}\n# mean: {}\n# se: {}\n# failures: {}\n",
                env!("CARGO_PKG_VERSION"),
                prov.config,
                summary.mean,
                summary.se,
                summary.failures
            ));
            text.push_str("fold,ape\n");
            for (i, ape) in summary.apes.iter().enumerate() {
                text.push_str(&format!("{i},{ape}\n"));
            }
            std::fs::write(&out, text)?;
            println!(
                "leave-{c}-out APE: mean {:.4}, se {:.4} over {} values",
                summary.mean,
                summary.se,
                summary.apes.len()
            );
            Ok(())
        }
    }
}
