//! Replication harness for the bundled benchmark settings: per-method loss
//! and confidence-band metrics aggregated over seeded replications, plus
//! leave-C-out cross-validation and the mean-shift preprocessing step.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    baseline_prediction_ci, baseline_theta_ci, fit_const, fit_parametric, BaselineFit,
    ParametricFamily,
};
use crate::calibrate::{FitOptions, PhysicalDataset};
use crate::emulator::{train_emulator, Emulator, EmulatorOptions};
use crate::error::{CalibError, Result};
use crate::kernel::Kernel;
use crate::model::{builtin, sample_physical, BenchmarkSetting, ComputerModel, SettingId};
use crate::rng::{stream_rng, streams};
use crate::select::{default_lambda_grid, select_lambda, LambdaSelection};
use crate::uq::{default_rho, ConfidenceBand, UqEngine};

pub const BAND_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// Whether the computer model is evaluated directly or through its emulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeMode {
    Cheap,
    Expensive,
}

impl CodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(CodeMode::Cheap),
            "ec" => Ok(CodeMode::Expensive),
            other => Err(CalibError::Usage(format!("unknown code mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CodeMode::Cheap => "cc",
            CodeMode::Expensive => "ec",
        }
    }
}

/// Calibration methods the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Const,
    ParamExp,
    ParamQuad,
    RkhsCubic,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "const" => Ok(Method::Const),
            "param-exp" => Ok(Method::ParamExp),
            "param-quad" => Ok(Method::ParamQuad),
            "rkhs-cubic" => Ok(Method::RkhsCubic),
            other => Err(CalibError::Usage(format!("unknown method `{other}`"))),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',').map(|t| Method::parse(t.trim())).collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Const => "const",
            Method::ParamExp => "param-exp",
            Method::ParamQuad => "param-quad",
            Method::RkhsCubic => "rkhs-cubic",
        }
    }
}

/// Midpoint-rule grid with `n` cells over the domain.
pub fn midpoint_grid(domain: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = domain;
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// L2 distance between two functions, midpoint Riemann sum on 200 cells.
pub fn l2_loss(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, domain: (f64, f64)) -> f64 {
    let grid = midpoint_grid(domain, 200);
    let h = (domain.1 - domain.0) / 200.0;
    let sum: f64 = grid
        .iter()
        .map(|&x| {
            let d = f(x) - g(x);
            d * d
        })
        .sum();
    (sum * h).sqrt()
}

/// Band summary over the domain: integrated width ∫(U-L), the |𝒳|-normalized
/// average width, and the average coverage rate ∫I(L<truth<U)/|𝒳|.
#[derive(Clone, Copy, Debug)]
pub struct CiMetrics {
    pub width: f64,
    pub width_norm: f64,
    pub coverage: f64,
}

pub fn ci_metrics(band: &ConfidenceBand, truth: impl Fn(f64) -> f64) -> CiMetrics {
    let n = band.grid.len();
    assert!(n > 1, "ci_metrics needs a grid");
    let span = if n >= 2 {
        // midpoint grid: spacing times cell count recovers |X|
        (band.grid[1] - band.grid[0]) * n as f64
    } else {
        1.0
    };
    let h = span / n as f64;
    let mut width = 0.0;
    let mut covered = 0usize;
    for (g, &x) in band.grid.iter().enumerate() {
        width += (band.upper[g] - band.lower[g]) * h;
        let t = truth(x);
        if t > band.lower[g] && t < band.upper[g] {
            covered += 1;
        }
    }
    CiMetrics {
        width,
        width_norm: width / span,
        coverage: covered as f64 / n as f64,
    }
}

/// A fitted method, uniform surface for prediction and bands.
pub enum FittedMethod {
    Baseline(BaselineFit),
    Rkhs(Box<LambdaSelection>),
}

impl FittedMethod {
    pub fn theta_component(&self, x: f64, j: usize) -> Result<f64> {
        Ok(match self {
            FittedMethod::Baseline(b) => b.theta_at(x)[j],
            FittedMethod::Rkhs(sel) => sel.estimate.theta_at(&[x])?[j],
        })
    }

    pub fn predict(&self, model: &dyn ComputerModel, x: f64) -> Result<f64> {
        Ok(match self {
            FittedMethod::Baseline(b) => {
                let mut t = b.theta_at(x);
                model.param_box().clamp(&mut t);
                model.eval(&[x], &t)[0]
            }
            FittedMethod::Rkhs(sel) => sel.estimate.predict_at(model, &[x])?[0],
        })
    }

    pub fn theta_band(
        &self,
        data: &PhysicalDataset,
        model: &dyn ComputerModel,
        grid: &[f64],
        level: f64,
        j: usize,
    ) -> Result<ConfidenceBand> {
        match self {
            FittedMethod::Baseline(b) => {
                Ok(baseline_theta_ci(b, data, model, grid, level)?.swap_remove(j))
            }
            FittedMethod::Rkhs(sel) => {
                let rho = default_rho(&sel.system.phi);
                let engine = UqEngine::new(&sel.system, &sel.estimate, sel.sigma2, rho)?;
                Ok(engine.theta_ci(grid, level)?.swap_remove(j))
            }
        }
    }

    pub fn prediction_band(
        &self,
        data: &PhysicalDataset,
        model: &dyn ComputerModel,
        grid: &[f64],
        level: f64,
    ) -> Result<ConfidenceBand> {
        match self {
            FittedMethod::Baseline(b) => baseline_prediction_ci(b, data, model, grid, level),
            FittedMethod::Rkhs(sel) => {
                let rho = default_rho(&sel.system.phi);
                let engine = UqEngine::new(&sel.system, &sel.estimate, sel.sigma2, rho)?;
                engine.prediction_ci(model, grid, level)
            }
        }
    }
}

/// Fit one method on a dataset. The RKHS route selects λ by GCV over the
/// default grid with a cubic kernel rescaled to the data domain.
pub fn fit_method(
    method: Method,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    seed: u64,
) -> Result<FittedMethod> {
    match method {
        Method::Const => Ok(FittedMethod::Baseline(BaselineFit::Const(fit_const(
            data, model,
        )?))),
        Method::ParamExp => Ok(FittedMethod::Baseline(BaselineFit::Parametric(
            fit_parametric(data, model, ParametricFamily::Exp)?,
        ))),
        Method::ParamQuad => Ok(FittedMethod::Baseline(BaselineFit::Parametric(
            fit_parametric(data, model, ParametricFamily::Quad)?,
        ))),
        Method::RkhsCubic => {
            let (lo, hi) = data.domain();
            let kernel = Kernel::sobolev_cubic(lo, hi)?;
            let opts = FitOptions {
                seed,
                ..Default::default()
            };
            let sel = select_lambda(data, model, &kernel, &default_lambda_grid(), &opts)?;
            Ok(FittedMethod::Rkhs(Box::new(sel)))
        }
    }
}

/// One replication's metrics for one method. Band construction can fail
/// independently of the fit (singular Wald covariance), so the level
/// metrics are optional.
#[derive(Clone, Debug)]
struct RepMetrics {
    loss: f64,
    per_level: Option<Vec<CiMetrics>>,
}

/// Aggregated metrics for one (setting, code, method) row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub width_mean: f64,
    pub width_se: f64,
    pub width_norm_mean: f64,
    pub width_norm_se: f64,
    pub coverage_mean: f64,
    pub coverage_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub reps_ok: usize,
    pub failures: usize,
    /// Replications whose fit succeeded but whose bands could not be built.
    pub band_failures: usize,
    /// More than 5% of replications failed.
    pub flagged: bool,
    pub loss_mean: f64,
    pub loss_se: f64,
    pub levels: Vec<LevelRow>,
}

/// Benchmark table for one setting and code mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsTable {
    pub setting: SettingId,
    pub code_mode: CodeMode,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<TableRow>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
    (mean, (var / m as f64).sqrt())
}

/// The 14×15 computer-experiment design for a setting: 14 x-points crossed
/// with 15 θ-points (a 5×3 grid over the rectangle when q = 2), evaluated
/// through the cheap model.
pub fn training_design(
    model: &dyn ComputerModel,
    setting: &BenchmarkSetting,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (lo, hi) = setting.domain;
    let nx = 14;
    let xs: Vec<f64> = (0..nx)
        .map(|i| lo + i as f64 / (nx - 1) as f64 * (hi - lo))
        .collect();
    let q = setting.param_dim();
    let tb = &setting.emulator_theta_box;
    let thetas: Vec<Vec<f64>> = if q == 1 {
        let nt = 15;
        (0..nt)
            .map(|i| {
                vec![tb.lower[0] + i as f64 / (nt - 1) as f64 * (tb.upper[0] - tb.lower[0])]
            })
            .collect()
    } else {
        // 15 Latin-hypercube points over the rectangle: 15 levels per
        // coordinate, second coordinate visited in a fixed full-cycle
        // permutation (7 is coprime with 15)
        let nt = 15;
        (0..nt)
            .map(|i| {
                let perm = (i * 7 + 3) % nt;
                vec![
                    tb.lower[0] + (i as f64 + 0.5) / nt as f64 * (tb.upper[0] - tb.lower[0]),
                    tb.lower[1] + (perm as f64 + 0.5) / nt as f64 * (tb.upper[1] - tb.lower[1]),
                ]
            })
            .collect()
    };
    let m = xs.len() * thetas.len();
    let mut inputs = DMatrix::zeros(m, 1 + q);
    let mut outputs = DMatrix::zeros(m, 1);
    let mut row = 0;
    for &x in &xs {
        for t in &thetas {
            inputs[(row, 0)] = x;
            for (j, &tj) in t.iter().enumerate() {
                inputs[(row, 1 + j)] = tj;
            }
            outputs[(row, 0)] = model.eval(&[x], t)[0];
            row += 1;
        }
    }
    (inputs, outputs)
}

/// Train the expensive-code emulator for a bundled setting.
pub fn setting_emulator(setting_id: SettingId) -> Result<Emulator> {
    let (model, setting) = builtin(setting_id)?;
    let (inputs, outputs) = training_design(&model, &setting);
    train_emulator(inputs, outputs, 1, setting.param_dim(), &EmulatorOptions::default())
}

fn run_one_rep(
    setting: &BenchmarkSetting,
    model: &dyn ComputerModel,
    methods: &[Method],
    n: usize,
    rep_seed: u64,
    grid: &[f64],
) -> Vec<std::result::Result<RepMetrics, String>> {
    let data = sample_physical(setting, n, rep_seed);
    methods
        .iter()
        .map(|&method| {
            let run = || -> Result<RepMetrics> {
                let fitted = fit_method(method, &data, model, rep_seed)?;
                let (loss, per_level) = if setting.identifiable() {
                    let star = |x: f64| setting.theta_star(x).unwrap()[0];
                    let mut vals = Vec::with_capacity(grid.len());
                    for &x in grid {
                        vals.push(fitted.theta_component(x, 0)?);
                    }
                    let loss = {
                        let h = (setting.domain.1 - setting.domain.0) / grid.len() as f64;
                        let sum: f64 = grid
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| {
                                let d = vals[i] - star(x);
                                d * d
                            })
                            .sum();
                        (sum * h).sqrt()
                    };
                    let bands = || -> Result<Vec<CiMetrics>> {
                        let mut per_level = Vec::with_capacity(BAND_LEVELS.len());
                        for &level in &BAND_LEVELS {
                            let band = fitted.theta_band(&data, model, grid, level, 0)?;
                            per_level.push(ci_metrics(&band, star));
                        }
                        Ok(per_level)
                    };
                    (loss, bands().ok())
                } else {
                    let zeta = |x: f64| setting.zeta(x);
                    let mut vals = Vec::with_capacity(grid.len());
                    for &x in grid {
                        vals.push(fitted.predict(model, x)?);
                    }
                    let loss = {
                        let h = (setting.domain.1 - setting.domain.0) / grid.len() as f64;
                        let sum: f64 = grid
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| {
                                let d = vals[i] - zeta(x);
                                d * d
                            })
                            .sum();
                        (sum * h).sqrt()
                    };
                    let bands = || -> Result<Vec<CiMetrics>> {
                        let mut per_level = Vec::with_capacity(BAND_LEVELS.len());
                        for &level in &BAND_LEVELS {
                            let band = fitted.prediction_band(&data, model, grid, level)?;
                            per_level.push(ci_metrics(&band, zeta));
                        }
                        Ok(per_level)
                    };
                    (loss, bands().ok())
                };
                Ok(RepMetrics { loss, per_level })
            };
            run().map_err(|e| e.to_string())
        })
        .collect()
}

/// Run a full benchmark: `reps` replications of n observations, one row per
/// method. Replications are independent (seed + replication index) and run
/// in parallel; failed replications are excluded with explicit accounting.
pub fn run_setting(
    setting_id: SettingId,
    methods: &[Method],
    code_mode: CodeMode,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<MetricsTable> {
    if reps == 0 {
        return Err(CalibError::Usage("reps must be >= 1".into()));
    }
    let (cheap, setting) = builtin(setting_id)?;
    let emulator;
    let model: &dyn ComputerModel = match code_mode {
        CodeMode::Cheap => &cheap,
        CodeMode::Expensive => {
            emulator = setting_emulator(setting_id)?;
            &emulator
        }
    };
    let grid = midpoint_grid(setting.domain, 200);

    let per_rep: Vec<Vec<std::result::Result<RepMetrics, String>>> = (0..reps)
        .into_par_iter()
        .map(|rep| run_one_rep(&setting, model, methods, n, seed + rep as u64, &grid))
        .collect();

    let mut rows = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let mut losses = Vec::new();
        let mut level_acc: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new(), Vec::new()); BAND_LEVELS.len()];
        let mut failures = 0;
        let mut band_failures = 0;
        for rep in per_rep.iter() {
            match &rep[mi] {
                Ok(m) => {
                    losses.push(m.loss);
                    match &m.per_level {
                        Some(levels) => {
                            for (li, cm) in levels.iter().enumerate() {
                                level_acc[li].0.push(cm.width);
                                level_acc[li].1.push(cm.width_norm);
                                level_acc[li].2.push(cm.coverage);
                            }
                        }
                        None => band_failures += 1,
                    }
                }
                Err(_) => failures += 1,
            }
        }
        let (loss_mean, loss_se) = mean_se(&losses);
        let levels = BAND_LEVELS
            .iter()
            .enumerate()
            .map(|(li, &level)| {
                let (wm, wse) = mean_se(&level_acc[li].0);
                let (wnm, wnse) = mean_se(&level_acc[li].1);
                let (cm, cse) = mean_se(&level_acc[li].2);
                LevelRow {
                    level,
                    width_mean: wm,
                    width_se: wse,
                    width_norm_mean: wnm,
                    width_norm_se: wnse,
                    coverage_mean: cm,
                    coverage_se: cse,
                }
            })
            .collect();
        rows.push(TableRow {
            method,
            reps_ok: losses.len(),
            failures,
            band_failures,
            flagged: failures * 20 > reps,
            loss_mean,
            loss_se,
            levels,
        });
    }
    Ok(MetricsTable {
        setting: setting_id,
        code_mode,
        n,
        reps,
        seed,
        rows,
    })
}

/// Cross-validated absolute prediction errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApeSummary {
    pub method: Method,
    pub leave_out: usize,
    pub apes: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub failures: usize,
}

/// Leave-C-out cross-validation of a method's prediction: C = 1 sweeps every
/// observation once; C = 2 draws `reps` random pairs (seeded).
pub fn loo_cv(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    method: Method,
    c: usize,
    reps: usize,
    seed: u64,
) -> Result<ApeSummary> {
    if !(c == 1 || c == 2) {
        return Err(CalibError::Usage("leave-C-out supports C in {1, 2}".into()));
    }
    let n = data.n();
    if n <= c {
        return Err(CalibError::Data("need n > C observations".into()));
    }
    let folds: Vec<Vec<usize>> = if c == 1 {
        (0..n).map(|i| vec![i]).collect()
    } else {
        let mut rng = stream_rng(seed, streams::CV_FOLDS);
        (0..reps)
            .map(|_| {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                vec![a, b]
            })
            .collect()
    };

    let results: Vec<std::result::Result<Vec<f64>, String>> = folds
        .par_iter()
        .enumerate()
        .map(|(fi, fold)| {
            let run = || -> Result<Vec<f64>> {
                let train = data.without_rows(fold)?;
                let fitted = fit_method(method, &train, model, seed + fi as u64)?;
                fold.iter()
                    .map(|&i| {
                        let x = data.xs()[(i, 0)];
                        let pred = fitted.predict(model, x)?;
                        Ok((data.ys()[(i, 0)] - pred).abs())
                    })
                    .collect()
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut apes = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok(mut a) => apes.append(&mut a),
            Err(_) => failures += 1,
        }
    }
    if apes.is_empty() {
        return Err(CalibError::Aggregate(vec!["every fold failed".into()]));
    }
    let (mean, se) = mean_se(&apes);
    Ok(ApeSummary {
        method,
        leave_out: c,
        apes,
        mean,
        se,
        failures,
    })
}

/// Shift the physical responses by a constant so the physical and simulated
/// data have equal average response over their common x-range. Returns the
/// shifted dataset and the applied shift.
pub fn mean_shift_align(
    physical: &PhysicalDataset,
    sim_xs: &[f64],
    sim_ys: &[f64],
) -> Result<(PhysicalDataset, f64)> {
    if sim_xs.len() != sim_ys.len() || sim_xs.is_empty() {
        return Err(CalibError::Data("empty or mismatched simulated data".into()));
    }
    let phys_lo = (0..physical.n())
        .map(|i| physical.xs()[(i, 0)])
        .fold(f64::INFINITY, f64::min);
    let phys_hi = (0..physical.n())
        .map(|i| physical.xs()[(i, 0)])
        .fold(f64::NEG_INFINITY, f64::max);
    let sim_lo = sim_xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let sim_hi = sim_xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = phys_lo.max(sim_lo);
    let hi = phys_hi.min(sim_hi);
    if !(lo <= hi) {
        return Err(CalibError::Data(
            "physical and simulated x-ranges do not overlap".into(),
        ));
    }
    let phys_vals: Vec<f64> = (0..physical.n())
        .filter(|&i| {
            let x = physical.xs()[(i, 0)];
            x >= lo && x <= hi
        })
        .map(|i| physical.ys()[(i, 0)])
        .collect();
    let sim_vals: Vec<f64> = sim_xs
        .iter()
        .zip(sim_ys)
        .filter(|(&x, _)| x >= lo && x <= hi)
        .map(|(_, &y)| y)
        .collect();
    if phys_vals.is_empty() || sim_vals.is_empty() {
        return Err(CalibError::Data(
            "no observations inside the common x-range".into(),
        ));
    }
    let phys_mean = phys_vals.iter().sum::<f64>() / phys_vals.len() as f64;
    let sim_mean = sim_vals.iter().sum::<f64>() / sim_vals.len() as f64;
    let shift = sim_mean - phys_mean;
    Ok((physical.shift_responses(shift), shift))
}
