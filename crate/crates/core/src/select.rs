//! Linearize the fitted model, build the smoother A(λ) through a full QR of
//! the stacked weighted null-space design, and select the penalty λ by
//! generalized cross-validation.
//!
//! With w_ij = ∂y^s/∂θ_j at (x_i, θ̂(x_i)) and working response
//! ȳ_i = y_i - y^s(x_i, θ̂(x_i)) + Σ_j w_ij θ̂_j(x_i), the penalized fit of
//! the linearized problem is Ŷ = A(λ) Y with
//! A(λ) = I - nλ F2 (F2' Φ_w F2 + nλ I)⁻¹ F2'.

use nalgebra::{DMatrix, DVector};

use crate::calibrate::{fit, CalibrationEstimate, Coefficients, FitOptions, PhysicalDataset};
use crate::error::{CalibError, Result};
use crate::kernel::Kernel;
use crate::linalg::full_qr;
use crate::model::ComputerModel;

/// The linearized penalized-regression system at a fitted estimate.
#[derive(Clone, Debug)]
pub struct LinearizedSystem {
    /// n×q gradient weights w_ij.
    pub w: DMatrix<f64>,
    /// Working response ȳ (length n).
    pub ybar: DVector<f64>,
    /// n×k null-space design V.
    pub v: DMatrix<f64>,
    /// n×n kernel Gram matrix Φ.
    pub phi: DMatrix<f64>,
    /// Rows where the whole gradient vanished (flagged, system still built).
    pub zero_gradient_rows: Vec<usize>,
    /// Stacked response Y (ȳ repeated q times).
    pub stacked_y: DVector<f64>,
    /// qn×qk stacked weighted design V_w.
    pub stacked_vw: DMatrix<f64>,
    /// qn×qn stacked weighted Gram Φ_w.
    pub stacked_phiw: DMatrix<f64>,
    f1: DMatrix<f64>,
    f2: DMatrix<f64>,
    rmat: DMatrix<f64>,
    /// F2' Φ_w F2.
    core: DMatrix<f64>,
    /// F2' Y.
    f2ty: DVector<f64>,
    /// F2' D with D = 1_q ⊗ I_n: maps the unique-observation space into the
    /// reduced coordinates (block-summed rows of F2).
    f2td: DMatrix<f64>,
}

impl LinearizedSystem {
    /// Assemble the stacked system from its n-sized parts.
    pub fn from_parts(
        w: DMatrix<f64>,
        ybar: DVector<f64>,
        v: DMatrix<f64>,
        phi: DMatrix<f64>,
    ) -> Result<Self> {
        let n = ybar.len();
        let q = w.ncols();
        let k = v.ncols();
        if w.nrows() != n || v.nrows() != n || phi.shape() != (n, n) {
            return Err(CalibError::Data("inconsistent linearized-system shapes".into()));
        }
        if n < k {
            return Err(CalibError::Data("need n >= k".into()));
        }
        let zero_gradient_rows: Vec<usize> = (0..n)
            .filter(|&i| (0..q).all(|j| w[(i, j)].abs() < 1e-14))
            .collect();

        // V_jw = W_j V and Φ_jw = W_j Φ W_j, tiled q times vertically
        let mut row_v = DMatrix::zeros(n, q * k);
        let mut row_phi = DMatrix::zeros(n, q * n);
        for j in 0..q {
            for i in 0..n {
                let wi = w[(i, j)];
                for s in 0..k {
                    row_v[(i, j * k + s)] = wi * v[(i, s)];
                }
                for l in 0..n {
                    row_phi[(i, j * n + l)] = wi * phi[(i, l)] * w[(l, j)];
                }
            }
        }
        let mut stacked_vw = DMatrix::zeros(q * n, q * k);
        let mut stacked_phiw = DMatrix::zeros(q * n, q * n);
        let mut stacked_y = DVector::zeros(q * n);
        for blk in 0..q {
            stacked_vw.view_mut((blk * n, 0), (n, q * k)).copy_from(&row_v);
            stacked_phiw
                .view_mut((blk * n, 0), (n, q * n))
                .copy_from(&row_phi);
            stacked_y.rows_mut(blk * n, n).copy_from(&ybar);
        }

        let (f1, f2, rmat) = full_qr(&stacked_vw);
        let core = f2.transpose() * &stacked_phiw * &f2;
        let f2ty = f2.transpose() * &stacked_y;
        let free = f2.ncols();
        let mut f2td = DMatrix::zeros(free, n);
        for col in 0..free {
            for i in 0..n {
                let mut acc = 0.0;
                for blk in 0..q {
                    acc += f2[(blk * n + i, col)];
                }
                f2td[(col, i)] = acc;
            }
        }
        Ok(LinearizedSystem {
            w,
            ybar,
            v,
            phi,
            zero_gradient_rows,
            stacked_y,
            stacked_vw,
            stacked_phiw,
            f1,
            f2,
            rmat,
            core,
            f2ty,
            f2td,
        })
    }

    pub fn n(&self) -> usize {
        self.ybar.len()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn nq(&self) -> usize {
        self.n() * self.q()
    }

    fn nl(&self, lambda: f64) -> f64 {
        self.n() as f64 * lambda
    }

    fn shifted_core(&self, lambda: f64) -> DMatrix<f64> {
        let m = self.core.nrows();
        &self.core + DMatrix::identity(m, m) * self.nl(lambda)
    }

    /// Ŷ = A(λ) Y.
    pub fn apply_smoother(&self, lambda: f64) -> Result<DVector<f64>> {
        if lambda <= 0.0 {
            return Err(CalibError::Parameter("lambda must be > 0".into()));
        }
        let b = self.shifted_core(lambda);
        let s1 = b
            .lu()
            .solve(&self.f2ty)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        Ok(&self.stacked_y - &self.f2 * s1 * self.nl(lambda))
    }

    /// Explicit qn×qn smoother matrix. Materialized only for qn <= 2000;
    /// traces and quadratic forms come from the reduced core elsewhere.
    pub fn smoother_matrix(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if lambda <= 0.0 {
            return Err(CalibError::Parameter("lambda must be > 0".into()));
        }
        let nq = self.nq();
        if nq > 2000 {
            return Err(CalibError::Parameter(format!(
                "refusing to materialize a {nq}x{nq} smoother; use apply_smoother"
            )));
        }
        let b = self.shifted_core(lambda);
        let t = b
            .lu()
            .solve(&self.f2.transpose())
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let a = DMatrix::identity(nq, nq) - &self.f2 * t * self.nl(lambda);
        #[cfg(debug_assertions)]
        {
            // the closed-form solution must reproduce A(λ)Y when R is regular
            if let Ok((alpha, beta_w)) = self.fitted_coefficients(lambda) {
                let lhs = &a * &self.stacked_y;
                let rhs = &self.stacked_vw * alpha + &self.stacked_phiw * beta_w;
                let scale = 1.0 + lhs.amax();
                debug_assert!(
                    (&lhs - &rhs).amax() <= 1e-8 * scale,
                    "smoother identity violated: {}",
                    (lhs - rhs).amax()
                );
            }
        }
        Ok(a)
    }

    /// Solve the stationarity system: β̂_w = F2 (F2'ΦwF2 + nλI)⁻¹ F2'Y and
    /// α̂ = R⁻¹ (F1'Y - F1'Φw β̂_w).
    pub fn fitted_coefficients(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let b = self.shifted_core(lambda);
        let s1 = b
            .lu()
            .solve(&self.f2ty)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let beta_w = &self.f2 * s1;
        let rhs = self.f1.transpose() * &self.stacked_y
            - self.f1.transpose() * (&self.stacked_phiw * &beta_w);
        let alpha = self
            .rmat
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CalibError::Numeric("singular R in V_w = F1 R".into()))?;
        Ok((alpha, beta_w))
    }

    /// tr(I_n - A_n(λ)) for the smoother acting on the n unique working
    /// responses: the stacked Ŷ is the same n fitted values repeated q
    /// times, so A_n = (1/q) D'AD with D = 1_q ⊗ I_n,
    /// tr(I_n - A_n) = (nλ/q) tr((F2'ΦwF2 + nλI)⁻¹ (F2'D)(F2'D)').
    /// Coincides with tr(I - A) when q = 1.
    pub fn trace_i_minus_a(&self, lambda: f64) -> Result<f64> {
        let b = self.shifted_core(lambda);
        let x = b
            .lu()
            .solve(&self.f2td)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let mut tr = 0.0;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                tr += self.f2td[(i, j)] * x[(i, j)];
            }
        }
        Ok(self.nl(lambda) / self.q() as f64 * tr)
    }

    /// Effective degrees of freedom tr(A_n(λ)) of the n-point smoother.
    pub fn edf(&self, lambda: f64) -> Result<f64> {
        Ok(self.n() as f64 - self.trace_i_minus_a(lambda)?)
    }

    /// Residual sum of squares ||ȳ - ŷ_λ||² of the working regression
    /// (fitted values block-averaged from Ŷ).
    fn residual_ss(&self, lambda: f64) -> Result<f64> {
        let b = self.shifted_core(lambda);
        let s1 = b
            .lu()
            .solve(&self.f2ty)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let r = self.f2td.transpose() * s1 * (self.nl(lambda) / self.q() as f64);
        Ok(r.norm_squared())
    }

    /// GCV(λ) = [n⁻¹ ||ȳ - ŷ_λ||²] / [n⁻¹ tr(I_n - A_n)]², the criterion of
    /// the n-point working regression (identical to the stacked form when
    /// q = 1, where the stacking is the identity).
    pub fn gcv(&self, lambda: f64) -> Result<f64> {
        if lambda <= 0.0 {
            return Err(CalibError::Parameter("lambda must be > 0".into()));
        }
        let tr = self.trace_i_minus_a(lambda)?;
        if tr <= 1e-12 {
            return Err(CalibError::Numeric(
                "degenerate smoother: tr(I - A) ~ 0".into(),
            ));
        }
        let n = self.n() as f64;
        Ok((self.residual_ss(lambda)? / n) / (tr / n).powi(2))
    }

    /// GCV, effective degrees of freedom, and σ̂² at one λ off a single
    /// factorization.
    pub fn scan_point(&self, lambda: f64) -> Result<GcvPoint> {
        if lambda <= 0.0 {
            return Err(CalibError::Parameter("lambda must be > 0".into()));
        }
        let b = self.shifted_core(lambda);
        let lu = b.lu();
        let x = lu
            .solve(&self.f2td)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let nl_q = self.nl(lambda) / self.q() as f64;
        let mut tr = 0.0;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                tr += self.f2td[(i, j)] * x[(i, j)];
            }
        }
        tr *= nl_q;
        if tr <= 1e-12 {
            return Err(CalibError::Numeric(
                "degenerate smoother: tr(I - A) ~ 0".into(),
            ));
        }
        let s1 = lu
            .solve(&self.f2ty)
            .ok_or_else(|| CalibError::Numeric("singular F2'ΦwF2 + nλI".into()))?;
        let rss = (self.f2td.transpose() * s1 * nl_q).norm_squared();
        let n = self.n() as f64;
        Ok(GcvPoint {
            lambda,
            gcv: (rss / n) / (tr / n).powi(2),
            edf: n - tr,
            sigma2: (rss / tr).max(0.0),
        })
    }

    /// Noise-variance estimator σ̂² = ||ȳ - ŷ_λ||² / tr(I_n - A_n).
    pub fn sigma2_hat(&self, lambda: f64) -> Result<f64> {
        if lambda <= 0.0 {
            return Err(CalibError::Parameter("lambda must be > 0".into()));
        }
        let tr = self.trace_i_minus_a(lambda)?;
        if tr <= 1e-12 {
            return Err(CalibError::Numeric(
                "degenerate smoother: tr(I - A) ~ 0".into(),
            ));
        }
        Ok((self.residual_ss(lambda)? / tr).max(0.0))
    }
}

/// Build the linearized system at a fitted estimate.
pub fn linearize(
    est: &CalibrationEstimate,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
) -> Result<LinearizedSystem> {
    if model.response_dim() != 1 {
        return Err(CalibError::Parameter(
            "linearization handles one-dimensional responses".into(),
        ));
    }
    let n = data.n();
    let q = model.param_dim();
    let thetas = est.anchor_thetas()?;
    let mut w = DMatrix::zeros(n, q);
    let mut ybar = DVector::zeros(n);
    for i in 0..n {
        let x = data.x_row(i);
        let t: Vec<f64> = thetas.row(i).iter().copied().collect();
        let pred = model.eval(&x, &t)[0];
        let g = model.grad_theta(&x, &t);
        let mut acc = data.ys()[(i, 0)] - pred;
        for j in 0..q {
            w[(i, j)] = g[(0, j)];
            acc += g[(0, j)] * t[j];
        }
        ybar[i] = acc;
    }
    let v = est.basis.design(data.xs());
    let phi = est.kernel.gram(data.xs())?;
    LinearizedSystem::from_parts(w, ybar, v, phi)
}

/// 40 log-spaced penalties from 1e-8 to 1e2.
pub fn default_lambda_grid() -> Vec<f64> {
    let m = 40;
    (0..m)
        .map(|i| 10f64.powf(-8.0 + 10.0 * i as f64 / (m - 1) as f64))
        .collect()
}

/// One λ on the GCV curve.
#[derive(Clone, Debug)]
pub struct GcvPoint {
    pub lambda: f64,
    pub gcv: f64,
    pub edf: f64,
    pub sigma2: f64,
}

/// Outcome of a GCV scan: the winning λ with its fit and the whole curve.
#[derive(Debug)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub estimate: CalibrationEstimate,
    pub system: LinearizedSystem,
    pub sigma2: f64,
    /// Curve in ascending-λ order.
    pub curve: Vec<GcvPoint>,
    /// Per-λ failures (excluded from the curve).
    pub failures: Vec<String>,
}

/// Select the penalty λ by GCV over a grid. Ties prefer the larger λ.
///
/// Two regimes share the same GCV criterion but need different search
/// strategies for the λ-indexed family of nonlinear fits:
///
/// * q = 1 (identified calibration): a pilot fit at the grid's geometric
///   midpoint is linearized once, GCV(λ) is scanned over the whole grid on
///   that fixed system, the fit is refreshed at the winner and the scan
///   repeated (≤ 3 passes). Scanning on a common system keeps the scores
///   commensurable.
/// * q ≥ 2 (stacked, possibly non-identified): the grid is walked from the
///   largest λ down, each λ refit warm-started from the previous solution
///   and scored on its own linearization. The smooth-to-rough continuation
///   keeps every fit in the basin reached from the parametric limit, which
///   the fixed-point iteration cannot guarantee here.
pub fn select_lambda(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    grid: &[f64],
    opts: &FitOptions,
) -> Result<LambdaSelection> {
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0)) {
        return Err(CalibError::Parameter(
            "lambda grid must be nonempty and positive".into(),
        ));
    }
    let mut lambdas: Vec<f64> = grid.to_vec();
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if model.param_dim() == 1 {
        select_by_fixed_point(data, model, kernel, &lambdas, opts)
    } else {
        select_by_continuation(data, model, kernel, &lambdas, opts)
    }
}

fn select_by_fixed_point(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<LambdaSelection> {
    let pilot_lambda = {
        let mean_log = lambdas.iter().map(|l| l.ln()).sum::<f64>() / lambdas.len() as f64;
        mean_log.exp()
    };
    let mut failures = Vec::new();
    let mut estimate = fit(data, model, kernel, pilot_lambda, opts)?;
    let mut system = linearize(&estimate, data, model)?;
    let mut curve: Vec<GcvPoint> = Vec::new();
    let mut best_lambda = pilot_lambda;

    for pass in 0..3 {
        curve.clear();
        let mut best: Option<GcvPoint> = None;
        for &lambda in lambdas {
            match system.scan_point(lambda) {
                Ok(p) => {
                    if best.as_ref().map_or(true, |b| p.gcv < b.gcv) {
                        best = Some(p.clone());
                    }
                    curve.push(p);
                }
                Err(e) => failures.push(format!("pass {pass} lambda {lambda:.3e}: {e}")),
            }
        }
        let Some(winner) = best else {
            return Err(CalibError::Aggregate(failures));
        };
        let converged = winner.lambda == best_lambda && pass > 0;
        if winner.lambda != estimate.lambda {
            let warm = FitOptions {
                init: Some(Coefficients {
                    alpha: estimate.alpha.clone(),
                    beta: estimate.beta.clone(),
                }),
                ..opts.clone()
            };
            estimate = fit(data, model, kernel, winner.lambda, &warm)?;
            system = linearize(&estimate, data, model)?;
        }
        best_lambda = winner.lambda;
        if converged {
            break;
        }
    }
    let sigma2 = system.sigma2_hat(best_lambda)?;
    curve.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    Ok(LambdaSelection {
        lambda: best_lambda,
        estimate,
        system,
        sigma2,
        curve,
        failures,
    })
}

fn select_by_continuation(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<LambdaSelection> {
    let mut curve: Vec<GcvPoint> = Vec::with_capacity(lambdas.len());
    let mut failures = Vec::new();
    let mut warm: Option<Coefficients> = opts.init.clone();
    let mut best: Option<(f64, CalibrationEstimate, LinearizedSystem, f64)> = None;
    for &lambda in lambdas {
        let fit_opts = FitOptions {
            init: warm.clone(),
            ..opts.clone()
        };
        let step = || -> Result<(CalibrationEstimate, LinearizedSystem, GcvPoint)> {
            let est = fit(data, model, kernel, lambda, &fit_opts)?;
            let sys = linearize(&est, data, model)?;
            let point = sys.scan_point(lambda)?;
            Ok((est, sys, point))
        };
        match step() {
            Ok((est, sys, point)) => {
                warm = Some(Coefficients {
                    alpha: est.alpha.clone(),
                    beta: est.beta.clone(),
                });
                if best.as_ref().map_or(true, |(g, ..)| point.gcv < *g) {
                    best = Some((point.gcv, est, sys, point.sigma2));
                }
                curve.push(point);
            }
            Err(e) => failures.push(format!("lambda {lambda:.3e}: {e}")),
        }
    }
    let Some((_, estimate, system, sigma2)) = best else {
        return Err(CalibError::Aggregate(failures));
    };
    curve.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    Ok(LambdaSelection {
        lambda: estimate.lambda,
        estimate,
        system,
        sigma2,
        curve,
        failures,
    })
}
