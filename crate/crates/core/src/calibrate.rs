//! Penalized least-squares calibration: solve
//!
//!   min Σ_i |y_i - y^s(x_i, θ(x_i))|² + nλ Σ_j ||θ_j||²
//!
//! over calibration functions expanded as null-space basis plus kernel
//! sections anchored at the design points.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{CalibError, Result};
use crate::kernel::{Kernel, NullBasis};
use crate::linalg::full_qr;
use crate::model::{ComputerModel, ParamBox};
use crate::optim::{minimize, OptimOptions};
use crate::rng::{stream_rng, streams};

/// Physical observations: design points, noisy responses, domain bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalDataset {
    xs: DMatrix<f64>,
    ys: DMatrix<f64>,
    bounds: Vec<(f64, f64)>,
}

impl PhysicalDataset {
    pub fn new(xs: DMatrix<f64>, ys: DMatrix<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if xs.nrows() == 0 || xs.nrows() != ys.nrows() {
            return Err(CalibError::Data(format!(
                "need matching nonempty design/response rows, got {} and {}",
                xs.nrows(),
                ys.nrows()
            )));
        }
        if bounds.len() != xs.ncols() {
            return Err(CalibError::Data(
                "domain bounds must match the design dimension".into(),
            ));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Data("responses must be finite".into()));
        }
        for i in 0..xs.nrows() {
            for (d, &(lo, hi)) in bounds.iter().enumerate() {
                let x = xs[(i, d)];
                if !x.is_finite() || x < lo - 1e-12 || x > hi + 1e-12 {
                    return Err(CalibError::Data(format!(
                        "design point {x} (row {i}) outside bounds [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(PhysicalDataset { xs, ys, bounds })
    }

    pub fn n(&self) -> usize {
        self.xs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn response_dim(&self) -> usize {
        self.ys.ncols()
    }

    pub fn xs(&self) -> &DMatrix<f64> {
        &self.xs
    }

    pub fn ys(&self) -> &DMatrix<f64> {
        &self.ys
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// One-dimensional domain helper.
    pub fn domain(&self) -> (f64, f64) {
        self.bounds[0]
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.xs.row(i).iter().copied().collect()
    }

    /// Copy with the listed rows removed (cross-validation folds).
    pub fn without_rows(&self, drop: &[usize]) -> Result<PhysicalDataset> {
        let keep: Vec<usize> = (0..self.n()).filter(|i| !drop.contains(i)).collect();
        if keep.is_empty() {
            return Err(CalibError::Data("cannot drop every row".into()));
        }
        let xs = DMatrix::from_fn(keep.len(), self.xs.ncols(), |i, j| self.xs[(keep[i], j)]);
        let ys = DMatrix::from_fn(keep.len(), self.ys.ncols(), |i, j| self.ys[(keep[i], j)]);
        PhysicalDataset::new(xs, ys, self.bounds.clone())
    }

    /// Shift every response column by `delta`.
    pub fn shift_responses(&self, delta: f64) -> PhysicalDataset {
        let mut ys = self.ys.clone();
        ys.iter_mut().for_each(|v| *v += delta);
        PhysicalDataset {
            xs: self.xs.clone(),
            ys,
            bounds: self.bounds.clone(),
        }
    }
}

/// Representer-expansion coefficients of a candidate calibration function.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    /// q×k null-space coefficients.
    pub alpha: DMatrix<f64>,
    /// q×n kernel-section coefficients.
    pub beta: DMatrix<f64>,
}

impl Coefficients {
    pub fn zeros(q: usize, k: usize, n: usize) -> Self {
        Coefficients {
            alpha: DMatrix::zeros(q, k),
            beta: DMatrix::zeros(q, n),
        }
    }

    /// Flat layout: all α entries row-major, then all β entries row-major.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + self.beta.len());
        for j in 0..self.alpha.nrows() {
            v.extend(self.alpha.row(j).iter());
        }
        for j in 0..self.beta.nrows() {
            v.extend(self.beta.row(j).iter());
        }
        DVector::from_vec(v)
    }

    pub fn from_flat(flat: &DVector<f64>, q: usize, k: usize, n: usize) -> Self {
        let mut c = Coefficients::zeros(q, k, n);
        let mut idx = 0;
        for j in 0..q {
            for s in 0..k {
                c.alpha[(j, s)] = flat[idx];
                idx += 1;
            }
        }
        for j in 0..q {
            for i in 0..n {
                c.beta[(j, i)] = flat[idx];
                idx += 1;
            }
        }
        c
    }
}

/// Convergence summary attached to a fitted estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    /// The accepted-iterate objective sequence was non-increasing.
    pub monotone: bool,
    pub starts: usize,
}

/// A fitted calibration function θ̂(·) = V α + Φ β with its penalty λ.
#[derive(Clone, Debug)]
pub struct CalibrationEstimate {
    pub kernel: Kernel,
    pub basis: NullBasis,
    /// n×d anchor points (the design points the kernel sections sit on).
    pub anchors: DMatrix<f64>,
    /// q×k null-space coefficients.
    pub alpha: DMatrix<f64>,
    /// q×n kernel coefficients, orthogonal to the null-space design.
    pub beta: DMatrix<f64>,
    pub lambda: f64,
    pub theta_box: ParamBox,
    pub report: ConvergenceReport,
}

impl CalibrationEstimate {
    pub fn param_dim(&self) -> usize {
        self.alpha.nrows()
    }

    /// Evaluate θ̂(x): θ̂_j(x) = Σ_s α_js v_s(x) + Σ_i β_ji Φ(x, x_i).
    pub fn theta_at(&self, x: &[f64]) -> Result<DVector<f64>> {
        let q = self.param_dim();
        let v = self.basis.eval(x);
        let n = self.anchors.nrows();
        let mut phi_x = DVector::zeros(n);
        for i in 0..n {
            let anchor: Vec<f64> = self.anchors.row(i).iter().copied().collect();
            phi_x[i] = self.kernel.eval(x, &anchor)?;
        }
        let mut theta = DVector::zeros(q);
        for j in 0..q {
            theta[j] = self.alpha.row(j).transpose().dot(&v) + self.beta.row(j).transpose().dot(&phi_x);
        }
        Ok(theta)
    }

    /// Plug-in prediction y^s(x, θ̂(x)); θ̂(x) is clamped into Θ when it
    /// strays outside, and the flag reports whether clamping happened.
    pub fn predict_at_flagged(
        &self,
        model: &dyn ComputerModel,
        x: &[f64],
    ) -> Result<(DVector<f64>, bool)> {
        let theta = self.theta_at(x)?;
        let mut t: Vec<f64> = theta.iter().copied().collect();
        let clamped = model.param_box().clamp(&mut t);
        Ok((model.eval(x, &t), clamped))
    }

    pub fn predict_at(&self, model: &dyn ComputerModel, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.predict_at_flagged(model, x)?.0)
    }

    /// Fitted θ̂ values at the anchors, one row per anchor.
    pub fn anchor_thetas(&self) -> Result<DMatrix<f64>> {
        let n = self.anchors.nrows();
        let q = self.param_dim();
        let mut out = DMatrix::zeros(n, q);
        for i in 0..n {
            let row: Vec<f64> = self.anchors.row(i).iter().copied().collect();
            out.row_mut(i).copy_from(&self.theta_at(&row)?.transpose());
        }
        Ok(out)
    }
}

/// Penalized objective from explicit coefficients: data-fit sum plus
/// nλ Σ_j β_jᵀ Φ β_j. Returns the infeasibility signal when θ(x_i) leaves Θ.
pub fn objective(
    coeffs: &Coefficients,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(CalibError::Parameter("lambda must be >= 0".into()));
    }
    let parts = ObjectiveParts::new(data, kernel)?;
    parts.value(coeffs, data, model, lambda)
}

/// Analytic gradient of `objective` with respect to every α and β entry,
/// flattened in the same layout as `Coefficients::to_flat`.
pub fn objective_grad(
    coeffs: &Coefficients,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    lambda: f64,
) -> Result<DVector<f64>> {
    let parts = ObjectiveParts::new(data, kernel)?;
    parts.grad(coeffs, data, model, lambda)
}

/// Precomputed design matrices shared by objective evaluations.
struct ObjectiveParts {
    v: DMatrix<f64>,
    phi: DMatrix<f64>,
}

impl ObjectiveParts {
    fn new(data: &PhysicalDataset, kernel: &Kernel) -> Result<Self> {
        let basis = kernel.null_basis();
        let v = basis.design(data.xs());
        let phi = kernel.gram(data.xs())?;
        Ok(ObjectiveParts { v, phi })
    }

    /// n×q matrix of θ_j(x_i).
    fn thetas(&self, coeffs: &Coefficients) -> DMatrix<f64> {
        &self.v * coeffs.alpha.transpose() + &self.phi * coeffs.beta.transpose()
    }

    fn value(
        &self,
        coeffs: &Coefficients,
        data: &PhysicalDataset,
        model: &dyn ComputerModel,
        lambda: f64,
    ) -> Result<f64> {
        let thetas = self.thetas(coeffs);
        let n = data.n();
        let mut fit = 0.0;
        for i in 0..n {
            let t: Vec<f64> = thetas.row(i).iter().copied().collect();
            if !model.param_box().contains(&t) {
                return Err(CalibError::Infeasible(format!(
                    "θ(x_{i}) = {t:?} outside Θ"
                )));
            }
            let pred = model.eval(&data.x_row(i), &t);
            for k in 0..data.response_dim() {
                let r = data.ys()[(i, k)] - pred[k];
                fit += r * r;
            }
        }
        let mut penalty = 0.0;
        for j in 0..coeffs.beta.nrows() {
            let bj = coeffs.beta.row(j).transpose();
            penalty += (&bj.transpose() * &self.phi * &bj)[(0, 0)];
        }
        Ok(fit + n as f64 * lambda * penalty)
    }

    fn grad(
        &self,
        coeffs: &Coefficients,
        data: &PhysicalDataset,
        model: &dyn ComputerModel,
        lambda: f64,
    ) -> Result<DVector<f64>> {
        let thetas = self.thetas(coeffs);
        let n = data.n();
        let q = coeffs.alpha.nrows();
        // u[(i, j)] = -2 Σ_k resid_ik ∂y^s_k/∂θ_j at x_i
        let mut u = DMatrix::zeros(n, q);
        for i in 0..n {
            let t: Vec<f64> = thetas.row(i).iter().copied().collect();
            if !model.param_box().contains(&t) {
                return Err(CalibError::Infeasible(format!(
                    "θ(x_{i}) = {t:?} outside Θ"
                )));
            }
            let x = data.x_row(i);
            let pred = model.eval(&x, &t);
            let g = model.grad_theta(&x, &t);
            for j in 0..q {
                let mut acc = 0.0;
                for k in 0..data.response_dim() {
                    acc += (data.ys()[(i, k)] - pred[k]) * g[(k, j)];
                }
                u[(i, j)] = -2.0 * acc;
            }
        }
        let ga = u.transpose() * &self.v; // q×k
        let gb = u.transpose() * &self.phi
            + &coeffs.beta * &self.phi * (2.0 * n as f64 * lambda); // q×n
        Ok(Coefficients { alpha: ga, beta: gb }.to_flat())
    }
}

/// Options for `fit`.
#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Number of optimizer starts; default 1 for q = 1 and 5 for q >= 2.
    pub multistart: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    /// Seed for the multistart perturbations.
    pub seed: u64,
    /// Warm-start coefficients; bypasses the constant-baseline initialization.
    pub init: Option<Coefficients>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            multistart: None,
            max_iter: 500,
            tol: 1e-9,
            seed: 0,
            init: None,
        }
    }
}

/// Reduced parameterization: β_j = Q2 T c_j keeps V'β_j = 0 exactly, so the
/// penalty is nonnegative even for conditionally positive definite kernels.
/// T combines a penalty whitening (eigen-scaled coordinates of Q2'ΦQ2) with
/// a Jacobi rescaling against the data-fit curvature at the starting point,
/// so every coordinate carries O(1) curvature regardless of λ; without it
/// the kernel eigenvalue spread stalls the quasi-Newton iteration.
struct ReducedProblem<'a> {
    data: &'a PhysicalDataset,
    model: &'a dyn ComputerModel,
    v: DMatrix<f64>,
    /// Φ Q2 T: maps scaled coordinates to θ contributions at the anchors.
    design_c: DMatrix<f64>,
    /// Diagonal of the penalty in scaled coordinates (nλ folded in).
    pen_diag: DVector<f64>,
    n: usize,
    k: usize,
    q: usize,
}

impl<'a> ReducedProblem<'a> {
    fn free(&self) -> usize {
        self.n - self.k
    }

    fn block(&self) -> usize {
        self.n
    }

    /// θ values at the anchors for parameter vector z (per-j blocks [α_j; c_j]).
    fn thetas(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut thetas = DMatrix::zeros(self.n, self.q);
        for j in 0..self.q {
            let a = z.rows(j * self.block(), self.k);
            let c = z.rows(j * self.block() + self.k, self.free());
            let col = &self.v * a + &self.design_c * c;
            thetas.set_column(j, &col);
        }
        thetas
    }

    fn feasible(&self, z: &DVector<f64>) -> bool {
        if !self.model.param_box().is_bounded() {
            return true;
        }
        let thetas = self.thetas(z);
        (0..self.n).all(|i| {
            let t: Vec<f64> = thetas.row(i).iter().copied().collect();
            self.model.param_box().contains(&t)
        })
    }

    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let thetas = self.thetas(z);
        let mut fit = 0.0;
        let mut u = DMatrix::zeros(self.n, self.q);
        let r_dim = self.data.response_dim();
        for i in 0..self.n {
            let t: Vec<f64> = thetas.row(i).iter().copied().collect();
            let x = self.data.x_row(i);
            let (pred, g) = self.model.eval_with_grad(&x, &t);
            for k in 0..r_dim {
                let r = self.data.ys()[(i, k)] - pred[k];
                fit += r * r;
                for j in 0..self.q {
                    u[(i, j)] -= 2.0 * r * g[(k, j)];
                }
            }
        }
        let mut grad = DVector::zeros(z.len());
        let mut penalty = 0.0;
        for j in 0..self.q {
            let c = z.rows(j * self.block() + self.k, self.free()).into_owned();
            let uj = u.column(j);
            let ga = self.v.transpose() * uj;
            let pc = c.component_mul(&self.pen_diag);
            penalty += c.dot(&pc);
            let gc = self.design_c.transpose() * uj + pc * 2.0;
            grad.rows_mut(j * self.block(), self.k).copy_from(&ga);
            grad
                .rows_mut(j * self.block() + self.k, self.free())
                .copy_from(&gc);
        }
        (fit + penalty, grad)
    }
}

/// Fit the penalized least-squares calibration function at a fixed λ.
///
/// Initialization fits the constant baseline first (θ ≡ θ̂_const, β = 0);
/// optional multistart perturbs that constant inside Θ and keeps the lowest
/// final objective. Steps that leave Θ at any design point are halved before
/// acceptance.
pub fn fit(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    kernel: &Kernel,
    lambda: f64,
    opts: &FitOptions,
) -> Result<CalibrationEstimate> {
    if lambda < 0.0 {
        return Err(CalibError::Parameter("lambda must be >= 0".into()));
    }
    let basis = kernel.null_basis();
    let n = data.n();
    let k = basis.dim();
    let q = model.param_dim();
    if n < k {
        return Err(CalibError::Data(format!(
            "need at least k = {k} observations, got {n}"
        )));
    }
    if data.input_dim() != model.input_dim() {
        return Err(CalibError::Data(
            "data and model disagree on the input dimension".into(),
        ));
    }

    let v = basis.design(data.xs());
    let phi = kernel.gram(data.xs())?;
    let (_, q2, _) = full_qr(&v);
    let phi_q2 = &phi * &q2;
    let pen_raw = q2.transpose() * &phi_q2;
    let pen = (&pen_raw + pen_raw.transpose()) * 0.5;

    // θ values at the anchors for the unperturbed start, used both for the
    // starting points and for the curvature scaling below
    let mut init_thetas = DMatrix::zeros(n, q);
    let mut const_theta: Option<Vec<f64>> = None;
    if let Some(init) = &opts.init {
        init_thetas = &v * init.alpha.transpose() + &phi * init.beta.transpose();
    } else {
        let cf = baselines::fit_const(data, model)?;
        for j in 0..q {
            init_thetas.column_mut(j).fill(cf.theta[j]);
        }
        const_theta = Some(cf.theta);
    }

    // whitening transform of the penalty: pen = E Λ E', T0 = E Λ^{-1/2}
    let free = n - k;
    let eig = pen.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = (1e-12 * lam_max).max(f64::MIN_POSITIVE);
    let mut trans = eig.eigenvectors.clone();
    let mut trans_inv = eig.eigenvectors.transpose();
    for i in 0..free {
        let l = eig.eigenvalues[i].max(floor);
        let s = l.sqrt();
        trans.column_mut(i).scale_mut(1.0 / s);
        trans_inv.row_mut(i).scale_mut(s);
    }
    let design_white = &phi_q2 * &trans;

    // Jacobi balance: per coordinate, data-fit curvature at the start plus
    // the (whitened) penalty curvature nλ
    let nl = n as f64 * lambda;
    let mut wbar = DMatrix::zeros(n, q);
    for i in 0..n {
        let x = data.x_row(i);
        let t: Vec<f64> = init_thetas.row(i).iter().copied().collect();
        let g = model.grad_theta(&x, &t);
        for j in 0..q {
            wbar[(i, j)] = g.column(j).norm();
        }
    }
    let mut pen_diag = DVector::zeros(free);
    for i in 0..free {
        let mut acc = 0.0;
        for row in 0..n {
            for j in 0..q {
                let wd = wbar[(row, j)] * design_white[(row, i)];
                acc += wd * wd;
            }
        }
        let s2 = acc / q as f64 + nl;
        let s = s2.sqrt().max(f64::MIN_POSITIVE);
        trans.column_mut(i).scale_mut(1.0 / s);
        trans_inv.row_mut(i).scale_mut(s);
        pen_diag[i] = nl / s2;
    }
    let design_c = &phi_q2 * &trans;
    let problem = ReducedProblem {
        data,
        model,
        v,
        design_c,
        pen_diag,
        n,
        k,
        q,
    };

    // assemble starting points
    let mut starts: Vec<DVector<f64>> = Vec::new();
    if let Some(init) = &opts.init {
        let mut z = DVector::zeros(q * n);
        for j in 0..q {
            z.rows_mut(j * n, k).copy_from(&init.alpha.row(j).transpose());
            let c = &trans_inv * (q2.transpose() * init.beta.row(j).transpose());
            z.rows_mut(j * n + k, n - k).copy_from(&c);
        }
        starts.push(z);
    } else {
        let theta_base = const_theta.expect("constant fit computed above");
        let n_starts = opts.multistart.unwrap_or(if q >= 2 { 5 } else { 1 });
        let mut rng = stream_rng(opts.seed, streams::MULTISTART);
        let box_ = model.param_box();
        for s in 0..n_starts.max(1) {
            let mut theta0 = theta_base.clone();
            if s > 0 {
                // perturb inside 20% of the box width around the constant
                for (j, t) in theta0.iter_mut().enumerate() {
                    let w = if box_.is_bounded() {
                        box_.upper[j] - box_.lower[j]
                    } else {
                        2.0 * (1.0 + t.abs())
                    };
                    *t += rng.random_range(-0.1..0.1) * w;
                }
                box_.clamp(&mut theta0);
            }
            let mut z = DVector::zeros(q * n);
            for (j, &t) in theta0.iter().enumerate() {
                // constant function: intercept coefficient only
                z[j * n] = t;
            }
            starts.push(z);
        }
    }

    let optim_opts = OptimOptions {
        max_iter: opts.max_iter,
        tol_f: opts.tol,
        ..Default::default()
    };
    let mut best: Option<(DVector<f64>, crate::optim::OptimReport)> = None;
    let mut failures: Vec<String> = Vec::new();
    let n_starts = starts.len();
    for z0 in starts {
        match minimize(|z| problem.value_grad(z), z0, |z| problem.feasible(z), &optim_opts) {
            Ok((z, rep)) => {
                if best.as_ref().map_or(true, |(_, b)| rep.objective < b.objective) {
                    best = Some((z, rep));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let Some((z, rep)) = best else {
        return Err(CalibError::Aggregate(failures));
    };

    let mut alpha = DMatrix::zeros(q, k);
    let mut beta = DMatrix::zeros(q, n);
    for j in 0..q {
        alpha
            .row_mut(j)
            .copy_from(&z.rows(j * n, k).transpose());
        let c = &trans * z.rows(j * n + k, n - k);
        beta.row_mut(j).copy_from(&(&q2 * c).transpose());
    }
    let report = ConvergenceReport {
        objective: rep.objective,
        iterations: rep.iterations,
        converged: rep.converged,
        feasible: rep.feasible,
        monotone: rep.objective_monotone(),
        starts: n_starts,
    };
    Ok(CalibrationEstimate {
        kernel: kernel.clone(),
        basis,
        anchors: data.xs().clone(),
        alpha,
        beta,
        lambda,
        theta_box: model.param_box().clone(),
        report,
    })
}
