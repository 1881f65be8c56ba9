//! Constant and parametric functional-calibration comparators, with
//! Gauss-Newton Wald confidence bands.

use nalgebra::{DMatrix, DVector};

use crate::calibrate::PhysicalDataset;
use crate::error::{CalibError, Result};
use crate::model::ComputerModel;
use crate::optim::{minimize, OptimOptions};
use crate::uq::{normal_quantile, BandTarget, ConfidenceBand};

/// Constant-calibration fit: the ordinary least squares estimate of a single
/// θ ∈ Θ.
#[derive(Clone, Debug)]
pub struct ConstFit {
    pub theta: Vec<f64>,
    /// Mean squared residual at θ̂.
    pub objective: f64,
    pub converged: bool,
}

/// Fit the optimal constant θ̂ = argmin (1/n) Σ_i |y_i - y^s(x_i, θ)|² by
/// multistart quasi-Newton over a 3^q interior lattice of Θ.
pub fn fit_const(data: &PhysicalDataset, model: &dyn ComputerModel) -> Result<ConstFit> {
    let n = data.n();
    let q = model.param_dim();
    let objective = |theta: &DVector<f64>| -> (f64, DVector<f64>) {
        let t: Vec<f64> = theta.iter().copied().collect();
        let mut val = 0.0;
        let mut grad = DVector::zeros(q);
        for i in 0..n {
            let x = data.x_row(i);
            let (pred, g) = model.eval_with_grad(&x, &t);
            for k in 0..data.response_dim() {
                let r = data.ys()[(i, k)] - pred[k];
                val += r * r;
                for j in 0..q {
                    grad[j] -= 2.0 * r * g[(k, j)];
                }
            }
        }
        (val / n as f64, grad / n as f64)
    };
    let feasible = |theta: &DVector<f64>| {
        let t: Vec<f64> = theta.iter().copied().collect();
        model.param_box().contains(&t)
    };

    let starts = model.param_box().lattice(3);
    let opts = OptimOptions::default();
    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    let mut errors = Vec::new();
    for start in starts {
        let z0 = DVector::from_vec(start);
        match minimize(&objective, z0, &feasible, &opts) {
            Ok((z, rep)) => {
                if best.as_ref().map_or(true, |(_, b, _)| rep.objective < *b) {
                    best = Some((z, rep.objective, rep.converged));
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let Some((z, obj, converged)) = best else {
        return Err(CalibError::Aggregate(errors));
    };
    Ok(ConstFit {
        theta: z.iter().copied().collect(),
        objective: obj,
        converged,
    })
}

/// Parametric calibration-function families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParametricFamily {
    /// θ(x) = γ0 exp(γ1 x)
    Exp,
    /// θ(x) = γ0 + γ1 x + γ2 x²
    Quad,
}

impl ParametricFamily {
    pub fn param_count(&self) -> usize {
        match self {
            ParametricFamily::Exp => 2,
            ParametricFamily::Quad => 3,
        }
    }

    pub fn theta(&self, gamma: &[f64], x: f64) -> f64 {
        match self {
            ParametricFamily::Exp => gamma[0] * (gamma[1] * x).exp(),
            ParametricFamily::Quad => gamma[0] + gamma[1] * x + gamma[2] * x * x,
        }
    }

    /// ∂θ/∂γ.
    pub fn grad_gamma(&self, gamma: &[f64], x: f64) -> Vec<f64> {
        match self {
            ParametricFamily::Exp => {
                let e = (gamma[1] * x).exp();
                vec![e, gamma[0] * x * e]
            }
            ParametricFamily::Quad => vec![1.0, x, x * x],
        }
    }
}

/// A fitted parametric calibration function. For q > 1 the family applies
/// coordinatewise with independent coefficient vectors.
#[derive(Clone, Debug)]
pub struct ParametricFit {
    pub family: ParametricFamily,
    /// q×p coefficient matrix (row j parameterizes θ_j).
    pub gammas: DMatrix<f64>,
    pub objective: f64,
    pub converged: bool,
}

impl ParametricFit {
    pub fn param_dim(&self) -> usize {
        self.gammas.nrows()
    }

    pub fn theta_at(&self, x: f64) -> Vec<f64> {
        (0..self.gammas.nrows())
            .map(|j| {
                let g: Vec<f64> = self.gammas.row(j).iter().copied().collect();
                self.family.theta(&g, x)
            })
            .collect()
    }
}

fn parametric_starts(
    family: ParametricFamily,
    base: &[f64],
    domain: (f64, f64),
) -> Vec<DVector<f64>> {
    let q = base.len();
    let p = family.param_count();
    let (lo, hi) = domain;
    let w = hi - lo;
    let mid = 0.5 * (lo + hi);
    // per-coordinate candidate γ rows, anchored so θ_j(mid) = base_j
    let per_coord: Vec<Vec<Vec<f64>>> = (0..q)
        .map(|j| match family {
            ParametricFamily::Exp => [-2.0, -0.5, 0.0, 0.5, 2.0]
                .iter()
                .map(|&s| {
                    let slope = s / w;
                    vec![base[j] * (-slope * mid).exp(), slope]
                })
                .collect(),
            ParametricFamily::Quad => {
                let scale = (base[j].abs() + 1.0) / (w * w);
                [-1.0, 0.0, 1.0]
                    .iter()
                    .map(|&c| {
                        let g2 = c * scale;
                        let g1 = -2.0 * g2 * mid;
                        let g0 = base[j] - g1 * mid - g2 * mid * mid;
                        vec![g0, g1, g2]
                    })
                    .collect()
            }
        })
        .collect();
    // cartesian product across coordinates
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for rows in &per_coord {
        let mut next = Vec::new();
        for c in &combos {
            for row in rows {
                let mut c2 = c.clone();
                c2.extend(row.iter());
                next.push(c2);
            }
        }
        combos = next;
    }
    combos
        .into_iter()
        .map(DVector::from_vec)
        .collect::<Vec<_>>()
        .into_iter()
        .map(|v| {
            debug_assert_eq!(v.len(), q * p);
            v
        })
        .collect()
}

/// Fit a parametric calibration function by multistart quasi-Newton,
/// monitoring that θ_γ(x_i) stays inside Θ.
pub fn fit_parametric(
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    family: ParametricFamily,
) -> Result<ParametricFit> {
    let n = data.n();
    let q = model.param_dim();
    let p = family.param_count();
    let theta_of = |gamma: &DVector<f64>, x: f64| -> Vec<f64> {
        (0..q)
            .map(|j| {
                let g: Vec<f64> = gamma.rows(j * p, p).iter().copied().collect();
                family.theta(&g, x)
            })
            .collect()
    };
    let objective = |gamma: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut val = 0.0;
        let mut grad = DVector::zeros(q * p);
        for i in 0..n {
            let x = data.x_row(i);
            let t = theta_of(gamma, x[0]);
            let (pred, gm) = model.eval_with_grad(&x, &t);
            for k in 0..data.response_dim() {
                let r = data.ys()[(i, k)] - pred[k];
                val += r * r;
                for j in 0..q {
                    let g: Vec<f64> = gamma.rows(j * p, p).iter().copied().collect();
                    let dg = family.grad_gamma(&g, x[0]);
                    for (l, &dgl) in dg.iter().enumerate() {
                        grad[j * p + l] -= 2.0 * r * gm[(k, j)] * dgl;
                    }
                }
            }
        }
        (val, grad)
    };
    let feasible = |gamma: &DVector<f64>| {
        (0..n).all(|i| {
            let t = theta_of(gamma, data.xs()[(i, 0)]);
            model.param_box().contains(&t)
        })
    };

    let base = fit_const(data, model)?;
    let starts = parametric_starts(family, &base.theta, data.domain());
    let opts = OptimOptions {
        max_iter: 800,
        ..Default::default()
    };
    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    let mut errors = Vec::new();
    for z0 in starts {
        match minimize(&objective, z0, &feasible, &opts) {
            Ok((z, rep)) => {
                if best.as_ref().map_or(true, |(_, b, _)| rep.objective < *b) {
                    best = Some((z, rep.objective, rep.converged));
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let Some((z, obj, converged)) = best else {
        return Err(CalibError::Aggregate(errors));
    };
    let mut gammas = DMatrix::zeros(q, p);
    for j in 0..q {
        gammas.row_mut(j).copy_from(&z.rows(j * p, p).transpose());
    }
    Ok(ParametricFit {
        family,
        gammas,
        objective: obj,
        converged,
    })
}

/// Either baseline, for shared band construction.
#[derive(Clone, Debug)]
pub enum BaselineFit {
    Const(ConstFit),
    Parametric(ParametricFit),
}

impl BaselineFit {
    pub fn theta_at(&self, x: f64) -> Vec<f64> {
        match self {
            BaselineFit::Const(c) => c.theta.clone(),
            BaselineFit::Parametric(p) => p.theta_at(x),
        }
    }

    fn total_params(&self, q: usize) -> usize {
        match self {
            BaselineFit::Const(_) => q,
            BaselineFit::Parametric(p) => q * p.family.param_count(),
        }
    }

    /// q×P Jacobian ∂θ_j(x)/∂param.
    fn theta_jacobian(&self, x: f64, q: usize) -> DMatrix<f64> {
        match self {
            BaselineFit::Const(_) => DMatrix::identity(q, q),
            BaselineFit::Parametric(pf) => {
                let p = pf.family.param_count();
                let mut j = DMatrix::zeros(q, q * p);
                for row in 0..q {
                    let g: Vec<f64> = pf.gammas.row(row).iter().copied().collect();
                    let dg = pf.family.grad_gamma(&g, x);
                    for (l, &d) in dg.iter().enumerate() {
                        j[(row, row * p + l)] = d;
                    }
                }
                j
            }
        }
    }
}

/// Gauss-Newton covariance of the fitted parameters:
/// σ̂² (J'J)⁻¹ with σ̂² = RSS / (n - P).
fn gauss_newton_cov(
    fit: &BaselineFit,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
) -> Result<DMatrix<f64>> {
    if data.response_dim() != 1 {
        return Err(CalibError::Parameter(
            "baseline bands require a one-dimensional response".into(),
        ));
    }
    let n = data.n();
    let q = model.param_dim();
    let pp = fit.total_params(q);
    if n <= pp {
        return Err(CalibError::Data(format!(
            "need n > {pp} observations for baseline bands, got {n}"
        )));
    }
    let mut jac = DMatrix::zeros(n, pp);
    let mut rss = 0.0;
    for i in 0..n {
        let x = data.x_row(i);
        let t = fit.theta_at(x[0]);
        let pred = model.eval(&x, &t);
        let gm = model.grad_theta(&x, &t); // 1×q
        let jt = fit.theta_jacobian(x[0], q); // q×P
        let row = gm.row(0) * &jt;
        jac.row_mut(i).copy_from(&row);
        let r = data.ys()[(i, 0)] - pred[0];
        rss += r * r;
    }
    let sigma2 = rss / (n - pp) as f64;
    let jtj = jac.transpose() * &jac;
    let inv = jtj
        .lu()
        .try_inverse()
        .ok_or_else(|| CalibError::Numeric("singular J'J in baseline bands".into()))?;
    Ok(inv * sigma2)
}

/// Pointwise Wald band for θ_j(x) over the grid.
pub fn baseline_theta_ci(
    fit: &BaselineFit,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    grid: &[f64],
    level: f64,
) -> Result<Vec<ConfidenceBand>> {
    let cov = gauss_newton_cov(fit, data, model)?;
    let q = model.param_dim();
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let mut bands = Vec::with_capacity(q);
    for j in 0..q {
        let mut center = Vec::with_capacity(grid.len());
        let mut lower = Vec::with_capacity(grid.len());
        let mut upper = Vec::with_capacity(grid.len());
        for &x in grid {
            let t = fit.theta_at(x);
            let jt = fit.theta_jacobian(x, q);
            let h = jt.row(j).transpose();
            let var = (h.transpose() * &cov * &h)[(0, 0)].max(0.0);
            let half = z * var.sqrt();
            center.push(t[j]);
            lower.push(t[j] - half);
            upper.push(t[j] + half);
        }
        bands.push(ConfidenceBand {
            grid: grid.to_vec(),
            center,
            lower,
            upper,
            level,
            sigma2: f64::NAN,
            rho: 0.0,
            target: BandTarget::Theta(j),
            caveat: None,
            degenerate_gradient: false,
        });
    }
    Ok(bands)
}

/// Pointwise Wald band for the plug-in prediction y^s(x, θ̂(x)).
pub fn baseline_prediction_ci(
    fit: &BaselineFit,
    data: &PhysicalDataset,
    model: &dyn ComputerModel,
    grid: &[f64],
    level: f64,
) -> Result<ConfidenceBand> {
    let cov = gauss_newton_cov(fit, data, model)?;
    let q = model.param_dim();
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let mut center = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for &x in grid {
        let t = fit.theta_at(x);
        let pred = model.eval(&[x], &t)[0];
        let gm = model.grad_theta(&[x], &t);
        let jt = fit.theta_jacobian(x, q);
        let h = (gm.row(0) * &jt).transpose();
        let var = (h.transpose() * &cov * &h)[(0, 0)].max(0.0);
        let half = z * var.sqrt();
        center.push(pred);
        lower.push(pred - half);
        upper.push(pred + half);
    }
    Ok(ConfidenceBand {
        grid: grid.to_vec(),
        center,
        lower,
        upper,
        level,
        sigma2: f64::NAN,
        rho: 0.0,
        target: BandTarget::Prediction,
        caveat: None,
        degenerate_gradient: false,
    })
}
