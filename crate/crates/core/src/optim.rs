//! Limited-memory quasi-Newton minimizer with a backtracking line search and
//! a feasibility monitor: steps that would leave the feasible region are
//! halved (up to a cap) before acceptance, so iterates never go infeasible.

use nalgebra::DVector;
use std::collections::VecDeque;

use crate::error::{CalibError, Result};

#[derive(Clone, Debug)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Relative objective-change tolerance.
    pub tol_f: f64,
    /// Gradient max-norm tolerance, scaled by 1 + |f|.
    pub tol_g: f64,
    /// History length of the L-BFGS memory.
    pub memory: usize,
    /// Cap on step halvings per line search.
    pub max_halvings: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iter: 500,
            tol_f: 1e-9,
            tol_g: 1e-7,
            memory: 10,
            max_halvings: 30,
        }
    }
}

/// Outcome of a minimization run.
#[derive(Clone, Debug)]
pub struct OptimReport {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    /// Objective values at accepted iterates (monotone non-increasing).
    pub trace: Vec<f64>,
}

impl OptimReport {
    pub fn objective_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()))
    }
}

/// Minimize `f` (value and gradient) from `x0`, keeping every accepted
/// iterate inside the region accepted by `feasible`.
pub fn minimize<F, P>(
    f: F,
    x0: DVector<f64>,
    feasible: P,
    opts: &OptimOptions,
) -> Result<(DVector<f64>, OptimReport)>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
    P: Fn(&DVector<f64>) -> bool,
{
    if !feasible(&x0) {
        return Err(CalibError::Infeasible(
            "infeasible initialization handed to the optimizer".into(),
        ));
    }
    let mut x = x0;
    let (mut fx, mut gx) = f(&x);
    if !fx.is_finite() {
        return Err(CalibError::Numeric("objective not finite at start".into()));
    }
    let mut trace = vec![fx];
    let mut s_hist: VecDeque<DVector<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<DVector<f64>> = VecDeque::new();
    let mut rho_hist: VecDeque<f64> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        if gx.amax() < opts.tol_g * (1.0 + fx.abs()) {
            converged = true;
            break;
        }

        // two-loop recursion
        let mut d = -gx.clone();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            alphas[i] = rho_hist[i] * s_hist[i].dot(&d);
            d -= &y_hist[i] * alphas[i];
        }
        if let (Some(s), Some(y)) = (s_hist.back(), y_hist.back()) {
            let gamma = s.dot(y) / y.dot(y);
            if gamma.is_finite() && gamma > 0.0 {
                d *= gamma;
            }
        }
        for i in 0..m {
            let beta = rho_hist[i] * y_hist[i].dot(&d);
            d += &s_hist[i] * (alphas[i] - beta);
        }
        if d.dot(&gx) >= 0.0 {
            // not a descent direction; fall back to steepest descent
            d = -gx.clone();
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // backtracking line search with the feasibility monitor; a failed
        // quasi-Newton proposal falls back to steepest descent once before
        // the run gives up
        let mut accepted = None;
        'directions: for attempt in 0..2 {
            if attempt == 1 {
                d = -gx.clone();
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
            }
            let g_dot_d = gx.dot(&d);
            let mut step = 1.0;
            let mut infeasible_halvings = 0;
            for _ in 0..60 {
                let cand = &x + &d * step;
                if !feasible(&cand) {
                    infeasible_halvings += 1;
                    if infeasible_halvings > opts.max_halvings {
                        break;
                    }
                } else {
                    let (fc, gc) = f(&cand);
                    let armijo = fc <= fx + 1e-4 * step * g_dot_d;
                    // at precision-limit steps plain decrease still counts
                    let tiny_progress = step < 1e-8 && fc < fx;
                    if fc.is_finite() && (armijo || tiny_progress) {
                        accepted = Some((cand, fc, gc));
                        break 'directions;
                    }
                }
                step *= 0.5;
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            // no acceptable feasible step in any direction; the current
            // iterate is as good as this scheme gets
            converged = gx.amax() < 10.0 * opts.tol_g * (1.0 + fx.abs());
            break;
        };

        let s = &xn - &x;
        let yv = &gn - &gx;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if s_hist.len() == opts.memory {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(s);
            y_hist.push_back(yv);
        }

        let rel_change = (fx - fn_).abs() / (1.0 + fx.abs());
        x = xn;
        fx = fn_;
        gx = gn;
        trace.push(fx);
        if rel_change < opts.tol_f {
            converged = true;
            break;
        }
    }

    let report = OptimReport {
        objective: fx,
        iterations,
        converged,
        feasible: true,
        trace,
    };
    Ok((x, report))
}
