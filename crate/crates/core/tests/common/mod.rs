//! Independent dense smoothing-spline implementation used as an oracle.
//!
//! Everything here goes through one augmented linear system
//! [[Φ + nλI, V], [V', 0]] solved by LU — no QR, no F2 reduction, no shared
//! code with the library's smoother path.

// compiled into several test binaries; not every binary uses every helper
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rkhs_calib_core::kernel::Kernel;

pub struct SplineOracle {
    pub xs: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub n: usize,
    pub k: usize,
    kernel: Kernel,
}

impl SplineOracle {
    pub fn new(kernel: &Kernel, xs: &DMatrix<f64>) -> Self {
        let phi = kernel.gram(xs).unwrap();
        let v = kernel.null_basis().design(xs);
        SplineOracle {
            xs: xs.clone(),
            n: phi.nrows(),
            k: v.ncols(),
            phi,
            v,
            kernel: kernel.clone(),
        }
    }

    fn system(&self, lambda: f64) -> DMatrix<f64> {
        let (n, k) = (self.n, self.k);
        let mut sys = DMatrix::zeros(n + k, n + k);
        sys.view_mut((0, 0), (n, n))
            .copy_from(&(&self.phi + DMatrix::identity(n, n) * (n as f64 * lambda)));
        sys.view_mut((0, n), (n, k)).copy_from(&self.v);
        sys.view_mut((n, 0), (k, n)).copy_from(&self.v.transpose());
        sys
    }

    /// Solve the penalized least-squares problem for (β, α).
    pub fn coefficients(&self, y: &DVector<f64>, lambda: f64) -> (DVector<f64>, DVector<f64>) {
        let mut rhs = DVector::zeros(self.n + self.k);
        rhs.rows_mut(0, self.n).copy_from(y);
        let sol = self.system(lambda).lu().solve(&rhs).expect("oracle solve");
        (
            sol.rows(0, self.n).into_owned(),
            sol.rows(self.n, self.k).into_owned(),
        )
    }

    /// Fitted values at the design points.
    pub fn fitted(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let (beta, alpha) = self.coefficients(y, lambda);
        &self.phi * beta + &self.v * alpha
    }

    /// θ̂(x) off the design points.
    pub fn value_at(&self, y: &DVector<f64>, lambda: f64, x: f64) -> f64 {
        let (beta, alpha) = self.coefficients(y, lambda);
        let vb = self.kernel.null_basis().eval(&[x]);
        let mut acc = alpha.dot(&vb);
        for i in 0..self.n {
            let xi: Vec<f64> = self.xs.row(i).iter().copied().collect();
            acc += beta[i] * self.kernel.eval(&[x], &xi).unwrap();
        }
        acc
    }

    /// Dense hat matrix, one unit-vector solve per column.
    pub fn hat_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let mut e = DVector::zeros(self.n);
            e[j] = 1.0;
            a.set_column(j, &self.fitted(&e, lambda));
        }
        a
    }

    pub fn gcv(&self, y: &DVector<f64>, lambda: f64) -> f64 {
        let a = self.hat_matrix(lambda);
        let resid = y - &a * y;
        let n = self.n as f64;
        let tr = n - a.trace();
        (resid.norm_squared() / n) / (tr / n).powi(2)
    }

    pub fn sigma2(&self, y: &DVector<f64>, lambda: f64) -> f64 {
        let a = self.hat_matrix(lambda);
        let resid = y - &a * y;
        let tr = n_minus_trace(&a);
        resid.norm_squared() / tr
    }

    /// Bayesian posterior variance of θ(x) for the identity-weight problem.
    /// The Schur complement σ11 - Σ21' Σ22⁻¹ Σ21 is evaluated through the
    /// equivalent augmented (KKT) system
    ///
    ///   [[Φ + nλI, V], [V', -ρ⁻¹I]] [u; w] = [φ_x; v(x)],
    ///   variance = σ² / (nλ) · (Φ(x,x) - φ_x'u - v(x)'w),
    ///
    /// solved by one dense LU; the raw ρ-form cancels catastrophically at
    /// large ρ, this one does not.
    pub fn posterior_variance(&self, x: f64, lambda: f64, sigma2: f64, rho: f64) -> f64 {
        let n = self.n;
        let k = self.k;
        let nl = n as f64 * lambda;
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n))
            .copy_from(&(&self.phi + DMatrix::identity(n, n) * nl));
        kkt.view_mut((0, n), (n, k)).copy_from(&self.v);
        kkt.view_mut((n, 0), (k, n)).copy_from(&self.v.transpose());
        for i in 0..k {
            kkt[(n + i, n + i)] = -1.0 / rho;
        }
        let vb = self.kernel.null_basis().eval(&[x]);
        let mut phi_x = DVector::zeros(n);
        for i in 0..n {
            let xi: Vec<f64> = self.xs.row(i).iter().copied().collect();
            phi_x[i] = self.kernel.eval(&[x], &xi).unwrap();
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&phi_x);
        rhs.rows_mut(n, k).copy_from(&vb);
        let sol = kkt.lu().solve(&rhs).expect("oracle posterior solve");
        let quad = phi_x.dot(&sol.rows(0, n).into_owned()) + vb.dot(&sol.rows(n, k).into_owned());
        sigma2 / nl * (self.kernel.eval(&[x], &[x]).unwrap() - quad)
    }
}

fn n_minus_trace(a: &DMatrix<f64>) -> f64 {
    a.nrows() as f64 - a.trace()
}

/// 4th-order central difference of an emulator's posterior mean in θ_j.
pub fn emulator_fd4(
    em: &rkhs_calib_core::Emulator,
    x: &[f64],
    theta: &[f64],
    j: usize,
) -> f64 {
    let h = 1e-3 * (1.0 + theta[j].abs());
    let at = |s: f64| {
        let mut t = theta.to_vec();
        t[j] += s;
        em.predict(x, &t)[0]
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}
