//! The full q = 1 identity-model pipeline against the independent dense
//! smoothing-spline oracle: fitted function, smoother matrix, GCV, σ̂², and
//! posterior variance.

mod common;

use common::SplineOracle;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rkhs_calib_core::calibrate::{fit, FitOptions};
use rkhs_calib_core::kernel::Kernel;
use rkhs_calib_core::model::IdentityModel;
use rkhs_calib_core::rng::stream_rng;
use rkhs_calib_core::select::linearize;
use rkhs_calib_core::uq::theta_variance;
use rkhs_calib_core::PhysicalDataset;

fn random_problem(n: usize, seed: u64) -> (PhysicalDataset, DVector<f64>) {
    let mut rng = stream_rng(seed, 41);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    xs.sort_by(f64::total_cmp);
    let ys = DVector::from_fn(n, |i, _| {
        let x = xs[i];
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        (4.0 * x).sin() + 0.5 * x + 0.1 * z
    });
    let data = PhysicalDataset::new(
        DMatrix::from_column_slice(n, 1, &xs),
        DMatrix::from_column_slice(n, 1, ys.as_slice()),
        vec![(0.0, 1.0)],
    )
    .unwrap();
    (data, ys)
}

#[test]
fn fitted_values_match_dense_solve() {
    let kernel = Kernel::sobolev_cubic_unit();
    for seed in 0..5u64 {
        let (data, ys) = random_problem(30, seed);
        let oracle = SplineOracle::new(&kernel, data.xs());
        for &lambda in &[1e-4, 1e-2] {
            let opts = FitOptions {
                max_iter: 5000,
                tol: 1e-13,
                ..Default::default()
            };
            let est = fit(&data, &IdentityModel::new(), &kernel, lambda, &opts).unwrap();
            let direct = oracle.fitted(&ys, lambda);
            let mut worst = 0.0f64;
            for i in 0..data.n() {
                let t = est.theta_at(&data.x_row(i)).unwrap()[0];
                worst = worst.max((t - direct[i]).abs());
            }
            assert!(
                worst < 1e-6,
                "seed {seed} λ {lambda}: fit vs oracle max diff {worst}"
            );
        }
    }
}

#[test]
fn smoother_matrix_matches_dense_hat_matrix() {
    let kernel = Kernel::sobolev_cubic_unit();
    for seed in [3u64, 8, 21] {
        let (data, _) = random_problem(25, seed);
        let est = fit(
            &data,
            &IdentityModel::new(),
            &kernel,
            1e-3,
            &FitOptions::default(),
        )
        .unwrap();
        let sys = linearize(&est, &data, &IdentityModel::new()).unwrap();
        let oracle = SplineOracle::new(&kernel, data.xs());
        for &lambda in &[1e-3, 1e-1] {
            let a = sys.smoother_matrix(lambda).unwrap();
            let a_dense = oracle.hat_matrix(lambda);
            let diff = (&a - &a_dense).amax();
            assert!(diff < 1e-8, "seed {seed} λ {lambda}: hat diff {diff}");
        }
    }
}

#[test]
fn gcv_and_sigma2_match_dense_formulas() {
    let kernel = Kernel::sobolev_cubic_unit();
    for seed in [1u64, 9] {
        let (data, ys) = random_problem(28, seed);
        let est = fit(
            &data,
            &IdentityModel::new(),
            &kernel,
            1e-3,
            &FitOptions::default(),
        )
        .unwrap();
        let sys = linearize(&est, &data, &IdentityModel::new()).unwrap();
        let oracle = SplineOracle::new(&kernel, data.xs());
        for &lambda in &[3e-4, 1e-2, 0.5] {
            let g = sys.gcv(lambda).unwrap();
            let go = oracle.gcv(&ys, lambda);
            assert!(
                (g - go).abs() / go.max(1e-300) < 1e-8,
                "seed {seed} λ {lambda}: GCV {g} vs oracle {go}"
            );
            let s = sys.sigma2_hat(lambda).unwrap();
            let so = oracle.sigma2(&ys, lambda);
            assert!(
                (s - so).abs() / so.max(1e-300) < 1e-8,
                "seed {seed} λ {lambda}: σ² {s} vs oracle {so}"
            );
        }
    }
}

#[test]
fn theta_variance_matches_bayesian_posterior() {
    let kernel = Kernel::sobolev_cubic_unit();
    let (data, _) = random_problem(22, 4);
    let lambda = 2e-3;
    let est = fit(
        &data,
        &IdentityModel::new(),
        &kernel,
        lambda,
        &FitOptions::default(),
    )
    .unwrap();
    let sys = linearize(&est, &data, &IdentityModel::new()).unwrap();
    let oracle = SplineOracle::new(&kernel, data.xs());
    let sigma2 = 0.01;
    for &rho in &[1e8, 1e10] {
        for &x in &[0.15, 0.4, 0.85] {
            let v = theta_variance(&sys, &est, &[x], sigma2, rho, 0).unwrap();
            let vo = oracle.posterior_variance(x, lambda, sigma2, rho);
            assert!(
                (v - vo).abs() / vo.max(1e-300) < 1e-6,
                "x {x} ρ {rho}: variance {v} vs oracle {vo}"
            );
        }
    }
}

#[test]
fn off_design_evaluation_matches_oracle() {
    let kernel = Kernel::sobolev_cubic_unit();
    let (data, ys) = random_problem(20, 12);
    let lambda = 5e-3;
    let opts = FitOptions {
        max_iter: 5000,
        tol: 1e-13,
        ..Default::default()
    };
    let est = fit(&data, &IdentityModel::new(), &kernel, lambda, &opts).unwrap();
    let oracle = SplineOracle::new(&kernel, data.xs());
    for g in 0..17 {
        let x = (g as f64 + 0.5) / 17.0;
        let mine = est.theta_at(&[x]).unwrap()[0];
        let direct = oracle.value_at(&ys, lambda, x);
        assert!(
            (mine - direct).abs() < 1e-6,
            "x {x}: {mine} vs oracle {direct}"
        );
    }
}
