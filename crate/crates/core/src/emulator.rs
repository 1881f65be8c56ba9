//! Gaussian-process surrogate for expensive computer models: squared
//! exponential kernel, zero prior mean after centering, hyperparameters by
//! marginal likelihood over a log grid with coordinate refinement.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::model::{ComputerModel, ParamBox};

#[derive(Clone, Debug)]
pub struct EmulatorOptions {
    /// Diagonal jitter relative to the signal variance.
    pub jitter_rel: f64,
    /// Points per axis of the lengthscale×variance search grid.
    pub grid: usize,
    /// Coordinate-refinement sweeps after the grid search.
    pub refine_sweeps: usize,
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        EmulatorOptions {
            jitter_rel: 1e-8,
            grid: 5,
            refine_sweeps: 3,
        }
    }
}

/// Trained GP interpolator of computer-model runs over (x, θ) inputs.
#[derive(Clone, Debug)]
pub struct Emulator {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    input_dim: usize,
    param_dim: usize,
    lengthscales: Vec<f64>,
    variance: f64,
    jitter_rel: f64,
    output_means: Vec<f64>,
    /// K⁻¹ (Y - mean), one column per output.
    weights: DMatrix<f64>,
    theta_box: ParamBox,
    input_lo: Vec<f64>,
    input_hi: Vec<f64>,
}

fn corr(ls: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut z = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        z += d * d;
    }
    (-0.5 * z).exp()
}

fn cov_matrix(inputs: &DMatrix<f64>, ls: &[f64], var: f64, jitter_rel: f64) -> DMatrix<f64> {
    let m = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| inputs.row(i).iter().copied().collect())
        .collect();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = var * corr(ls, &rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    for i in 0..m {
        k[(i, i)] += jitter_rel * var;
    }
    k
}

/// Log marginal likelihood of the centered outputs, summed over columns.
fn log_marginal(
    inputs: &DMatrix<f64>,
    centered: &DMatrix<f64>,
    ls: &[f64],
    var: f64,
    jitter_rel: f64,
) -> Option<f64> {
    let m = inputs.nrows();
    let k = cov_matrix(inputs, ls, var, jitter_rel);
    let chol = Cholesky::new(k)?;
    let mut logdet = 0.0;
    for i in 0..m {
        logdet += 2.0 * chol.l_dirty()[(i, i)].ln();
    }
    let mut lml = 0.0;
    for c in 0..centered.ncols() {
        let y = centered.column(c).into_owned();
        let alpha = chol.solve(&y);
        lml += -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    Some(lml)
}


/// Solve for interpolation weights with iterative refinement against the
/// unjittered covariance; returns the weights and the final max residual.
fn refined_weights(
    k: &DMatrix<f64>,
    centered: &DMatrix<f64>,
    jv: f64,
) -> Option<(DMatrix<f64>, f64)> {
    let chol = Cholesky::new(k.clone())?;
    let mut w = chol.solve(centered);
    let mut best_w = w.clone();
    let mut best_r = f64::INFINITY;
    let mut prev = f64::INFINITY;
    for _ in 0..40 {
        // residual of the unjittered system: y - (K - jI) w
        let resid = centered - (k * &w - &w * jv);
        let r = resid.amax();
        if r < best_r {
            best_r = r;
            best_w = w.clone();
        }
        if best_r < 5e-7 || r >= prev * 0.9 {
            break;
        }
        prev = r;
        w += chol.solve(&resid);
    }
    Some((best_w, best_r))
}

/// Max training residual evaluated exactly as `predict` evaluates it.
fn predict_residual(
    inputs: &DMatrix<f64>,
    centered: &DMatrix<f64>,
    ls: &[f64],
    var: f64,
    weights: &DMatrix<f64>,
) -> f64 {
    let m = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| inputs.row(i).iter().copied().collect())
        .collect();
    let mut worst = 0.0f64;
    for i in 0..m {
        let ks = DVector::from_fn(m, |r, _| var * corr(ls, &rows[i], &rows[r]));
        for c in 0..centered.ncols() {
            let pred = ks.dot(&weights.column(c).into_owned());
            worst = worst.max((pred - centered[(i, c)]).abs());
        }
    }
    worst
}

/// Train a GP emulator on m runs: `inputs` is m×(d+q) [x | θ], `outputs`
/// m×r. Hyperparameters maximize the log marginal likelihood over a log
/// grid of (lengthscale multiplier, variance multiplier) followed by
/// coordinate refinement; lengthscales are per-dimension multiples of the
/// input ranges.
pub fn train_emulator(
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    input_dim: usize,
    param_dim: usize,
    opts: &EmulatorOptions,
) -> Result<Emulator> {
    let m = inputs.nrows();
    let dims = input_dim + param_dim;
    if inputs.ncols() != dims {
        return Err(CalibError::Data(format!(
            "expected {dims} input columns, got {}",
            inputs.ncols()
        )));
    }
    if m < 2 {
        return Err(CalibError::Data("need at least two training runs".into()));
    }
    if outputs.nrows() != m {
        return Err(CalibError::Data("inputs/outputs row mismatch".into()));
    }
    if outputs.iter().any(|v| !v.is_finite()) || inputs.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::Data("non-finite training data".into()));
    }
    for i in 0..m {
        for j in 0..i {
            if (0..dims).all(|c| inputs[(i, c)] == inputs[(j, c)]) {
                return Err(CalibError::Data(format!(
                    "duplicate training inputs at rows {j} and {i}"
                )));
            }
        }
    }

    // center outputs
    let output_means: Vec<f64> = (0..outputs.ncols()).map(|c| outputs.column(c).mean()).collect();
    let mut centered = outputs.clone();
    for c in 0..centered.ncols() {
        centered.column_mut(c).add_scalar_mut(-output_means[c]);
    }
    let out_var = centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64;
    let out_var = out_var.max(1e-12);

    // per-dimension ranges set the lengthscale anisotropy
    let mut ranges = vec![0.0; dims];
    let mut lo = vec![f64::INFINITY; dims];
    let mut hi = vec![f64::NEG_INFINITY; dims];
    for c in 0..dims {
        for i in 0..m {
            lo[c] = lo[c].min(inputs[(i, c)]);
            hi[c] = hi[c].max(inputs[(i, c)]);
        }
        ranges[c] = (hi[c] - lo[c]).max(1e-9);
    }

    let g = opts.grid.max(2);
    let ls_mults: Vec<f64> = (0..g)
        .map(|i| 10f64.powf(-1.3 + 1.6 * i as f64 / (g - 1) as f64))
        .collect();
    let var_mults: Vec<f64> = (0..g)
        .map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / (g - 1) as f64))
        .collect();

    let score = |lm: f64, vm: f64| -> Option<f64> {
        let ls: Vec<f64> = ranges.iter().map(|r| lm * r).collect();
        log_marginal(&inputs, &centered, &ls, vm * out_var, opts.jitter_rel)
    };

    let mut best = (ls_mults[g / 2], var_mults[g / 2], f64::NEG_INFINITY);
    for &lm in &ls_mults {
        for &vm in &var_mults {
            if let Some(s) = score(lm, vm) {
                if s > best.2 {
                    best = (lm, vm, s);
                }
            }
        }
    }
    if best.2 == f64::NEG_INFINITY {
        return Err(CalibError::Numeric(
            "marginal-likelihood evaluation failed on the whole grid".into(),
        ));
    }
    for _ in 0..opts.refine_sweeps {
        let mut improved = false;
        for &f in &[0.7, 1.0 / 0.7] {
            if let Some(s) = score(best.0 * f, best.1) {
                if s > best.2 {
                    best = (best.0 * f, best.1, s);
                    improved = true;
                }
            }
        }
        for &f in &[0.7, 1.0 / 0.7] {
            if let Some(s) = score(best.0, best.1 * f) {
                if s > best.2 {
                    best = (best.0, best.1 * f, s);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    // per-dimension coordinate descent with a golden-section line search in
    // log space, so anisotropy is not limited to shared range multiples
    let mut ls_base: Vec<f64> = ranges.iter().map(|r| best.0 * r).collect();
    let mut var_mult = best.1;
    let mut best_score = best.2;
    let score_vec = |ls: &[f64], vm: f64| -> Option<f64> {
        log_marginal(&inputs, &centered, ls, vm * out_var, opts.jitter_rel)
    };
    let golden = |eval: &dyn Fn(f64) -> Option<f64>, current: f64| -> (f64, Option<f64>) {
        // maximize over log-multiplier in [-1.5, 1.5] around the current value
        let (mut a, mut b) = (-1.5f64, 1.5f64);
        let phi_ratio = 0.618_033_988_749_895;
        let mut x1 = b - phi_ratio * (b - a);
        let mut x2 = a + phi_ratio * (b - a);
        let at = |t: f64| eval(current * t.exp());
        let mut f1 = at(x1);
        let mut f2 = at(x2);
        for _ in 0..24 {
            let v1 = f1.unwrap_or(f64::NEG_INFINITY);
            let v2 = f2.unwrap_or(f64::NEG_INFINITY);
            if v1 < v2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi_ratio * (b - a);
                f2 = at(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi_ratio * (b - a);
                f1 = at(x1);
            }
        }
        let t = 0.5 * (a + b);
        (current * t.exp(), at(t))
    };
    for _ in 0..opts.refine_sweeps {
        let mut improved = false;
        for dim in 0..dims {
            let ls_snapshot = ls_base.clone();
            let vm = var_mult;
            let eval = |cand: f64| -> Option<f64> {
                let mut ls = ls_snapshot.clone();
                ls[dim] = cand;
                score_vec(&ls, vm)
            };
            let (cand, sc) = golden(&eval, ls_base[dim]);
            if let Some(sc) = sc {
                if sc > best_score + 1e-9 {
                    ls_base[dim] = cand;
                    best_score = sc;
                    improved = true;
                }
            }
        }
        {
            let ls_snapshot = ls_base.clone();
            let eval = |cand: f64| -> Option<f64> { score_vec(&ls_snapshot, cand) };
            let (cand, sc) = golden(&eval, var_mult);
            if let Some(sc) = sc {
                if sc > best_score + 1e-9 {
                    var_mult = cand;
                    best_score = sc;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    // noiseless interpolation contract (absolute, < 1e-6). The jittered
    // solve leaves a residual of exactly jitter·var·w, which iterative
    // refinement against the unjittered covariance removes while keeping
    // the marginal-likelihood-optimal hyperparameters: each sweep
    //   w ← w + (K + jI)⁻¹ (y - K w)
    // contracts the residual by j / (j + λ_min(K)) on the resolvable
    // subspace. Lengthscale backoff is the last resort.
    let tol = 5e-7;
    let mut ls_mult = 1.0;
    let mut jitter_rel = opts.jitter_rel;
    let (lengthscales, variance, weights, jitter_rel) = loop {
        let ls: Vec<f64> = ls_base.iter().map(|r| ls_mult * r).collect();
        let var = var_mult * out_var;
        // cascade toward smaller jitters before touching the lengthscales:
        // the refinement stall floor scales with the jitter
        let mut found = None;
        let mut j = jitter_rel;
        for _ in 0..4 {
            let k = cov_matrix(&inputs, &ls, var, j);
            if let Some((w, resid)) = refined_weights(&k, &centered, j * var) {
                // validate through the same dot products predict() uses;
                // with large weights the gemm-order residual can disagree
                let honest = predict_residual(&inputs, &centered, &ls, var, &w);
                if resid < tol && honest < tol {
                    found = Some((w, j));
                    break;
                }
            }
            j *= 1e-2;
        }
        if let Some((w, j)) = found {
            break (ls, var, w, j);
        }
        // too ill-conditioned for refinement; back off the lengthscales
        // gently (the conditioning improves steeply in the lengthscale)
        ls_mult *= 0.85;
        jitter_rel = opts.jitter_rel;
        if ls_mult < 1e-4 {
            return Err(CalibError::Numeric(
                "could not reach the interpolation tolerance while training".into(),
            ));
        }
    };

    let theta_box = ParamBox::new(
        lo[input_dim..].to_vec(),
        hi[input_dim..]
            .iter()
            .zip(&lo[input_dim..])
            .map(|(&h, &l)| if h > l { h } else { l + 1e-9 })
            .collect(),
    )?;
    Ok(Emulator {
        inputs,
        outputs,
        input_dim,
        param_dim,
        lengthscales,
        variance,
        jitter_rel,
        output_means,
        weights,
        theta_box,
        input_lo: lo,
        input_hi: hi,
    })
}

impl Emulator {
    pub fn num_runs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn training_outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    fn joint(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.input_dim + self.param_dim);
        z.extend_from_slice(x);
        z.extend_from_slice(theta);
        z
    }

    fn kstar(&self, z: &[f64]) -> DVector<f64> {
        let m = self.num_runs();
        DVector::from_fn(m, |i, _| {
            let row: Vec<f64> = self.inputs.row(i).iter().copied().collect();
            self.variance * corr(&self.lengthscales, z, &row)
        })
    }

    /// Posterior mean at (x, θ).
    pub fn predict(&self, x: &[f64], theta: &[f64]) -> DVector<f64> {
        let z = self.joint(x, theta);
        let ks = self.kstar(&z);
        let mut out = DVector::zeros(self.outputs.ncols());
        for c in 0..out.len() {
            out[c] = self.output_means[c] + ks.dot(&self.weights.column(c).into_owned());
        }
        out
    }

    /// Posterior mean with an extrapolation flag: true when (x, θ) leaves
    /// the trained rectangle.
    pub fn predict_with_flag(&self, x: &[f64], theta: &[f64]) -> (DVector<f64>, bool) {
        let z = self.joint(x, theta);
        let outside = z
            .iter()
            .enumerate()
            .any(|(c, &v)| v < self.input_lo[c] - 1e-12 || v > self.input_hi[c] + 1e-12);
        (self.predict(x, theta), outside)
    }

    /// Analytic gradient of the posterior mean with respect to θ.
    pub fn grad(&self, x: &[f64], theta: &[f64]) -> DMatrix<f64> {
        let z = self.joint(x, theta);
        let ks = self.kstar(&z);
        let r = self.outputs.ncols();
        let q = self.param_dim;
        let m = self.num_runs();
        let mut g = DMatrix::zeros(r, q);
        for j in 0..q {
            let col = self.input_dim + j;
            let ls2 = self.lengthscales[col] * self.lengthscales[col];
            for c in 0..r {
                let mut acc = 0.0;
                for i in 0..m {
                    let dk = -ks[i] * (z[col] - self.inputs[(i, col)]) / ls2;
                    acc += dk * self.weights[(i, c)];
                }
                g[(c, j)] = acc;
            }
        }
        g
    }

    /// Serializable snapshot (weights are re-derived on load).
    pub fn to_spec(&self) -> EmulatorSpec {
        EmulatorSpec {
            schema_version: 1,
            input_dim: self.input_dim,
            param_dim: self.param_dim,
            lengthscales: self.lengthscales.clone(),
            variance: self.variance,
            jitter_rel: self.jitter_rel,
            inputs: matrix_rows(&self.inputs),
            outputs: matrix_rows(&self.outputs),
        }
    }

    pub fn from_spec(spec: EmulatorSpec) -> Result<Emulator> {
        if spec.schema_version != 1 {
            return Err(CalibError::Data(format!(
                "unsupported emulator schema version {}",
                spec.schema_version
            )));
        }
        let inputs = rows_matrix(&spec.inputs)?;
        let outputs = rows_matrix(&spec.outputs)?;
        let m = inputs.nrows();
        let dims = spec.input_dim + spec.param_dim;
        if inputs.ncols() != dims || outputs.nrows() != m {
            return Err(CalibError::Data("inconsistent emulator file".into()));
        }
        if spec.lengthscales.len() != dims || spec.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(CalibError::Data("bad lengthscales in emulator file".into()));
        }
        let output_means: Vec<f64> =
            (0..outputs.ncols()).map(|c| outputs.column(c).mean()).collect();
        let mut centered = outputs.clone();
        for c in 0..centered.ncols() {
            centered.column_mut(c).add_scalar_mut(-output_means[c]);
        }
        let k = cov_matrix(&inputs, &spec.lengthscales, spec.variance, spec.jitter_rel);
        let (weights, _) = refined_weights(&k, &centered, spec.jitter_rel * spec.variance)
            .ok_or_else(|| CalibError::Numeric("emulator covariance not positive definite".into()))?;
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for c in 0..dims {
            for i in 0..m {
                lo[c] = lo[c].min(inputs[(i, c)]);
                hi[c] = hi[c].max(inputs[(i, c)]);
            }
        }
        let theta_box = ParamBox::new(
            lo[spec.input_dim..].to_vec(),
            hi[spec.input_dim..]
                .iter()
                .zip(&lo[spec.input_dim..])
                .map(|(&h, &l)| if h > l { h } else { l + 1e-9 })
                .collect(),
        )?;
        Ok(Emulator {
            inputs,
            outputs,
            input_dim: spec.input_dim,
            param_dim: spec.param_dim,
            lengthscales: spec.lengthscales,
            variance: spec.variance,
            jitter_rel: spec.jitter_rel,
            output_means,
            weights,
            theta_box,
            input_lo: lo,
            input_hi: hi,
        })
    }
}

impl ComputerModel for Emulator {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn response_dim(&self) -> usize {
        self.outputs.ncols()
    }
    /// The trained θ rectangle doubles as the feasibility box: predictions
    /// outside it are unreliable, so the calibration stays inside.
    fn param_box(&self) -> &ParamBox {
        &self.theta_box
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> DVector<f64> {
        self.predict(x, theta)
    }
    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> DMatrix<f64> {
        self.grad(x, theta)
    }
    fn eval_with_grad(&self, x: &[f64], theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        // share the k* vector between the mean and its θ-gradient
        let z = self.joint(x, theta);
        let ks = self.kstar(&z);
        let r = self.outputs.ncols();
        let q = self.param_dim;
        let m = self.num_runs();
        let mut out = DVector::zeros(r);
        let mut g = DMatrix::zeros(r, q);
        for c in 0..r {
            let wc = self.weights.column(c);
            out[c] = self.output_means[c] + ks.dot(&wc.into_owned());
            for j in 0..q {
                let col = self.input_dim + j;
                let ls2 = self.lengthscales[col] * self.lengthscales[col];
                let mut acc = 0.0;
                for i in 0..m {
                    acc += -ks[i] * (z[col] - self.inputs[(i, col)]) / ls2 * self.weights[(i, c)];
                }
                g[(c, j)] = acc;
            }
        }
        (out, g)
    }
}

/// Self-describing on-disk form of a trained emulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmulatorSpec {
    pub schema_version: u32,
    pub input_dim: usize,
    pub param_dim: usize,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub jitter_rel: f64,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(CalibError::Data("empty matrix in file".into()));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CalibError::Data("ragged matrix in file".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_inputs_1d(f: impl Fn(f64, f64) -> f64, nx: usize, nt: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = nx * nt;
        let mut inputs = DMatrix::zeros(m, 2);
        let mut outputs = DMatrix::zeros(m, 1);
        let mut row = 0;
        for i in 0..nx {
            for j in 0..nt {
                let x = i as f64 / (nx - 1) as f64;
                let t = 2.0 * j as f64 / (nt - 1) as f64;
                inputs[(row, 0)] = x;
                inputs[(row, 1)] = t;
                outputs[(row, 0)] = f(x, t);
                row += 1;
            }
        }
        (inputs, outputs)
    }

    #[test]
    fn constant_outputs_predict_constant() {
        let (inputs, mut outputs) = grid_inputs_1d(|_, _| 0.0, 3, 3);
        outputs.fill(4.5);
        let em = train_emulator(inputs.clone(), outputs, 1, 1, &EmulatorOptions::default()).unwrap();
        for i in 0..inputs.nrows() {
            let p = em.predict(&[inputs[(i, 0)]], &[inputs[(i, 1)]]);
            assert!((p[0] - 4.5).abs() < 1e-6);
        }
        assert!((em.predict(&[0.37], &[0.9])[0] - 4.5).abs() < 1e-6);
        // constant outputs: gradient vanishes
        let g = em.grad(&[0.4], &[1.0]);
        assert!(g.amax() < 1e-8);
    }

    #[test]
    fn interpolates_training_data() {
        let (inputs, outputs) = grid_inputs_1d(|x, t| (3.0 * x).sin() * t + x, 6, 5);
        let em = train_emulator(inputs.clone(), outputs.clone(), 1, 1, &EmulatorOptions::default())
            .unwrap();
        let mut worst = 0.0f64;
        for i in 0..inputs.nrows() {
            let p = em.predict(&[inputs[(i, 0)]], &[inputs[(i, 1)]]);
            worst = worst.max((p[0] - outputs[(i, 0)]).abs());
        }
        assert!(worst < 1e-6, "max training residual {worst}");
    }

    #[test]
    fn symmetric_antisymmetric_outputs_cancel_at_midpoint() {
        // two symmetric training points with outputs ±c and isotropic kernel
        let inputs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let outputs = DMatrix::from_column_slice(2, 1, &[2.0, -2.0]);
        let em = train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()).unwrap();
        let p = em.predict(&[0.5], &[0.0]);
        assert!(p[0].abs() < 1e-9, "midpoint prediction {}", p[0]);
    }

    #[test]
    fn duplicate_inputs_rejected() {
        let inputs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.5, 0.0, 0.0]);
        let outputs = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()),
            Err(CalibError::Data(_))
        ));
    }

    #[test]
    fn non_finite_outputs_rejected() {
        let inputs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let outputs = DMatrix::from_column_slice(2, 1, &[1.0, f64::INFINITY]);
        assert!(matches!(
            train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()),
            Err(CalibError::Data(_))
        ));
    }

    /// 4th-order central difference in θ_j; the plain 2-point stencil picks
    /// up roundoff amplified by the interpolation weights.
    fn fd4(em: &Emulator, x: &[f64], theta: &[f64], j: usize) -> f64 {
        let h = 1e-3 * (1.0 + theta[j].abs());
        let at = |s: f64| {
            let mut t = theta.to_vec();
            t[j] += s;
            em.predict(x, &t)[0]
        };
        (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // enough high-frequency content that the fitted lengthscales stay
        // short and the interpolation weights stay modest; the finite
        // difference oracle is noise-floored on near-singular instances
        let (inputs, outputs) = grid_inputs_1d(
            |x, t| (2.0 * x + t).cos() + 0.3 * t * t + 0.3 * (7.0 * x).sin() * (4.0 * t).cos(),
            8,
            8,
        );
        let em = train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()).unwrap();
        for &(x, t) in &[(0.2, 0.5), (0.55, 1.1), (0.8, 1.7), (0.35, 0.2)] {
            let ga = em.grad(&[x], &[t]);
            let gf = fd4(&em, &[x], &[t], 0);
            let denom = ga[(0, 0)].abs().max(1e-8);
            assert!(
                (ga[(0, 0)] - gf).abs() / denom < 1e-6,
                "grad mismatch at ({x}, {t}): {} vs {gf}",
                ga[(0, 0)]
            );
        }
    }

    #[test]
    fn anisotropic_lengthscales_damp_the_long_axis() {
        // shorter lengthscale axis responds more steeply at a generic point
        let inputs = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.1, 0.3, 0.05, 0.7, 0.02]);
        let outputs = DMatrix::from_column_slice(4, 1, &[0.3, 1.0, -0.4, 0.6]);
        let spec = EmulatorSpec {
            schema_version: 1,
            input_dim: 0,
            param_dim: 2,
            lengthscales: vec![1.0, 10.0],
            variance: 1.0,
            jitter_rel: 1e-8,
            inputs: (0..4).map(|i| vec![inputs[(i, 0)], inputs[(i, 1)]]).collect(),
            outputs: (0..4).map(|i| vec![outputs[(i, 0)]]).collect(),
        };
        let em = Emulator::from_spec(spec).unwrap();
        let g = em.grad(&[], &[0.45, 0.6]);
        assert!(
            g[(0, 1)].abs() < g[(0, 0)].abs(),
            "long-lengthscale axis should respond less: {g:?}"
        );
    }

    #[test]
    fn extrapolation_is_flagged() {
        let (inputs, outputs) = grid_inputs_1d(|x, t| x + t, 4, 4);
        let em = train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()).unwrap();
        let (_, inside) = em.predict_with_flag(&[0.5], &[1.0]);
        assert!(!inside);
        let (_, outside) = em.predict_with_flag(&[1.5], &[1.0]);
        assert!(outside);
    }

    #[test]
    fn spec_round_trip_preserves_predictions() {
        let (inputs, outputs) = grid_inputs_1d(|x, t| x * t + (x - t).powi(2), 5, 5);
        let em = train_emulator(inputs, outputs, 1, 1, &EmulatorOptions::default()).unwrap();
        let spec = em.to_spec();
        let text = serde_json::to_string(&spec).unwrap();
        let back = Emulator::from_spec(serde_json::from_str(&text).unwrap()).unwrap();
        for &(x, t) in &[(0.1, 0.4), (0.6, 1.5), (0.9, 0.2)] {
            assert_relative_eq!(
                em.predict(&[x], &[t])[0],
                back.predict(&[x], &[t])[0],
                epsilon = 1e-12
            );
        }
    }
}
