//! Kernel functions, Gram matrices, and the null-space bases of the
//! associated native-space penalties.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bessel::{bessel_k, gamma};
use crate::error::{CalibError, Result};

/// A (conditionally) positive definite kernel on the control-variable domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    /// Matérn family with smoothness `upsilon` and scale `phi`; normalized so
    /// the value at zero distance is 1.
    Matern { upsilon: f64, phi: f64 },
    /// Second-order Sobolev kernel on the unit interval built from scaled
    /// Bernoulli polynomials; inputs are rescaled from the stored interval
    /// `[lo, hi]`.
    /// The penalized solution is a cubic smoothing spline.
    SobolevCubic { lo: f64, hi: f64 },
    /// Anisotropic squared-exponential kernel with per-dimension lengthscales
    /// and a signal variance.
    SquaredExponential {
        lengthscales: Vec<f64>,
        variance: f64,
    },
}

impl Kernel {
    pub fn matern(upsilon: f64, phi: f64) -> Result<Self> {
        if !(upsilon > 0.0) || !(phi > 0.0) {
            return Err(CalibError::Parameter(format!(
                "Matern requires upsilon > 0 and phi > 0, got ({upsilon}, {phi})"
            )));
        }
        Ok(Kernel::Matern { upsilon, phi })
    }

    pub fn sobolev_cubic(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(CalibError::Parameter(format!(
                "SobolevCubic requires a finite interval with hi > lo, got [{lo}, {hi}]"
            )));
        }
        Ok(Kernel::SobolevCubic { lo, hi })
    }

    /// SobolevCubic on the unit interval.
    pub fn sobolev_cubic_unit() -> Self {
        Kernel::SobolevCubic { lo: 0.0, hi: 1.0 }
    }

    pub fn squared_exponential(lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l > 0.0)) || !(variance > 0.0)
        {
            return Err(CalibError::Parameter(
                "SquaredExponential requires positive lengthscales and variance".into(),
            ));
        }
        Ok(Kernel::SquaredExponential {
            lengthscales,
            variance,
        })
    }

    /// Parse the CLI kernel grammar: `matern:<upsilon>:<phi>`, `cubic`,
    /// `sqexp:<ls1,...,lsk>:<var>`. `cubic` takes its rescaling interval from
    /// `domain` (defaulting to the unit interval).
    pub fn parse(spec: &str, domain: Option<(f64, f64)>) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = |msg: &str| CalibError::Usage(format!("kernel spec `{spec}`: {msg}"));
        match parts.as_slice() {
            ["cubic"] => {
                let (lo, hi) = domain.unwrap_or((0.0, 1.0));
                Self::sobolev_cubic(lo, hi)
            }
            ["matern", u, p] => {
                let upsilon: f64 = u.parse().map_err(|_| bad("bad upsilon"))?;
                let phi: f64 = p.parse().map_err(|_| bad("bad phi"))?;
                Self::matern(upsilon, phi)
            }
            ["sqexp", ls, v] => {
                let lengthscales = ls
                    .split(',')
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|_| bad("bad lengthscales"))?;
                let variance: f64 = v.parse().map_err(|_| bad("bad variance"))?;
                Self::squared_exponential(lengthscales, variance)
            }
            _ => Err(bad("expected matern:<upsilon>:<phi>, cubic, or sqexp:<ls,...>:<var>")),
        }
    }

    pub fn spec_string(&self) -> String {
        match self {
            Kernel::Matern { upsilon, phi } => format!("matern:{upsilon}:{phi}"),
            Kernel::SobolevCubic { .. } => "cubic".to_string(),
            Kernel::SquaredExponential {
                lengthscales,
                variance,
            } => {
                let ls: Vec<String> = lengthscales.iter().map(|l| l.to_string()).collect();
                format!("sqexp:{}:{}", ls.join(","), variance)
            }
        }
    }

    /// Evaluate Φ(s, t).
    pub fn eval(&self, s: &[f64], t: &[f64]) -> Result<f64> {
        if s.len() != t.len() {
            return Err(CalibError::Domain(format!(
                "point dimensions differ: {} vs {}",
                s.len(),
                t.len()
            )));
        }
        match self {
            Kernel::Matern { upsilon, phi } => {
                let r = dist(s, t);
                Ok(matern_value(*upsilon, *phi, r))
            }
            Kernel::SobolevCubic { .. } => {
                if s.len() != 1 {
                    return Err(CalibError::Domain(
                        "SobolevCubic is defined on a one-dimensional domain".into(),
                    ));
                }
                let u = self.rescale_unit(s[0])?;
                let v = self.rescale_unit(t[0])?;
                Ok(sobolev2_unit(u, v))
            }
            Kernel::SquaredExponential {
                lengthscales,
                variance,
            } => {
                if s.len() != lengthscales.len() {
                    return Err(CalibError::Domain(format!(
                        "expected {}-dimensional points, got {}",
                        lengthscales.len(),
                        s.len()
                    )));
                }
                let mut z = 0.0;
                for i in 0..s.len() {
                    let d = (s[i] - t[i]) / lengthscales[i];
                    z += d * d;
                }
                Ok(variance * (-0.5 * z).exp())
            }
        }
    }

    /// n×n Gram matrix over the rows of `pts`.
    pub fn gram(&self, pts: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = pts.nrows();
        if n == 0 {
            return Err(CalibError::Data("gram requires at least one point".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| pts.row(i).iter().copied().collect()).collect();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&rows[i], &rows[j])?;
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// The null-space basis of the native-space seminorm.
    pub fn null_basis(&self) -> NullBasis {
        match self {
            Kernel::SobolevCubic { lo, hi } => NullBasis::CubicOnInterval { lo: *lo, hi: *hi },
            _ => NullBasis::Constant,
        }
    }

    /// Map from the user interval onto [0,1] (SobolevCubic only).
    fn rescale_unit(&self, x: f64) -> Result<f64> {
        match self {
            Kernel::SobolevCubic { lo, hi } => {
                let u = (x - lo) / (hi - lo);
                if !(-1e-12..=1.0 + 1e-12).contains(&u) {
                    return Err(CalibError::Domain(format!(
                        "input {x} outside the SobolevCubic domain [{lo}, {hi}]"
                    )));
                }
                Ok(u.clamp(0.0, 1.0))
            }
            _ => Ok(x),
        }
    }
}

fn dist(s: &[f64], t: &[f64]) -> f64 {
    s.iter()
        .zip(t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Matérn correlation: (2 sqrt(υ) φ r)^υ K_υ(2 sqrt(υ) φ r) / (Γ(υ) 2^(υ-1)),
/// with the closed forms used for the common half-integer orders.
pub(crate) fn matern_value(upsilon: f64, phi: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let z = 2.0 * upsilon.sqrt() * phi * r;
    if upsilon == 0.5 {
        (-z).exp()
    } else if upsilon == 1.5 {
        (1.0 + z) * (-z).exp()
    } else if upsilon == 2.5 {
        (1.0 + z + z * z / 3.0) * (-z).exp()
    } else {
        matern_value_general(upsilon, phi, r)
    }
}

/// General-order Matérn via the Bessel routine (no half-integer shortcuts).
pub(crate) fn matern_value_general(upsilon: f64, phi: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let z = 2.0 * upsilon.sqrt() * phi * r;
    let norm = gamma(upsilon) * (upsilon - 1.0).exp2();
    (z.powf(upsilon) * bessel_k(upsilon, z) / norm).min(1.0)
}

// Scaled Bernoulli polynomials k_m = B_m / m! on [0,1], written in the
// shifted variable w = u - 1/2.
fn k2_poly(u: f64) -> f64 {
    let w = u - 0.5;
    (w * w - 1.0 / 12.0) / 2.0
}

fn k4_poly(u: f64) -> f64 {
    let w = u - 0.5;
    (w.powi(4) - w * w / 2.0 + 7.0 / 240.0) / 24.0
}

/// Reproducing kernel of the order-2 Sobolev space on [0,1]:
/// k2(x)k2(y) - k4(|x-y|).
fn sobolev2_unit(x: f64, y: f64) -> f64 {
    k2_poly(x) * k2_poly(y) - k4_poly((x - y).abs())
}

/// Basis of the seminorm's null space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NullBasis {
    /// {1}: intercept only.
    Constant,
    /// {1, u - 1/2} on the rescaled interval, the cubic smoothing-spline
    /// null space (affine functions).
    CubicOnInterval { lo: f64, hi: f64 },
}

impl NullBasis {
    pub fn dim(&self) -> usize {
        match self {
            NullBasis::Constant => 1,
            NullBasis::CubicOnInterval { .. } => 2,
        }
    }

    /// Evaluate (v_1(x), ..., v_k(x)).
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        match self {
            NullBasis::Constant => DVector::from_element(1, 1.0),
            NullBasis::CubicOnInterval { lo, hi } => {
                let u = (x[0] - lo) / (hi - lo);
                DVector::from_column_slice(&[1.0, u - 0.5])
            }
        }
    }

    /// n×k design matrix V with `V[i][s] = v_s(pts_i)`. Empty pts give a 0×k
    /// matrix.
    pub fn design(&self, pts: &DMatrix<f64>) -> DMatrix<f64> {
        let n = pts.nrows();
        let k = self.dim();
        let mut v = DMatrix::zeros(n, k);
        for i in 0..n {
            let row: Vec<f64> = pts.row(i).iter().copied().collect();
            v.row_mut(i).copy_from(&self.eval(&row).transpose());
        }
        v
    }
}
