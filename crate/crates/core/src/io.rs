//! File formats: physical-data CSV, computer-run CSV, band/GCV/table CSV
//! writers, and the versioned JSON estimate document. Every artifact embeds
//! a provenance block (config echo, seed, library version).

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationEstimate, ConvergenceReport, PhysicalDataset};
use crate::error::{CalibError, Result};
use crate::harness::MetricsTable;
use crate::kernel::Kernel;
use crate::model::ParamBox;
use crate::select::GcvPoint;
use crate::uq::ConfidenceBand;

/// What produced an artifact. `config` must not contain execution-only
/// knobs (thread counts, output paths) so reruns stay byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: String,
}

impl Provenance {
    pub fn new(config: impl Into<String>, seed: Option<u64>) -> Self {
        Provenance {
            tool: "rkhs-calib".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: config.into(),
        }
    }

    fn comment_lines(&self) -> String {
        let seed = match self.seed {
            Some(s) => s.to_string(),
            None => "none".into(),
        };
        format!(
            "# tool: {} {}\n# seed: {}\n# config: {}\n",
            self.tool, self.version, seed, self.config
        )
    }
}

fn parse_header(headers: &csv::StringRecord) -> Vec<String> {
    headers.iter().map(|h| h.trim().to_string()).collect()
}

fn count_prefixed(cols: &[String], prefix: char) -> usize {
    let mut k = 0;
    for c in cols {
        let mut chars = c.chars();
        if chars.next() == Some(prefix) && chars.as_str().parse::<usize>().is_ok() {
            k += 1;
        }
    }
    k
}

/// Read a physical dataset from CSV with header `x1,...,xd,y1,...,yr`.
/// Domain bounds default to the observed min/max per input dimension.
pub fn read_physical_csv(path: &Path, domain: Option<(f64, f64)>) -> Result<PhysicalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
    let cols = parse_header(rdr.headers().map_err(|e| CalibError::Data(e.to_string()))?);
    let d = count_prefixed(&cols, 'x');
    let r = count_prefixed(&cols, 'y');
    if d == 0 || r == 0 || d + r != cols.len() {
        return Err(CalibError::Data(format!(
            "{}: header must be x1,...,xd,y1,...,yr (got {cols:?})",
            path.display()
        )));
    }
    let mut xs_rows: Vec<Vec<f64>> = Vec::new();
    let mut ys_rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
        let line = idx + 2; // header is line 1
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    CalibError::Data(format!("{} line {line}: bad number `{f}`", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != d + r {
            return Err(CalibError::Data(format!(
                "{} line {line}: expected {} fields, got {}",
                path.display(),
                d + r,
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Data(format!(
                "{} line {line}: non-finite value",
                path.display()
            )));
        }
        xs_rows.push(vals[..d].to_vec());
        ys_rows.push(vals[d..].to_vec());
    }
    if xs_rows.is_empty() {
        return Err(CalibError::Data(format!("{}: no data rows", path.display())));
    }
    let n = xs_rows.len();
    let xs = DMatrix::from_fn(n, d, |i, j| xs_rows[i][j]);
    let ys = DMatrix::from_fn(n, r, |i, j| ys_rows[i][j]);
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            if d == 1 {
                if let Some(dom) = domain {
                    return dom;
                }
            }
            let col = xs.column(j);
            (col.min(), col.max())
        })
        .collect();
    PhysicalDataset::new(xs, ys, bounds)
}

/// Read computer runs from CSV with header `x1,...,xd,t1,...,tq,y1,...,yr`.
/// Returns (inputs m×(d+q), outputs m×r, d, q).
pub fn read_runs_csv(path: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
    let cols = parse_header(rdr.headers().map_err(|e| CalibError::Data(e.to_string()))?);
    let d = count_prefixed(&cols, 'x');
    let q = count_prefixed(&cols, 't');
    let r = count_prefixed(&cols, 'y');
    if d == 0 || q == 0 || r == 0 || d + q + r != cols.len() {
        return Err(CalibError::Data(format!(
            "{}: header must be x1..xd,t1..tq,y1..yr (got {cols:?})",
            path.display()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
        let line = idx + 2;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    CalibError::Data(format!("{} line {line}: bad number `{f}`", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != d + q + r || vals.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Data(format!(
                "{} line {line}: malformed row",
                path.display()
            )));
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(CalibError::Data(format!("{}: no data rows", path.display())));
    }
    let m = rows.len();
    let inputs = DMatrix::from_fn(m, d + q, |i, j| rows[i][j]);
    let outputs = DMatrix::from_fn(m, r, |i, j| rows[i][d + q + j]);
    Ok((inputs, outputs, d, q))
}

/// Band CSV: `x,target,center,lower,upper,level` per grid point.
pub fn write_band_csv(path: &Path, bands: &[ConfidenceBand], prov: &Provenance) -> Result<()> {
    let mut out = String::new();
    out.push_str(&prov.comment_lines());
    out.push_str("x,target,center,lower,upper,level\n");
    for band in bands {
        let label = band.target.label();
        for (g, &x) in band.grid.iter().enumerate() {
            out.push_str(&format!(
                "{x},{label},{},{},{},{}\n",
                band.center[g], band.lower[g], band.upper[g], band.level
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// GCV scan CSV: `lambda,gcv,edf,sigma2` per grid point.
pub fn write_gcv_csv(path: &Path, curve: &[GcvPoint], prov: &Provenance) -> Result<()> {
    let mut out = String::new();
    out.push_str(&prov.comment_lines());
    out.push_str("lambda,gcv,edf,sigma2\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.lambda, p.gcv, p.edf, p.sigma2));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Benchmark table CSV, one row per (method); width reported both as the
/// integrated ∫(U-L) and normalized by |X|.
pub fn write_table_csv(path: &Path, table: &MetricsTable, prov: &Provenance) -> Result<()> {
    let mut out = String::new();
    out.push_str(&prov.comment_lines());
    out.push_str("setting,code,method,n,reps_ok,failures,band_failures,flagged,loss_mean,loss_se");
    for level in &crate::harness::BAND_LEVELS {
        let tag = format!("{}", (level * 100.0).round() as u32);
        out.push_str(&format!(
            ",width{tag}_mean,width{tag}_se,widthnorm{tag}_mean,widthnorm{tag}_se,cover{tag}_mean,cover{tag}_se"
        ));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            table.setting,
            table.code_mode.name(),
            row.method.name(),
            table.n,
            row.reps_ok,
            row.failures,
            row.band_failures,
            row.flagged,
            row.loss_mean,
            row.loss_se
        ));
        for l in &row.levels {
            out.push_str(&format!(
                ",{},{},{},{},{},{}",
                l.width_mean, l.width_se, l.width_norm_mean, l.width_norm_se, l.coverage_mean,
                l.coverage_se
            ));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// On-disk wrapper for a trained emulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedEmulator {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub emulator: crate::emulator::EmulatorSpec,
}

pub fn save_emulator(path: &Path, em: &crate::emulator::Emulator, prov: &Provenance) -> Result<()> {
    let saved = SavedEmulator {
        schema_version: 1,
        provenance: prov.clone(),
        emulator: em.to_spec(),
    };
    let text = serde_json::to_string_pretty(&saved)
        .map_err(|e| CalibError::Data(format!("serialize emulator: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_emulator(path: &Path) -> Result<crate::emulator::Emulator> {
    let text = fs::read_to_string(path)?;
    let saved: SavedEmulator = serde_json::from_str(&text)
        .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
    if saved.schema_version != 1 {
        return Err(CalibError::Data(format!(
            "unsupported emulator schema version {}",
            saved.schema_version
        )));
    }
    crate::emulator::Emulator::from_spec(saved.emulator)
}

/// Versioned on-disk form of a calibration estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedEstimate {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub kernel_spec: String,
    pub kernel: Kernel,
    pub anchors: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: f64,
    pub theta_box: ParamBox,
    pub convergence: ConvergenceReport,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(CalibError::Data(format!("empty {what} in estimate file")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CalibError::Data(format!("ragged {what} in estimate file")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn save_estimate(path: &Path, est: &CalibrationEstimate, prov: &Provenance) -> Result<()> {
    let saved = SavedEstimate {
        schema_version: 1,
        provenance: prov.clone(),
        kernel_spec: est.kernel.spec_string(),
        kernel: est.kernel.clone(),
        anchors: matrix_to_rows(&est.anchors),
        alpha: matrix_to_rows(&est.alpha),
        beta: matrix_to_rows(&est.beta),
        lambda: est.lambda,
        theta_box: est.theta_box.clone(),
        convergence: est.report.clone(),
    };
    let text = serde_json::to_string_pretty(&saved)
        .map_err(|e| CalibError::Data(format!("serialize estimate: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_estimate(path: &Path) -> Result<CalibrationEstimate> {
    let text = fs::read_to_string(path)?;
    let saved: SavedEstimate = serde_json::from_str(&text)
        .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
    if saved.schema_version != 1 {
        return Err(CalibError::Data(format!(
            "unsupported estimate schema version {}",
            saved.schema_version
        )));
    }
    let anchors = rows_to_matrix(&saved.anchors, "anchors")?;
    let alpha = rows_to_matrix(&saved.alpha, "alpha")?;
    let beta = rows_to_matrix(&saved.beta, "beta")?;
    if beta.ncols() != anchors.nrows() || beta.nrows() != alpha.nrows() {
        return Err(CalibError::Data("inconsistent coefficient shapes".into()));
    }
    Ok(CalibrationEstimate {
        basis: saved.kernel.null_basis(),
        kernel: saved.kernel,
        anchors,
        alpha,
        beta,
        lambda: saved.lambda,
        theta_box: saved.theta_box,
        report: saved.convergence,
    })
}
