//! RMSE reporting and the paired two-sided t-test.

use std::path::Path;

use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::data::write_table;
use crate::numerics::Tensor;
use crate::Result;

pub const DEFAULT_SIGNIFICANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_target: Vec<f64>,
    /// Root of the mean over every entry; per-target MSEs weigh equally.
    pub overall: f64,
    pub samples: usize,
}

fn check_pair(preds: &Tensor, targets: &Tensor) -> Result<()> {
    ensure!(
        preds.shape() == targets.shape() && preds.shape().len() == 2,
        "prediction shape {:?} does not match target shape {:?}",
        preds.shape(),
        targets.shape()
    );
    ensure!(preds.rows() >= 1, "need at least one sample");
    Ok(())
}

pub fn rmse(preds: &Tensor, targets: &Tensor) -> Result<EvalReport> {
    check_pair(preds, targets)?;
    let (n, d2) = (preds.rows(), preds.row_len());
    let mut sse = vec![0.0; d2];
    for i in 0..n {
        for (j, (p, t)) in preds.row(i).iter().zip(targets.row(i)).enumerate() {
            sse[j] += (p - t) * (p - t);
        }
    }
    let mse: Vec<f64> = sse.iter().map(|s| s / n as f64).collect();
    Ok(EvalReport {
        per_target: mse.iter().map(|m| m.sqrt()).collect(),
        overall: (mse.iter().sum::<f64>() / d2 as f64).sqrt(),
        samples: n,
    })
}

/// Per-row squared error on target column `j`.
pub fn per_sample_sq_error(preds: &Tensor, targets: &Tensor, j: usize) -> Result<Vec<f64>> {
    check_pair(preds, targets)?;
    ensure!(j < preds.row_len(), "target column {j} out of range");
    Ok((0..preds.rows()).map(|i| (preds.at(i, j) - targets.at(i, j)).powi(2)).collect())
}

/// Per-row mean squared error across all targets.
pub fn per_sample_mse(preds: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    check_pair(preds, targets)?;
    let d2 = preds.row_len() as f64;
    Ok((0..preds.rows())
        .map(|i| preds.row(i).iter().zip(targets.row(i)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / d2)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub significant: bool,
    /// All differences equal and nonzero: `t = ±∞`, `p = 0`.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b` with `N − 1` degrees of freedom.
pub fn paired_t_test(errors_a: &[f64], errors_b: &[f64], level: f64) -> Result<TTestResult> {
    ensure!(errors_a.len() == errors_b.len(), "paired samples differ in length: {} vs {}", errors_a.len(), errors_b.len());
    let n = errors_a.len();
    ensure!(n >= 2, "paired t-test needs at least two pairs, got {n}");
    ensure!(level > 0.0 && level < 1.0, "significance level must lie in (0, 1)");
    ensure!(
        errors_a.iter().chain(errors_b).all(|v| v.is_finite()),
        "paired samples contain non-finite values"
    );
    let diffs: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    let df = n - 1;
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df as f64;

    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0, significant: false, degenerate: false }
        } else {
            TTestResult { t: f64::INFINITY.copysign(mean), df, p: 0.0, significant: true, degenerate: true }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = two_sided_p(t, df as f64).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p, significant: p < level, degenerate: false })
}

/// `P(|T| ≥ |t|) = I_{df/(df+t²)}(df/2, ½)`.
fn two_sided_p(t: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// One row of a model comparison; `target = None` pools all targets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub target: Option<usize>,
    pub rmse_a: f64,
    pub rmse_b: f64,
    pub test: TTestResult,
}

/// Per-target rows followed by the pooled row.
pub fn compare(preds_a: &Tensor, preds_b: &Tensor, targets: &Tensor, level: f64) -> Result<Vec<CompareRow>> {
    let ra = rmse(preds_a, targets)?;
    let rb = rmse(preds_b, targets)?;
    let mut rows = Vec::with_capacity(targets.row_len() + 1);
    for j in 0..targets.row_len() {
        let test = paired_t_test(&per_sample_sq_error(preds_a, targets, j)?, &per_sample_sq_error(preds_b, targets, j)?, level)?;
        rows.push(CompareRow { target: Some(j), rmse_a: ra.per_target[j], rmse_b: rb.per_target[j], test });
    }
    let test = paired_t_test(&per_sample_mse(preds_a, targets)?, &per_sample_mse(preds_b, targets)?, level)?;
    rows.push(CompareRow { target: None, rmse_a: ra.overall, rmse_b: rb.overall, test });
    Ok(rows)
}

/// Columns `target, rmse_a, rmse_b, t, p, verdict`; target 0 is the pooled
/// row and `k ≥ 1` is target column `k−1`; verdict is 1 when significant.
pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let header = ["target", "rmse_a", "rmse_b", "t", "p", "verdict"].map(String::from);
    let body: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.target.map_or(0.0, |j| (j + 1) as f64),
                r.rmse_a,
                r.rmse_b,
                r.test.t,
                r.test.p,
                f64::from(u8::from(r.test.significant)),
            ]
        })
        .collect();
    write_table(path, &header, &body)
}
