//! CSV ingestion, 80/10/10 splitting, feature standardization, and the
//! synthetic generators.
//!
//! CSV dialect: UTF-8, comma separated, `.` decimal point, one header row,
//! numeric cells unquoted. The last `n_targets` columns are targets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{sample_gaussian, sample_uniform, Rng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    /// `N × d1` features.
    pub x: Tensor,
    /// `N × d2` targets.
    pub y: Tensor,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl TabularDataset {
    pub fn new(x: Tensor, y: Tensor, feature_names: Vec<String>, target_names: Vec<String>) -> Result<Self> {
        ensure!(x.shape().len() == 2 && y.shape().len() == 2, "features and targets must be matrices");
        ensure!(x.rows() == y.rows(), "feature rows {} != target rows {}", x.rows(), y.rows());
        ensure!(feature_names.len() == x.row_len(), "feature name count mismatch");
        ensure!(target_names.len() == y.row_len(), "target name count mismatch");
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Numeric("dataset contains NaN or infinite values".into()));
        }
        Ok(Self { x, y, feature_names, target_names })
    }

    /// Dataset with generated column names `x0..`, `y0..`.
    pub fn unnamed(x: Tensor, y: Tensor) -> Result<Self> {
        let f = (0..x.row_len()).map(|i| format!("x{i}")).collect();
        let t = (0..y.row_len()).map(|i| format!("y{i}")).collect();
        Self::new(x, y, f, t)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.row_len()
    }

    pub fn n_targets(&self) -> usize {
        self.y.row_len()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(indices)?,
            y: self.y.select_rows(indices)?,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        })
    }
}

/// Parses a numeric table; returns the header and row-major values.
fn read_table(path: &Path) -> Result<(Vec<String>, usize, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Load(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Load(format!("{}: row {row}: {e}", path.display())))?;
        if rec.len() != cols {
            return Err(Error::Load(format!(
                "{}: row {row} has {} columns, header has {cols}",
                path.display(),
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Load(format!(
                    "{}: non-numeric cell {cell:?} at row {row}, column {}",
                    path.display(),
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Load(format!(
                    "{}: non-finite value at row {row}, column {}",
                    path.display(),
                    c + 1
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Load(format!("{}: no data rows", path.display())));
    }
    Ok((header, rows, values))
}

/// Loads a table whose last `n_targets` columns are targets.
pub fn load_csv(path: &Path, n_targets: usize) -> Result<TabularDataset> {
    let (header, rows, values) = read_table(path)?;
    let cols = header.len();
    if n_targets == 0 || n_targets >= cols {
        return Err(Error::Load(format!(
            "{}: {n_targets} target columns requested but file has {cols} columns",
            path.display()
        )));
    }
    let d1 = cols - n_targets;
    let mut x = Vec::with_capacity(rows * d1);
    let mut y = Vec::with_capacity(rows * n_targets);
    for row in values.chunks(cols) {
        x.extend_from_slice(&row[..d1]);
        y.extend_from_slice(&row[d1..]);
    }
    TabularDataset::new(
        Tensor::new(vec![rows, d1], x)?,
        Tensor::new(vec![rows, n_targets], y)?,
        header[..d1].to_vec(),
        header[d1..].to_vec(),
    )
}

/// Loads every column as point coordinates.
pub fn load_points(path: &Path) -> Result<Tensor> {
    let (header, rows, values) = read_table(path)?;
    Tensor::new(vec![rows, header.len()], values)
}

/// Writes a numeric table. Values use the shortest representation that
/// parses back to the identical `f64`.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Load(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        ensure!(row.len() == header.len(), "row width {} != header width {}", row.len(), header.len());
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, data: &TabularDataset) -> Result<()> {
    let header: Vec<String> = data.feature_names.iter().chain(&data.target_names).cloned().collect();
    let rows: Vec<Vec<f64>> = (0..data.len())
        .map(|i| data.x.row(i).iter().chain(data.y.row(i)).copied().collect())
        .collect();
    write_table(path, &header, &rows)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn validate(&self, n: usize) -> Result<()> {
        ensure!(
            !self.train.is_empty() && !self.val.is_empty() && !self.test.is_empty(),
            "every split must be nonempty"
        );
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            ensure!(i < n, "split index {i} out of range {n}");
            ensure!(!seen[i], "split index {i} appears twice");
            seen[i] = true;
        }
        Ok(())
    }
}

/// Seeded 80/10/10 split: validation and test get `max(1, ⌊0.1·N⌋)` rows
/// each and training keeps the remainder. Lists are returned sorted.
pub fn split(n: usize, rng: &mut Rng) -> Result<SplitIndices> {
    ensure!(n >= 3, "need at least 3 rows to split, got {n}");
    let holdout = (n / 10).max(1);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut val = perm[..holdout].to_vec();
    let mut test = perm[holdout..2 * holdout].to_vec();
    let mut train = perm[2 * holdout..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits on the given rows; zero-variance columns get `std = 1`.
pub fn standardize_fit(x: &Tensor) -> Scaler {
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n as f64).sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Scaler { mean, std }
}

pub fn standardize_apply(scaler: &Scaler, x: &Tensor) -> Result<Tensor> {
    ensure!(scaler.mean.len() == x.row_len(), "scaler width {} != data width {}", scaler.mean.len(), x.row_len());
    let mut out = x.clone();
    let d = x.row_len();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let c = j % d;
        *v = (*v - scaler.mean[c]) / scaler.std[c];
    }
    Ok(out)
}

/// `n` draws of `x ~ U[−2, 2)` and `y = a·x² + b·x + N(0, σ²)`.
pub fn gen_quadratic(rng: &mut Rng, n: usize, a: f64, b: f64, sigma: f64) -> Result<TabularDataset> {
    ensure!(n >= 1, "need at least one point");
    let x = sample_uniform(rng, -2.0, 2.0, &[n, 1])?;
    let noise = sample_gaussian(rng, 0.0, sigma, &[n, 1])?;
    let y: Vec<f64> = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| a * x * x + b * x + e)
        .collect();
    TabularDataset::unnamed(x, Tensor::new(vec![n, 1], y)?)
}

/// Synthetic spectra with both noisy and noise-free targets.
#[derive(Clone, Debug)]
pub struct SyntheticSpectra {
    pub dataset: TabularDataset,
    pub clean_targets: Tensor,
}

/// Number of latent components mixed into each synthetic spectrum.
pub const SPECTRA_COMPONENTS: usize = 6;

/// Spectra-like regression data.
///
/// A dataset-wide set of [`SPECTRA_COMPONENTS`] Gaussian bumps is drawn with
/// random centers in `[0, d1)` and widths in `[d1/32, d1/12]`. Each sample
/// mixes the bumps with amplitudes `u_k ~ U[0, 1)`, so its features are
/// `x_t = Σ_k u_k · exp(−(t − c_k)² / (2 w_k²))`. Each target is a fixed
/// random functional `y_j = Σ_k A_jk u_k + Σ_k B_jk u_k²` with
/// `A ~ N(0, 1)` and `B ~ N(0, 0.5²)`, plus `N(0, noise_sigma²)` noise.
///
/// The clean part depends only on the seed; noise comes from a separate
/// sub-stream, so changing `noise_sigma` leaves features and clean targets
/// unchanged.
pub fn gen_synthetic_spectra(rng: &mut Rng, n: usize, d1: usize, d2: usize, noise_sigma: f64) -> Result<SyntheticSpectra> {
    ensure!(d1 >= 8, "spectra need d1 >= 8, got {d1}");
    ensure!(d2 >= 1 && n >= 1, "need at least one target and one row");
    ensure!(noise_sigma >= 0.0, "noise_sigma must be >= 0");
    let mut structure = rng.fork(0);
    let mut amps_rng = rng.fork(1);
    let mut noise_rng = rng.fork(2);

    let k = SPECTRA_COMPONENTS;
    let len = d1 as f64;
    let centers = sample_uniform(&mut structure, 0.0, len, &[k])?;
    let widths = sample_uniform(&mut structure, len / 32.0, len / 12.0, &[k])?;
    let lin = sample_gaussian(&mut structure, 0.0, 1.0, &[d2, k])?;
    let quad = sample_gaussian(&mut structure, 0.0, 0.5, &[d2, k])?;
    let amps = sample_uniform(&mut amps_rng, 0.0, 1.0, &[n, k])?;

    let mut x = vec![0.0; n * d1];
    let mut clean = vec![0.0; n * d2];
    for i in 0..n {
        let u = amps.row(i);
        for t in 0..d1 {
            x[i * d1 + t] = (0..k)
                .map(|c| {
                    let z = (t as f64 - centers.data()[c]) / widths.data()[c];
                    u[c] * (-0.5 * z * z).exp()
                })
                .sum();
        }
        for j in 0..d2 {
            clean[i * d2 + j] = (0..k).map(|c| lin.at(j, c) * u[c] + quad.at(j, c) * u[c] * u[c]).sum();
        }
    }
    let noise = sample_gaussian(&mut noise_rng, 0.0, noise_sigma, &[n, d2])?;
    let y: Vec<f64> = clean.iter().zip(noise.data()).map(|(c, e)| c + e).collect();
    let clean_targets = Tensor::new(vec![n, d2], clean)?;
    let dataset = TabularDataset::unnamed(Tensor::new(vec![n, d1], x)?, Tensor::new(vec![n, d2], y)?)?;
    Ok(SyntheticSpectra { dataset, clean_targets })
}
