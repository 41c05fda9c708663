//! Grid search over quadratic coefficients `y = a·x² + b·x`, comparing a
//! plain MSE risk against a risk that pins the nearest-neighbor divergence
//! between targets and predictions to a level `γ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{gen_quadratic, write_table, TabularDataset};
use crate::divergence::{hp_divergence_exact, LabeledPointSet};
use crate::numerics::{Rng, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub a_true: f64,
    pub b_true: f64,
    pub sigma: f64,
    pub n_points: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    pub gamma: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            a_true: 0.4,
            b_true: 0.4,
            sigma: 2.0,
            n_points: 30,
            grid_lo: 0.2,
            grid_hi: 0.6,
            grid_step: 0.1,
            gamma: 0.5,
            runs: 200,
            seed: 0,
        }
    }
}

/// Grid points are snapped to this tolerance when matching the true pair.
const GRID_TOL: f64 = 1e-9;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.grid_step > 0.0 && self.grid_step.is_finite(), "grid step must be > 0");
        ensure!(self.grid_hi >= self.grid_lo, "grid upper bound is below the lower bound");
        ensure!(self.sigma >= 0.0, "sigma must be >= 0");
        ensure!(self.n_points >= 1, "need at least one point per run");
        ensure!(self.runs >= 1, "need at least one run");
        ensure!((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]");
        ensure!(
            self.grid_index(self.a_true).is_some() && self.grid_index(self.b_true).is_some(),
            "grid does not contain the true pair ({}, {})",
            self.a_true,
            self.b_true
        );
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let steps = ((self.grid_hi - self.grid_lo) / self.grid_step + GRID_TOL).floor() as usize;
        (0..=steps).map(|k| self.grid_lo + k as f64 * self.grid_step).collect()
    }

    pub fn grid_index(&self, v: f64) -> Option<usize> {
        self.grid().iter().position(|g| (g - v).abs() < GRID_TOL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Fdiv,
}

/// Risk of every grid pair, row-major with `a` outer and `b` inner.
pub fn grid_risks(data: &TabularDataset, cfg: &SimConfig, kind: LossKind) -> Result<Vec<f64>> {
    let grid = cfg.grid();
    let x = data.x.data();
    let y = &data.y;
    let mut risks = Vec::with_capacity(grid.len() * grid.len());
    for &a in &grid {
        for &b in &grid {
            let preds: Vec<f64> = x.iter().map(|&x| a * x * x + b * x).collect();
            let risk = match kind {
                LossKind::Mse => {
                    preds.iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64
                }
                LossKind::Fdiv => {
                    let sets = LabeledPointSet::new(y.clone(), Tensor::column(&preds)?)?;
                    (hp_divergence_exact(&sets)?.d_raw - cfg.gamma).powi(2)
                }
            };
            risks.push(risk);
        }
    }
    Ok(risks)
}

/// Draws one dataset from `rng`, then returns the `(a_index, b_index)` of
/// the minimum-risk pair. Exactly equal minima are broken uniformly at
/// random from the same stream.
pub fn grid_search_once(rng: &mut Rng, cfg: &SimConfig, kind: LossKind) -> Result<(usize, usize)> {
    cfg.validate()?;
    let data = gen_quadratic(rng, cfg.n_points, cfg.a_true, cfg.b_true, cfg.sigma)?;
    let risks = grid_risks(&data, cfg, kind)?;
    let min = risks.iter().copied().fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> = (0..risks.len()).filter(|&k| risks[k] == min).collect();
    let k = ties[rng.index(ties.len())];
    let side = cfg.grid().len();
    Ok((k / side, k % side))
}

/// Counts of selected grid pairs; `counts[ia][ib]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyMap {
    pub grid: Vec<f64>,
    pub counts: Vec<Vec<u32>>,
    pub runs: usize,
}

impl FrequencyMap {
    fn new(grid: Vec<f64>, runs: usize) -> Self {
        let side = grid.len();
        Self { grid, counts: vec![vec![0; side]; side], runs }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| u64::from(c)).sum()
    }

    pub fn count(&self, ia: usize, ib: usize) -> u32 {
        self.counts[ia][ib]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimOutcome {
    pub mse: FrequencyMap,
    pub fdiv: FrequencyMap,
    /// Grid indices of the true pair.
    pub truth: (usize, usize),
}

impl SimOutcome {
    pub fn hits(&self, kind: LossKind) -> u32 {
        let (ia, ib) = self.truth;
        match kind {
            LossKind::Mse => self.mse.count(ia, ib),
            LossKind::Fdiv => self.fdiv.count(ia, ib),
        }
    }

    /// Columns `a, b, count_mse, count_fdiv`, one row per grid pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = ["a", "b", "count_mse", "count_fdiv"].map(String::from);
        let g = &self.mse.grid;
        let mut rows = Vec::with_capacity(g.len() * g.len());
        for (ia, &a) in g.iter().enumerate() {
            for (ib, &b) in g.iter().enumerate() {
                rows.push(vec![a, b, f64::from(self.mse.count(ia, ib)), f64::from(self.fdiv.count(ia, ib))]);
            }
        }
        write_table(path, &header, &rows)
    }
}

/// Run `r` hands each loss kind its own copy of stream `fork(r)`, so both
/// see the same dataset.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed);
    let grid = cfg.grid();
    let mut mse = FrequencyMap::new(grid.clone(), cfg.runs);
    let mut fdiv = FrequencyMap::new(grid, cfg.runs);
    for r in 0..cfg.runs as u64 {
        let (ia, ib) = grid_search_once(&mut base.fork(r), cfg, LossKind::Mse)?;
        mse.counts[ia][ib] += 1;
        let (ia, ib) = grid_search_once(&mut base.fork(r), cfg, LossKind::Fdiv)?;
        fdiv.counts[ia][ib] += 1;
    }
    let truth = (cfg.grid_index(cfg.a_true).unwrap_or(0), cfg.grid_index(cfg.b_true).unwrap_or(0));
    Ok(SimOutcome { mse, fdiv, truth })
}
