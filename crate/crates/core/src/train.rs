//! Minibatch training with the combined loss, per-epoch validation MSE and
//! best-validation checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_table, SplitIndices, TabularDataset};
use crate::loss::{combined_loss, LossConfig, LossOutput};
use crate::model::{backward, forward_eval, forward_train, init_params, param_penalty, ModelSpec, ParameterSet, PenaltyKind};
use crate::numerics::{Rng, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 16,
            lr: 1.0,
            loss: LossConfig::default(),
            seed: 0,
            optimizer: OptimizerKind::Adadelta,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        ensure!(self.epochs >= 1, "need at least one epoch");
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(
            self.loss.w == 0.0 || self.batch_size >= 2,
            "the divergence penalty needs batch size >= 2"
        );
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be >= 0");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean objective (loss plus parameter penalties) over each epoch's batches.
    pub train_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Zero-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainReport {
    /// Running minimum of the validation MSE.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.val_mse
            .iter()
            .scan(f64::INFINITY, |best, &v| {
                *best = best.min(v);
                Some(*best)
            })
            .collect()
    }

    /// Columns `epoch, train_loss, val_mse`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = ["epoch", "train_loss", "val_mse"].map(String::from);
        let rows: Vec<Vec<f64>> = self
            .train_loss
            .iter()
            .zip(&self.val_mse)
            .enumerate()
            .map(|(e, (l, v))| vec![e as f64, *l, *v])
            .collect();
        write_table(path, &header, &rows)
    }
}

/// Shuffled partition of `0..n` into ⌈n/b⌉ batches; the last may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Eval-mode mean squared error over every entry of the listed rows.
pub fn validate_mse(spec: &ModelSpec, params: &ParameterSet, dataset: &TabularDataset, indices: &[usize]) -> Result<f64> {
    ensure!(!indices.is_empty(), "validation indices must be nonempty");
    let x = dataset.x.select_rows(indices)?;
    let y = dataset.y.select_rows(indices)?;
    let preds = forward_eval(spec, params, &x)?;
    let sse: f64 = preds.data().iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / y.len() as f64)
}

/// Trains with [`combined_loss`] and returns the best-validated parameters.
pub fn train(spec: &ModelSpec, dataset: &TabularDataset, splits: &SplitIndices, cfg: &TrainConfig) -> Result<(ParameterSet, TrainReport)> {
    train_with_objective(spec, dataset, splits, cfg, |p, t| batch_loss(p, t, &cfg.loss))
}

/// The per-batch objective used by [`train`].
///
/// A one-row batch pools just two points, where the smoothed divergence is
/// the constant −1 with zero gradient, so such a batch is scored by MSE only.
pub fn batch_loss(preds: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    if preds.rows() < 2 && cfg.w > 0.0 {
        return combined_loss(preds, targets, &LossConfig { w: 0.0, ..cfg.clone() });
    }
    combined_loss(preds, targets, cfg)
}

/// Training loop with a pluggable per-batch objective.
///
/// Random streams: parameter init uses `fork(0)` of the run seed, epoch `e`
/// shuffles with `fork(1).fork(e)`, and dropout masks draw from `fork(2)`.
pub fn train_with_objective<F>(
    spec: &ModelSpec,
    dataset: &TabularDataset,
    splits: &SplitIndices,
    cfg: &TrainConfig,
    mut objective: F,
) -> Result<(ParameterSet, TrainReport)>
where
    F: FnMut(&Tensor, &Tensor) -> Result<LossOutput>,
{
    cfg.validate()?;
    splits.validate(dataset.len())?;
    ensure!(
        dataset.n_features() == spec.input_dim() && dataset.n_targets() == spec.output_dim(),
        "dataset is {}→{}, model is {}→{}",
        dataset.n_features(),
        dataset.n_targets(),
        spec.input_dim(),
        spec.output_dim()
    );

    let base = Rng::new(cfg.seed);
    let mut params = init_params(spec, &mut base.fork(0));
    let shuffle_root = base.fork(1);
    let mut dropout_rng = base.fork(2);
    let mut optimizer = Optimizer::new(cfg.optimizer, &params);

    let train_x = dataset.x.select_rows(&splits.train)?;
    let train_y = dataset.y.select_rows(&splits.train)?;

    let mut best = params.clone();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_mse: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_mse: f64::INFINITY,
    };

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(splits.train.len(), cfg.batch_size, &mut shuffle_root.fork(epoch as u64));
        let mut total = 0.0;
        for (bi, rows) in batches.iter().enumerate() {
            let x = train_x.select_rows(rows)?;
            let y = train_y.select_rows(rows)?;
            let (preds, cache) = forward_train(spec, &mut params, &x, Some(&mut dropout_rng))
                .map_err(|e| locate(e, epoch, bi))?;
            let out = objective(&preds, &y).map_err(|e| locate(e, epoch, bi))?;
            let mut value = out.value;
            let mut grads = backward(spec, &params, cache, &out.grad).map_err(|e| locate(e, epoch, bi))?;
            for (kind, strength) in [(PenaltyKind::L1, cfg.loss.l1_strength), (PenaltyKind::L2, cfg.loss.l2_strength)] {
                if strength > 0.0 {
                    let (pv, pg) = param_penalty(&params, kind, strength)?;
                    value += pv;
                    grads.add_assign(&pg)?;
                }
            }
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            optimizer.step(&mut params, &grads, cfg.lr)?;
            total += value;
        }
        report.train_loss.push(total / batches.len() as f64);

        let val = validate_mse(spec, &params, dataset, &splits.val).map_err(|e| locate(e, epoch, batches.len()))?;
        report.val_mse.push(val);
        if val < report.best_val_mse {
            report.best_val_mse = val;
            report.best_epoch = epoch;
            best = params.clone();
        }
    }
    Ok((best, report))
}

fn locate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// One model/config pair to evaluate in a sweep.
#[derive(Clone, Debug)]
pub struct SweepCandidate {
    pub spec: ModelSpec,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub config: TrainConfig,
    pub best_val_mse: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub best_index: usize,
    pub best_config: TrainConfig,
    pub best_params: ParameterSet,
    pub table: Vec<SweepRow>,
}

/// Trains every config on one model and keeps the lowest validation MSE
/// (first on ties).
pub fn hyperparameter_sweep(spec: &ModelSpec, dataset: &TabularDataset, splits: &SplitIndices, cfgs: &[TrainConfig]) -> Result<SweepResult> {
    let candidates: Vec<SweepCandidate> = cfgs
        .iter()
        .map(|c| SweepCandidate { spec: spec.clone(), config: c.clone() })
        .collect();
    sweep_candidates(dataset, splits, &candidates)
}

/// Like [`hyperparameter_sweep`] but each candidate carries its own model,
/// which dropout sweeps need.
pub fn sweep_candidates(dataset: &TabularDataset, splits: &SplitIndices, candidates: &[SweepCandidate]) -> Result<SweepResult> {
    ensure!(!candidates.is_empty(), "sweep needs at least one config");
    let mut table = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, ParameterSet)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let (params, report) = train(&cand.spec, dataset, splits, &cand.config)?;
        let improves = best
            .as_ref()
            .is_none_or(|(b, _)| report.best_val_mse < table.get(*b).map_or(f64::INFINITY, |r: &SweepRow| r.best_val_mse));
        table.push(SweepRow { config: cand.config.clone(), best_val_mse: report.best_val_mse, best_epoch: report.best_epoch });
        if improves {
            best = Some((i, params));
        }
    }
    let (best_index, best_params) = best.expect("at least one candidate");
    Ok(SweepResult { best_index, best_config: candidates[best_index].config.clone(), best_params, table })
}

/// Regularization grids shipped with the crate.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct HyperparameterGrids {
    pub l1_strengths: Vec<f64>,
    pub l2_strengths: Vec<f64>,
    pub dropout_rates: Vec<f64>,
    /// `(w, γ)` pairs for the divergence penalty.
    pub fdiv_w_gamma: Vec<(f64, f64)>,
}

const DEFAULT_GRIDS: &str = include_str!("../defaults/grids.json");

pub fn default_grids() -> HyperparameterGrids {
    serde_json::from_str(DEFAULT_GRIDS).expect("shipped grid file parses")
}
