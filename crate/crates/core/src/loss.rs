//! Mean squared error plus a squared penalty pulling the smoothed
//! divergence between predictions and targets toward an enforced level.

use serde::{Deserialize, Serialize};

use crate::divergence::{hp_divergence_smoothed, smoothed_divergence_grad, LabeledPointSet};
use crate::numerics::Tensor;
use crate::Result;

/// Regularization knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Divergence penalty weight `w`.
    pub w: f64,
    /// Enforced divergence `γ ∈ [0, 1]`.
    pub gamma: f64,
    /// Softmax scale `λ`.
    pub lambda: f64,
    pub l1_strength: f64,
    pub l2_strength: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w: 0.0, gamma: 0.0, lambda: 2.0, l1_strength: 0.0, l2_strength: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.w >= 0.0 && self.w.is_finite(), "w must be >= 0, got {}", self.w);
        ensure!((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1], got {}", self.gamma);
        ensure!(self.lambda > 0.0 && self.lambda.is_finite(), "lambda must be > 0, got {}", self.lambda);
        ensure!(self.l1_strength >= 0.0, "l1 strength must be >= 0");
        ensure!(self.l2_strength >= 0.0, "l2 strength must be >= 0");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the predictions.
    pub grad: Tensor,
    pub mse: f64,
    /// Smoothed divergence, unclamped; zero when `w = 0`.
    pub d_raw: f64,
    pub d_clamped: f64,
}

/// `Σ(ŷ−y)²/(b·d2) + w·(d_raw − γ)²` and its gradient in `ŷ`.
///
/// `d_raw` is left unclamped so the penalty keeps a gradient outside
/// `[0, 1]`. With `w = 0` the divergence is not evaluated at all.
pub fn combined_loss(preds: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    ensure!(
        preds.shape() == targets.shape() && preds.shape().len() == 2,
        "prediction shape {:?} does not match target shape {:?}",
        preds.shape(),
        targets.shape()
    );
    let b = preds.rows();
    ensure!(
        cfg.w == 0.0 || b >= 2,
        "the divergence penalty needs a batch of at least 2, got {b}"
    );
    let count = preds.len() as f64;
    let mut mse = 0.0;
    let mut grad = vec![0.0; preds.len()];
    for ((g, p), t) in grad.iter_mut().zip(preds.data()).zip(targets.data()) {
        let r = p - t;
        mse += r * r;
        *g = 2.0 * r / count;
    }
    mse /= count;

    let mut value = mse;
    let (mut d_raw, mut d_clamped) = (0.0, 0.0);
    if cfg.w > 0.0 {
        let sets = LabeledPointSet::new(targets.clone(), preds.clone())?;
        let report = hp_divergence_smoothed(&sets, cfg.lambda)?;
        d_raw = report.d_raw;
        d_clamped = report.d_clamped;
        let gap = d_raw - cfg.gamma;
        value += cfg.w * gap * gap;
        let dgrad = smoothed_divergence_grad(&sets, cfg.lambda)?;
        let k = 2.0 * cfg.w * gap;
        for (g, dg) in grad.iter_mut().zip(dgrad.data()) {
            *g += k * dg;
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(preds.shape().to_vec(), grad)?,
        mse,
        d_raw,
        d_clamped,
    })
}
