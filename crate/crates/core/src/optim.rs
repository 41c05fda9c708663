//! Adadelta and plain SGD over a [`ParameterSet`]'s learnable tensors.

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ParameterSet};
use crate::numerics::Tensor;
use crate::Result;

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adadelta,
    Sgd,
}

/// Running averages `E[g²]` and `E[Δ²]`, one pair per learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl AdadeltaState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || params.learnable().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { rho: ADADELTA_RHO, epsilon: ADADELTA_EPSILON, sq_grad: zeros(), sq_update: zeros() }
    }

    pub fn sq_grad(&self) -> &[Tensor] {
        &self.sq_grad
    }

    pub fn sq_update(&self) -> &[Tensor] {
        &self.sq_update
    }
}

fn check_shapes(params: &ParameterSet, grads: &Gradients) -> Result<()> {
    let learnable = params.learnable();
    ensure!(
        learnable.len() == grads.tensors.len()
            && learnable.iter().zip(&grads.tensors).all(|(p, g)| p.shape() == g.shape()),
        "gradient shapes do not match parameters"
    );
    Ok(())
}

/// One Adadelta update, scaled by the learning-rate multiplier `r`:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1−ρ) g²
/// Δ     ← −√(E[Δ²]+ε) / √(E[g²]+ε) · g
/// E[Δ²] ← ρ E[Δ²] + (1−ρ) Δ²
/// θ     ← θ + r Δ
/// ```
pub fn adadelta_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdadeltaState, r: f64) -> Result<()> {
    check_shapes(params, grads)?;
    ensure!(
        state.sq_grad.len() == grads.tensors.len()
            && state.sq_grad.iter().zip(&grads.tensors).all(|(s, g)| s.shape() == g.shape()),
        "optimizer state does not match parameters"
    );
    let (rho, eps) = (state.rho, state.epsilon);
    for (((p, g), eg), ed) in params
        .learnable_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(state.sq_grad.iter_mut())
        .zip(state.sq_update.iter_mut())
    {
        for (((theta, &gv), eg2), ed2) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(eg.data_mut())
            .zip(ed.data_mut())
        {
            *eg2 = rho * *eg2 + (1.0 - rho) * gv * gv;
            let delta = -((*ed2 + eps).sqrt() / (*eg2 + eps).sqrt()) * gv;
            *ed2 = rho * *ed2 + (1.0 - rho) * delta * delta;
            *theta += r * delta;
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.learnable_mut().into_iter().zip(&grads.tensors) {
        for (theta, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *theta -= lr * gv;
        }
    }
    Ok(())
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adadelta(AdadeltaState),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParameterSet) -> Self {
        match kind {
            OptimizerKind::Adadelta => Optimizer::Adadelta(AdadeltaState::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adadelta(state) => adadelta_step(params, grads, state, lr),
            Optimizer::Sgd => sgd_step(params, grads, lr),
        }
    }
}
