//! Client-side local training.
//!
//! Every mini-batch is scored with the logits of the forward pass that also
//! feeds the loss. Samples below the batch's `q`-quantile score are weighted
//! by the round's amplification factor, everything else by one. After the
//! last epoch the client scores its whole dataset once and reports the mean.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{backward, forward_pass, sgd_step_in_place, Batch, ModelParams, OptimizerState};
use crate::schedule::WeightSchedule;
use crate::scoring::{aggregate_confidence, compute_mask, percentile_threshold, score_batch, ScorerKind};

/// Local objective used by a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LocalMethod {
    /// OOD-masked loss.
    FLood,
    /// Plain mean loss.
    FedAvg,
    /// Mean loss plus `(mu / 2) * ||theta - theta_global||^2`.
    FedProx { mu: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Fraction of each batch treated as pseudo-OOD.
    pub q: f64,
    pub schedule: WeightSchedule,
    pub scorer: ScorerKind,
    pub method: LocalMethod,
    /// Base learning rate; the server hands out the decayed value each round.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Replaces the schedule with a constant amplification factor.
    pub fixed_lambda: Option<f64>,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config(format!("q must lie in (0, 1), got {}", self.q)));
        }
        self.schedule.validate()?;
        self.scorer.validate()?;
        if let LocalMethod::FedProx { mu } = self.method {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::config(format!(
                    "FedProx mu must be non-negative, got {mu}"
                )));
            }
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(format!(
                    "fixed_lambda must be non-negative, got {l}"
                )));
            }
        }
        OptimizerState::new(1, self.lr, self.momentum, self.weight_decay, 1.0).map(|_| ())
    }

    /// Weight given to pseudo-OOD samples in `round`; `1` for methods that do
    /// not mask.
    pub fn effective_lambda(&self, round: u32) -> f64 {
        match self.method {
            LocalMethod::FLood => self
                .fixed_lambda
                .unwrap_or_else(|| self.schedule.lambda_at(round)),
            LocalMethod::FedAvg | LocalMethod::FedProx { .. } => 1.0,
        }
    }
}

/// What a client uploads: its model, its sample count, and its mean score.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub n: usize,
    pub phi: f64,
}

/// Gradient of `(mu / 2) * ||params - anchor||^2`.
pub fn proximal_grad(params: &ModelParams, anchor: &ModelParams, mu: f64) -> Result<Vec<f64>> {
    if params.len() != anchor.len() {
        return Err(Error::input(format!(
            "proximal anchor has {} parameters, model has {}",
            anchor.len(),
            params.len()
        )));
    }
    Ok(params
        .values()
        .iter()
        .zip(anchor.values())
        .map(|(p, a)| mu * (p - a))
        .collect())
}

/// Loss weights and gradient for one mini-batch.
pub(crate) fn batch_gradient(
    params: &ModelParams,
    anchor: &ModelParams,
    batch: &Batch,
    cfg: &ClientConfig,
    lambda: f64,
) -> Result<Vec<f64>> {
    let pass = forward_pass(params, batch.features())?;
    let weights = match cfg.method {
        LocalMethod::FLood => {
            let scores = score_batch(cfg.scorer, pass.logits())?;
            let tau = percentile_threshold(&scores, cfg.q)?;
            compute_mask(&scores, tau, lambda).into_vec()
        }
        LocalMethod::FedAvg | LocalMethod::FedProx { .. } => vec![1.0; batch.len()],
    };
    let mut grad = backward(params, &pass, batch.labels(), &weights);
    if let LocalMethod::FedProx { mu } = cfg.method {
        for (g, p) in grad.iter_mut().zip(proximal_grad(params, anchor, mu)?) {
            *g += p;
        }
    }
    Ok(grad)
}

/// Runs `cfg.local_epochs` epochs of masked SGD starting from `global`.
///
/// `lr` is the learning rate for this round. The momentum buffer starts at
/// zero on every call. The last mini-batch of an epoch may be short.
pub fn local_update<R: Rng + ?Sized>(
    global: &ModelParams,
    round: u32,
    lr: f64,
    data: &Dataset,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("client dataset is empty"));
    }
    if data.num_classes() > global.num_classes() {
        return Err(Error::config(format!(
            "data has {} classes, model outputs {}",
            data.num_classes(),
            global.num_classes()
        )));
    }
    let mut params = global.clone();
    let mut opt = OptimizerState::new(params.len(), lr, cfg.momentum, cfg.weight_decay, 1.0)?;
    let lambda = cfg.effective_lambda(round);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk)?;
            let grad = batch_gradient(&params, global, &batch, cfg, lambda)?;
            sgd_step_in_place(&mut params, &grad, &mut opt)?;
        }
    }
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::input("local training diverged to non-finite parameters"));
    }
    let phi = aggregate_confidence(&params, data, cfg.scorer)?;
    Ok(ClientUpdate {
        params,
        n: data.len(),
        phi,
    })
}
