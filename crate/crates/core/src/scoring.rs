//! Post-hoc confidence scores computed from logits, the per-batch percentile
//! threshold, the pseudo-OOD loss mask, and the dataset-level confidence that
//! clients report to the server.
//!
//! Higher scores mean "more in-distribution" for every scorer.

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_pass, log_sum_exp, row_argmax, ModelParams};

/// Logit-based confidence scorer.
///
/// Feature-space scorers would add variants here; every consumer dispatches
/// through [`score_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScorerKind {
    /// Maximum softmax probability.
    Msp,
    /// Largest raw logit.
    MaxLogit,
    /// Negative free energy, `T * logsumexp(z / T)`.
    Energy { temperature: f64 },
}

impl ScorerKind {
    pub const DEFAULT_ENERGY: ScorerKind = ScorerKind::Energy { temperature: 1.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScorerKind::Energy { temperature } if !(temperature > 0.0 && temperature.is_finite()) => Err(
                Error::config(format!("energy temperature must be positive, got {temperature}")),
            ),
            _ => Ok(()),
        }
    }

    fn score_row(&self, row: ndarray::ArrayView1<'_, f64>) -> f64 {
        match *self {
            ScorerKind::Msp => {
                let (_, max) = row_argmax(row);
                1.0 / row.iter().map(|&z| (z - max).exp()).sum::<f64>()
            }
            ScorerKind::MaxLogit => row_argmax(row).1,
            ScorerKind::Energy { temperature } => {
                let scaled = row.mapv(|z| z / temperature);
                temperature * log_sum_exp(scaled.view())
            }
        }
    }
}

/// One confidence score per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::input(format!("score {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-sample loss weights: `1` for genuine-ID samples, `lambda` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Vec<f64>);

impl Mask {
    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn score_batch(scorer: ScorerKind, logits: ArrayView2<'_, f64>) -> Result<ScoreVector> {
    scorer.validate()?;
    if logits.ncols() == 0 {
        return Err(Error::input("logits need at least one class"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::input("logits contain non-finite values"));
    }
    ScoreVector::new(logits.outer_iter().map(|row| scorer.score_row(row)).collect())
}

/// 1-based nearest rank `ceil(q * n)`.
///
/// Products that land within a few ulps of an integer snap to it, so that
/// e.g. `q = 0.7, n = 30` gives rank 21 rather than 22.
pub(crate) fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let snapped = x.round();
    let rank = if (x - snapped).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
        snapped
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// Nearest-rank `q`-quantile: the `ceil(q * n)`-th smallest score.
pub fn percentile_threshold(scores: &ScoreVector, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("q must lie in (0, 1), got {q}")));
    }
    if scores.is_empty() {
        return Err(Error::input("cannot take a percentile of no scores"));
    }
    let mut sorted = scores.0.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// `lambda` below the threshold, `1` at or above it.
pub fn compute_mask(scores: &ScoreVector, threshold: f64, lambda: f64) -> Mask {
    debug_assert!(lambda >= 0.0, "mask weight must be non-negative");
    Mask(
        scores
            .0
            .iter()
            .map(|&s| if s < threshold { lambda } else { 1.0 })
            .collect(),
    )
}

/// Rows scored per forward pass when sweeping a whole dataset.
const SCORING_CHUNK: usize = 256;

/// Mean confidence of `params` over every sample of `dataset`. Read-only.
pub fn aggregate_confidence(params: &ModelParams, dataset: &Dataset, scorer: ScorerKind) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("cannot aggregate confidence over an empty dataset"));
    }
    let features = dataset.features();
    let mut total = 0.0;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + SCORING_CHUNK).min(dataset.len());
        let pass = forward_pass(params, features.slice(s![start..end, ..]))?;
        total += score_batch(scorer, pass.logits())?.0.iter().sum::<f64>();
        start = end;
    }
    Ok(total / dataset.len() as f64)
}
