//! Dynamic Model Ensembler.
//!
//! Each member's loss on the current batch is its weighted mean entropy of
//! adjusted predictions, normalized by `ln K` into `[0, 1]`. Members are
//! weighted proportionally to `1 − R` and their adjusted predictions are
//! averaged with those weights.

use crate::backbone::{Adjustment, MlpModel, OptimizerState};
use crate::cdo::{adjust_predictions, PriorTracker};
use crate::error::{Error, Result};
use crate::math::{entropy, softmax_rows, Matrix, ProbVector};

/// Denominator below which [`compute_weights`] falls back to uniform.
pub const WEIGHT_DENOM_FLOOR: f64 = 1e-12;

/// Normalized loss `R ∈ [0, 1]` of already-adjusted predictions.
///
/// `Σ w_i H(f̂_i) / (Σ w_i · ln K)`; with all weights zero, the unweighted
/// mean entropy over `ln K`.
pub fn normalized_loss(adjusted: &Matrix, sample_weights: &[f64]) -> Result<f64> {
    let (n, k) = (adjusted.rows(), adjusted.cols());
    if n == 0 {
        return Err(Error::InvalidInput("member loss on an empty batch".into()));
    }
    if sample_weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: sample_weights.len(),
            context: "sample weight count",
        });
    }
    let ln_k = (k as f64).ln();
    let total_weight: f64 = sample_weights.iter().sum();
    let r = if total_weight > 0.0 {
        adjusted
            .iter_rows()
            .zip(sample_weights)
            .map(|(row, w)| w * entropy(row))
            .sum::<f64>()
            / (total_weight * ln_k)
    } else {
        adjusted.iter_rows().map(entropy).sum::<f64>() / (n as f64 * ln_k)
    };
    Ok(r.clamp(0.0, 1.0))
}

/// [`normalized_loss`] of a model on a batch, adjusted by `adj`.
pub fn member_loss(
    model: &MlpModel,
    x: &Matrix,
    sample_weights: &[f64],
    p_hat: &ProbVector,
    p0: &ProbVector,
) -> Result<f64> {
    let raw = softmax_rows(&model.logits(x)?)?;
    let adjusted = adjust_predictions(&raw, p_hat, p0)?;
    normalized_loss(&adjusted, sample_weights)
}

/// `w_i = (1 − R_i) / Σ_j (1 − R_j)`, uniform when the denominator vanishes.
pub fn compute_weights(losses: &[f64]) -> Result<ProbVector> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("ensemble has no members".into()));
    }
    if let Some(r) = losses.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidInput(format!("member loss {r} outside [0, 1]")));
    }
    let scores: Vec<f64> = losses.iter().map(|r| 1.0 - r).collect();
    let denom: f64 = scores.iter().sum();
    if denom <= WEIGHT_DENOM_FLOOR {
        return Ok(ProbVector::uniform(losses.len()));
    }
    Ok(ProbVector::from_normalized_unchecked(
        scores.into_iter().map(|s| s / denom).collect(),
    ))
}

/// Row-wise `Σ_i w_i · f̂_i(x)`.
pub fn ensemble_predict(member_preds: &[Matrix], weights: &ProbVector) -> Result<Matrix> {
    let first = member_preds
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble has no members".into()))?;
    if member_preds.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: member_preds.len(),
            actual: weights.len(),
            context: "ensemble weight count",
        });
    }
    for m in member_preds {
        if m.rows() != first.rows() || m.cols() != first.cols() {
            return Err(Error::DimensionMismatch {
                expected: first.rows() * first.cols(),
                actual: m.rows() * m.cols(),
                context: "member prediction shape",
            });
        }
    }
    if member_preds.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = first.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= weights[0]);
    for (m, &w) in member_preds.iter().zip(weights.iter()).skip(1) {
        out.as_mut_slice()
            .iter_mut()
            .zip(m.as_slice())
            .for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// One base learner: parameters, optimizer, and (optionally) its own tracker.
#[derive(Debug, Clone)]
pub struct Member {
    pub model: MlpModel,
    pub optimizer: OptimizerState,
    pub tracker: Option<PriorTracker>,
}

impl Member {
    pub fn adjustment(&self, shared: &PriorTracker) -> Result<Adjustment> {
        let t = self.tracker.as_ref().unwrap_or(shared);
        Adjustment::from_priors(t.p_hat(), t.p0())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    members: Vec<Member>,
    weights: ProbVector,
    last_losses: Vec<f64>,
    smoothing: f64,
}

impl EnsembleState {
    /// `smoothing ∈ [0, 1)` blends each batch's weights with the previous ones.
    pub fn new(members: Vec<Member>, smoothing: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidInput("ensemble needs at least one member".into()));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidInput(format!(
                "weight smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        let m = members.len();
        Ok(Self {
            members,
            weights: ProbVector::uniform(m),
            last_losses: vec![0.0; m],
            smoothing,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Member] {
        &mut self.members
    }

    pub fn weights(&self) -> &ProbVector {
        &self.weights
    }

    pub fn last_losses(&self) -> &[f64] {
        &self.last_losses
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The weights [`reweight`](Self::reweight) would install for `losses`.
    pub fn preview_weights(&self, losses: &[f64]) -> Result<ProbVector> {
        if losses.len() != self.members.len() {
            return Err(Error::DimensionMismatch {
                expected: self.members.len(),
                actual: losses.len(),
                context: "member loss count",
            });
        }
        let fresh = compute_weights(losses)?;
        if self.smoothing == 0.0 {
            return Ok(fresh);
        }
        let s = self.smoothing;
        ProbVector::normalized(
            fresh
                .iter()
                .zip(self.weights.iter())
                .map(|(n, o)| (1.0 - s) * n + s * o)
                .collect(),
        )
    }

    /// Recomputes the member weights from this batch's losses.
    pub fn reweight(&mut self, losses: Vec<f64>) -> Result<&ProbVector> {
        self.weights = self.preview_weights(&losses)?;
        self.last_losses = losses;
        Ok(&self.weights)
    }
}
