//! Confident Distribution Optimizer.
//!
//! Estimates the label prior of the current batch from low-entropy
//! predictions, removes the classifier's bias with the soft confusion matrix,
//! tracks the estimate across batches, and re-weights predictions by the
//! ratio of the tracked prior to the source prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    argmax, entropy, softmax, solve_regularized, Matrix, ProbVector, SquareMatrix, PROB_FLOOR,
};

/// Floor applied to debiased prior entries before renormalizing.
pub const DEBIAS_FLOOR: f64 = 1e-6;

/// Default ridge added to the confusion matrix before solving.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

fn check_prior_len(p: &ProbVector, k: usize) -> Result<()> {
    if p.len() == k {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: k,
            actual: p.len(),
            context: "prior length",
        })
    }
}

/// Rescales each row by `P̂ / P0` and renormalizes it onto the simplex.
///
/// A constant ratio (in particular `P̂ = P0`) returns the rows untouched.
pub fn adjust_predictions(preds: &Matrix, p_hat: &ProbVector, p0: &ProbVector) -> Result<Matrix> {
    let k = preds.cols();
    check_prior_len(p_hat, k)?;
    check_prior_len(p0, k)?;
    let ratio: Vec<f64> = p_hat
        .iter()
        .zip(p0.iter())
        .map(|(h, s)| h / s.max(PROB_FLOOR))
        .collect();
    if ratio.iter().all(|&r| r == ratio[0]) {
        return Ok(preds.clone());
    }
    let mut out = preds.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut sum = 0.0;
        for (v, r) in row.iter_mut().zip(&ratio) {
            *v *= r;
            sum += *v;
        }
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            // Every class with mass was zeroed by the ratio; keep the input row.
            row.copy_from_slice(preds.row(i));
        }
    }
    Ok(out)
}

/// Mean of the prediction rows whose entropy is below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentEstimate {
    pub prior: ProbVector,
    /// Number of rows that passed the entropy filter.
    pub count: usize,
}

/// Returns `None` when no row is confident; that is a signal, not an error.
pub fn estimate_confident_prior(preds: &Matrix, epsilon: f64) -> Option<ConfidentEstimate> {
    let k = preds.cols();
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for row in preds.iter_rows() {
        if entropy(row) < epsilon {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let prior = ProbVector::normalized(sum.into_iter().map(|s| s / count as f64).collect()).ok()?;
    Some(ConfidentEstimate { prior, count })
}

/// Row `k` is the mean prediction over rows predicted as class `k` (ties to
/// the lowest index); classes never predicted get the one-hot row `e_k`.
pub fn confusion_matrix(preds: &Matrix) -> Result<SquareMatrix> {
    let k = preds.cols();
    let mut sums = Matrix::zeros(k, k);
    let mut counts = vec![0usize; k];
    for row in preds.iter_rows() {
        let c = argmax(row);
        counts[c] += 1;
        sums.row_mut(c).iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums[(c, c)] = 1.0;
        } else {
            let n = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
        }
    }
    SquareMatrix::new(sums)
}

/// Solves `(C + λI) x = P̃`, floors entries at [`DEBIAS_FLOOR`], renormalizes.
pub fn debias(c: &SquareMatrix, p_tilde: &ProbVector, lambda: f64) -> Result<ProbVector> {
    let x = solve_regularized(c, p_tilde, lambda)?;
    let clamped: Vec<f64> = x.into_iter().map(|v| v.max(DEBIAS_FLOOR)).collect();
    ProbVector::normalized(clamped)
}

/// 1-norm condition number of `C + λI`; `None` when the system is singular.
pub fn condition_number(c: &SquareMatrix, lambda: f64) -> Option<f64> {
    let k = c.dim();
    let mut a = c.matrix().clone();
    for i in 0..k {
        a[(i, i)] += lambda;
    }
    let norm_a = (0..k)
        .map(|j| (0..k).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut norm_inv: f64 = 0.0;
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let col = solve_regularized(c, &e, lambda).ok()?;
        norm_inv = norm_inv.max(col.iter().map(|v| v.abs()).sum());
    }
    Some(norm_a * norm_inv)
}

/// Direction in which a debiased estimate moves the tracked prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum UpdateSign {
    Plus,
    Minus,
}

impl UpdateSign {
    pub fn as_f64(self) -> f64 {
        match self {
            UpdateSign::Plus => 1.0,
            UpdateSign::Minus => -1.0,
        }
    }
}

impl TryFrom<i64> for UpdateSign {
    type Error = String;

    fn try_from(v: i64) -> Result<Self, String> {
        match v {
            1 => Ok(UpdateSign::Plus),
            -1 => Ok(UpdateSign::Minus),
            other => Err(format!("update_sign must be 1 or -1, got {other}")),
        }
    }
}

impl From<UpdateSign> for i64 {
    fn from(s: UpdateSign) -> i64 {
        match s {
            UpdateSign::Plus => 1,
            UpdateSign::Minus => -1,
        }
    }
}

/// How a debiased estimate is folded into the tracked prior. Both rules keep
/// `P̂ = softmax(accumulator)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackerRule {
    /// `acc ← ln max(P̂ + sign·α·(d − P̂), floor)`: an exponential moving
    /// average of the estimates when `sign = +1`.
    #[default]
    Ema,
    /// `acc ← acc + sign·α·d`: the additive logit update. Its softmax drifts
    /// by `α·(d − 1/K)` every batch and never settles on a non-uniform prior.
    Accumulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTracker {
    p0: ProbVector,
    accumulator: Vec<f64>,
    p_hat: ProbVector,
    alpha: f64,
    sign: UpdateSign,
    rule: TrackerRule,
    updates: usize,
}

impl PriorTracker {
    pub fn new(p0: ProbVector, alpha: f64, sign: UpdateSign, rule: TrackerRule) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!(
                "smoothing factor must be in [0, 1], got {alpha}"
            )));
        }
        let accumulator = p0.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
        Ok(Self {
            p_hat: p0.clone(),
            p0,
            accumulator,
            alpha,
            sign,
            rule,
            updates: 0,
        })
    }

    pub fn p_hat(&self) -> &ProbVector {
        &self.p_hat
    }

    pub fn p0(&self) -> &ProbVector {
        &self.p0
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sign(&self) -> UpdateSign {
        self.sign
    }

    pub fn rule(&self) -> TrackerRule {
        self.rule
    }

    /// Number of updates that changed the state.
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Starts the tracker from an explicit accumulator instead of `ln P0`.
    pub fn with_accumulator(mut self, accumulator: Vec<f64>) -> Result<Self> {
        if accumulator.len() != self.p0.len() {
            return Err(Error::DimensionMismatch {
                expected: self.p0.len(),
                actual: accumulator.len(),
                context: "accumulator length",
            });
        }
        self.p_hat = softmax(&accumulator)?;
        self.accumulator = accumulator;
        Ok(self)
    }

    pub fn update(&mut self, debiased: &ProbVector) -> Result<()> {
        check_prior_len(debiased, self.p0.len())?;
        if self.alpha == 0.0 {
            return Ok(());
        }
        let step = self.sign.as_f64() * self.alpha;
        match self.rule {
            TrackerRule::Accumulate => {
                for (a, d) in self.accumulator.iter_mut().zip(debiased.iter()) {
                    *a += step * d;
                }
            }
            TrackerRule::Ema => {
                for ((a, p), d) in self
                    .accumulator
                    .iter_mut()
                    .zip(self.p_hat.iter())
                    .zip(debiased.iter())
                {
                    *a = (p + step * (d - p)).max(PROB_FLOOR).ln();
                }
            }
        }
        self.p_hat = softmax(&self.accumulator)?;
        self.updates += 1;
        Ok(())
    }
}

/// Everything one prior-estimation step produced, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStep {
    pub confident: usize,
    pub estimate: Option<ProbVector>,
    pub debiased: Option<ProbVector>,
    pub condition: Option<f64>,
}

/// Runs estimate → confusion matrix → debias → tracker update on adjusted
/// predictions. An empty confident set leaves the tracker untouched.
pub fn estimate_and_track(
    tracker: &mut PriorTracker,
    adjusted: &Matrix,
    epsilon: f64,
    lambda: f64,
) -> Result<PriorStep> {
    let Some(est) = estimate_confident_prior(adjusted, epsilon) else {
        return Ok(PriorStep {
            confident: 0,
            estimate: None,
            debiased: None,
            condition: None,
        });
    };
    let c = confusion_matrix(adjusted)?;
    let debiased = debias(&c, &est.prior, lambda)?;
    tracker.update(&debiased)?;
    Ok(PriorStep {
        confident: est.count,
        condition: condition_number(&c, lambda),
        estimate: Some(est.prior),
        debiased: Some(debiased),
    })
}
