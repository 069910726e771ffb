//! The predict-then-adapt loop.
//!
//! For each batch: forward every member, adjust with the prior entering the
//! batch, weight samples by neighborhood consistency, weight members by their
//! normalized loss and emit the ensemble prediction. Only then does each
//! member take its gradient steps and the tracker fold in the new estimate.

use log::warn;
use rayon::prelude::*;

use crate::backbone::{apply_update, loss_and_gradient, Adjustment, MlpModel, OptimizerState};
use crate::cdo::{adjust_predictions, estimate_and_track, PriorTracker};
use crate::checkpoint::Checkpoint;
use crate::config::{EngineConfig, Method};
use crate::data::Batch;
use crate::dme::{ensemble_predict, normalized_loss, EnsembleState, Member};
use crate::error::{Error, Result};
use crate::lcw::{neighborhoods, weigh};
use crate::math::{argmax, entropy, softmax_rows, Matrix, ProbVector};

/// What the engine emitted for one batch, plus its adaptation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub t: usize,
    /// Ensemble prediction, one probability row per sample.
    pub predictions: Matrix,
    /// Argmax of each prediction row, ties to the lowest index.
    pub labels: Vec<usize>,
    /// Tracked prior used to adjust this batch.
    pub prior_used: ProbVector,
    /// Tracked prior after this batch's update.
    pub p_hat: ProbVector,
    pub member_weights: Vec<f64>,
    pub member_losses: Vec<f64>,
    /// Share of rows whose prediction entropy is below the threshold.
    pub confident_fraction: f64,
    /// Share of rows passing the consistency check, averaged over members.
    pub consistent_fraction: Option<f64>,
    pub mean_weight: Option<f64>,
    /// 1-norm condition number of the regularized confusion matrix.
    pub condition: Option<f64>,
    /// Member updates skipped because of non-finite values.
    pub skipped_updates: usize,
}

/// Everything computed for a batch before any state changes.
struct Evaluation {
    adjusted: Vec<Matrix>,
    sample_weights: Vec<Vec<f64>>,
    consistent: Vec<f64>,
    losses: Vec<f64>,
    member_weights: ProbVector,
    predictions: Matrix,
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    p0: ProbVector,
    input_dim: usize,
    ensemble: EnsembleState,
    tracker: PriorTracker,
}

impl Engine {
    /// Every member starts from `model`.
    pub fn new(model: MlpModel, p0: ProbVector, config: EngineConfig) -> Result<Self> {
        let m = match config.method {
            Method::Ftat => config.learning_rates.len(),
            Method::NoAdapt | Method::EntropyMin => 1,
        };
        Self::from_models(vec![model; m], p0, config)
    }

    /// One starting model per member: one per learning rate for the full
    /// method, exactly one for the baselines.
    pub fn from_models(models: Vec<MlpModel>, p0: ProbVector, config: EngineConfig) -> Result<Self> {
        let Some(model) = models.first() else {
            return Err(Error::InvalidInput("no models given".into()));
        };
        let k = model.num_classes();
        if p0.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: p0.len(),
                context: "source prior length",
            });
        }
        let lrs: Vec<f64> = match config.method {
            Method::Ftat => config.learning_rates.clone(),
            Method::NoAdapt | Method::EntropyMin => vec![config.entropy_min_lr],
        };
        if models.len() != lrs.len() {
            return Err(Error::DimensionMismatch {
                expected: lrs.len(),
                actual: models.len(),
                context: "member model count",
            });
        }
        for m in &models {
            if m.layer_dims() != model.layer_dims() {
                return Err(Error::InvalidInput("member models must share one architecture".into()));
            }
            if !m.is_finite() {
                return Err(Error::InvalidInput("model has non-finite parameters".into()));
            }
        }
        let ln_k = (k as f64).ln();
        if !(config.epsilon > 0.0 && config.epsilon < ln_k) {
            return Err(Error::Config(format!(
                "confidence threshold {} must be in (0, ln {k})",
                config.epsilon
            )));
        }
        let tracker = PriorTracker::new(p0.clone(), config.alpha, config.update_sign, config.tracker_rule)?;
        let per_member = config.per_member_trackers && config.method == Method::Ftat;
        let input_dim = model.input_dim();
        let members = models
            .into_iter()
            .zip(lrs)
            .map(|(model, lr)| {
                Ok(Member {
                    model,
                    optimizer: OptimizerState::new(lr, config.update_rule)?,
                    tracker: per_member.then(|| tracker.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_dim,
            ensemble: EnsembleState::new(members, config.weight_smoothing)?,
            tracker,
            p0,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: EngineConfig) -> Result<Self> {
        Self::new(ckpt.model()?, ckpt.p0.clone(), config)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn ensemble(&self) -> &EnsembleState {
        &self.ensemble
    }

    /// The shared tracker.
    pub fn tracker(&self) -> &PriorTracker {
        &self.tracker
    }

    pub fn p0(&self) -> &ProbVector {
        &self.p0
    }

    pub fn num_classes(&self) -> usize {
        self.p0.len()
    }

    fn check_batch(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.cols(),
                context: "batch feature width",
            });
        }
        if x.rows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        Ok(())
    }

    fn member_prior<'a>(&'a self, m: &'a Member) -> &'a ProbVector {
        m.tracker.as_ref().unwrap_or(&self.tracker).p_hat()
    }

    fn evaluate(&self, x: &Matrix) -> Result<Evaluation> {
        let members = self.ensemble.members();
        let raw: Vec<Matrix> = members
            .par_iter()
            .map(|m| softmax_rows(&m.model.logits(x)?))
            .collect::<Result<_>>()?;
        if self.config.method != Method::Ftat {
            let losses = vec![normalized_loss(&raw[0], &vec![1.0; x.rows()])?];
            return Ok(Evaluation {
                sample_weights: vec![vec![1.0; x.rows()]],
                consistent: Vec::new(),
                member_weights: ProbVector::uniform(1),
                losses,
                predictions: raw[0].clone(),
                adjusted: raw,
            });
        }
        let adjusted: Vec<Matrix> = members
            .iter()
            .zip(&raw)
            .map(|(m, r)| adjust_predictions(r, self.member_prior(m), &self.p0))
            .collect::<Result<_>>()?;
        let hoods = neighborhoods(x);
        let mut sample_weights = Vec::with_capacity(members.len());
        let mut consistent = Vec::with_capacity(members.len());
        for (r, a) in raw.iter().zip(&adjusted) {
            let (ind, w) = weigh(&hoods, r, a, self.config.beta, self.config.indicator_source)?;
            consistent.push(ind.iter().filter(|&&b| b).count() as f64 / ind.len() as f64);
            sample_weights.push(w);
        }
        let losses: Vec<f64> = adjusted
            .iter()
            .zip(&sample_weights)
            .map(|(a, w)| normalized_loss(a, w))
            .collect::<Result<_>>()?;
        let member_weights = self.ensemble.preview_weights(&losses)?;
        let predictions = ensemble_predict(&adjusted, &member_weights)?;
        Ok(Evaluation {
            adjusted,
            sample_weights,
            consistent,
            losses,
            member_weights,
            predictions,
        })
    }

    /// The prediction [`process_batch`](Self::process_batch) would emit for
    /// `x`, without changing any state.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_batch(x)?;
        Ok(self.evaluate(x)?.predictions)
    }

    /// Scores one standardized batch, then adapts on it.
    pub fn process_batch(&mut self, t: usize, x: &Matrix) -> Result<BatchResult> {
        self.check_batch(x)?;
        let eval = self.evaluate(x)?;
        let n = x.rows();
        let prior_used = self.tracker.p_hat().clone();
        let labels: Vec<usize> = eval.predictions.iter_rows().map(argmax).collect();
        let confident = eval
            .predictions
            .iter_rows()
            .filter(|r| entropy(r) < self.config.epsilon)
            .count();

        let mut result = BatchResult {
            t,
            labels,
            prior_used,
            p_hat: self.tracker.p_hat().clone(),
            member_weights: eval.member_weights.to_vec(),
            member_losses: eval.losses.clone(),
            confident_fraction: confident as f64 / n as f64,
            consistent_fraction: None,
            mean_weight: None,
            condition: None,
            skipped_updates: 0,
            predictions: eval.predictions.clone(),
        };
        match self.config.method {
            Method::NoAdapt => {}
            Method::EntropyMin => {
                let k = self.num_classes();
                result.skipped_updates = self.step_members(x, &eval.sample_weights, |_| Ok(Adjustment::identity(k)))?;
            }
            Method::Ftat => {
                self.ensemble.reweight(eval.losses.clone())?;
                let shared = self.tracker.clone();
                let p0 = self.p0.clone();
                result.skipped_updates = self.step_members(x, &eval.sample_weights, |m| {
                    let t = m.tracker.as_ref().unwrap_or(&shared);
                    Adjustment::from_priors(t.p_hat(), &p0)
                })?;
                let (eps, lambda) = (self.config.epsilon, self.config.lambda);
                for (m, adj) in self.ensemble.members_mut().iter_mut().zip(&eval.adjusted) {
                    if let Some(tr) = m.tracker.as_mut() {
                        estimate_and_track(tr, adj, eps, lambda)?;
                    }
                }
                let step = estimate_and_track(&mut self.tracker, &eval.predictions, eps, lambda)?;
                result.condition = step.condition;
                result.p_hat = self.tracker.p_hat().clone();
                let m = eval.consistent.len() as f64;
                result.consistent_fraction = Some(eval.consistent.iter().sum::<f64>() / m);
                result.mean_weight = Some(
                    eval.sample_weights
                        .iter()
                        .map(|w| w.iter().sum::<f64>() / n as f64)
                        .sum::<f64>()
                        / m,
                );
            }
        }
        Ok(result)
    }

    /// Runs `steps_per_batch` weighted-entropy steps on every member in
    /// parallel. Returns the number of skipped updates.
    fn step_members<F>(&mut self, x: &Matrix, weights: &[Vec<f64>], adjustment: F) -> Result<usize>
    where
        F: Fn(&Member) -> Result<Adjustment> + Sync,
    {
        let steps = self.config.steps_per_batch;
        let skipped: Vec<usize> = self
            .ensemble
            .members_mut()
            .par_iter_mut()
            .zip(weights)
            .map(|(m, w)| -> Result<usize> {
                let adj = adjustment(m)?;
                let mut skipped = 0;
                for _ in 0..steps {
                    let (loss, grad) = loss_and_gradient(&m.model, x, w, &adj)?;
                    if !loss.is_finite() {
                        warn!("non-finite adaptation loss; update skipped");
                        skipped += 1;
                        continue;
                    }
                    if !apply_update(&mut m.model, &grad, &mut m.optimizer)? {
                        skipped += 1;
                    }
                }
                Ok(skipped)
            })
            .collect::<Result<_>>()?;
        Ok(skipped.iter().sum())
    }
}

/// Standardizes and adapts over a whole stream. Every batch is checked
/// against the checkpoint before the first one is processed.
pub fn run_stream(ckpt: &Checkpoint, batches: &[Batch], config: &EngineConfig) -> Result<Vec<BatchResult>> {
    ckpt.validate()?;
    if let Some(b) = batches.iter().find(|b| b.features.cols() != ckpt.input_dim()) {
        return Err(Error::Schema(format!(
            "batch {} has {} feature columns but the checkpoint expects {}",
            b.t,
            b.features.cols(),
            ckpt.input_dim()
        )));
    }
    let mut engine = Engine::from_checkpoint(ckpt, config.clone())?;
    batches
        .iter()
        .map(|b| {
            let x = ckpt.standardizer.apply(&b.features)?;
            engine.process_batch(b.t, &x)
        })
        .collect()
}
