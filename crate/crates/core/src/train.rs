//! Source-model training with mini-batch cross-entropy.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{apply_update, cross_entropy_and_gradient, MlpModel, OptimizerState};
use crate::checkpoint::Checkpoint;
use crate::config::{BackboneConfig, TrainConfig};
use crate::data::{Dataset, Standardizer, TableSchema};
use crate::error::{Error, Result};
use crate::math::{argmax, Matrix, ProbVector};

/// Empirical label frequencies.
pub fn label_prior(labels: &[usize], k: usize) -> Result<ProbVector> {
    let mut counts = vec![0.0; k];
    for &y in labels {
        if y >= k {
            return Err(Error::InvalidInput(format!("label {y} out of range for {k} classes")));
        }
        counts[y] += 1.0;
    }
    ProbVector::normalized(counts)
}

pub fn accuracy_of(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    let correct = logits.iter_rows().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Trains the source classifier and packages it with `P0` and the
/// standardization statistics.
///
/// Statistics and `P0` come from all labeled rows. When a holdout fraction is
/// set, the epoch with the lowest holdout cross-entropy is kept.
pub fn train_source(
    dataset: &Dataset,
    schema: &TableSchema,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("training data has no `{}` column", schema.label)))?;
    let k = schema.num_classes();
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    let p0 = label_prior(labels, k)?;
    let present = p0.iter().filter(|&&p| p > 0.0).count();
    if present < 2 {
        return Err(Error::InvalidInput(format!(
            "training labels cover {present} class; at least 2 are required"
        )));
    }
    let stats = Standardizer::fit(&dataset.features, schema)?;
    let x = stats.apply(&dataset.features)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = if n - n_hold < 1 { 0 } else { n_hold };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();
    let hold = (!hold_idx.is_empty()).then(|| (x.select_rows(hold_idx), hold_idx.iter().map(|&i| labels[i]).collect::<Vec<_>>()));

    let mut dims = vec![x.cols()];
    dims.extend(&backbone.hidden);
    dims.push(k);
    let mut model = MlpModel::init(&dims, &mut rng)?;
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.update_rule)?;
    let mut best: Option<(f64, MlpModel)> = None;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = cross_entropy_and_gradient(&model, &xb, &yb)?;
            epoch_loss += loss * chunk.len() as f64;
            apply_update(&mut model, &grad, &mut opt)?;
        }
        epoch_loss /= train_idx.len() as f64;
        if let Some((hx, hy)) = &hold {
            let (hold_loss, _) = cross_entropy_and_gradient(&model, hx, hy)?;
            debug!("epoch {epoch}: train loss {epoch_loss:.5}, holdout loss {hold_loss:.5}");
            if best.as_ref().is_none_or(|(b, _)| hold_loss < *b) {
                best = Some((hold_loss, model.clone()));
            }
        } else {
            debug!("epoch {epoch}: train loss {epoch_loss:.5}");
        }
    }
    if let Some((loss, m)) = best {
        info!("selected model with holdout cross-entropy {loss:.5}");
        model = m;
    }
    Checkpoint::new(&model, p0, stats, schema.clone())
}
