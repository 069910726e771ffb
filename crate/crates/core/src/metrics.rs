//! Classification metrics over one batch.

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: preds.len(),
            context: "prediction count",
        });
    }
    if let Some(v) = preds.iter().chain(labels).find(|&&v| v >= k) {
        return Err(Error::InvalidInput(format!("class index {v} out of range for {k} classes")));
    }
    Ok(())
}

/// `counts[true][pred]`.
fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        c[y][p] += 1;
    }
    c
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check(preds, labels, k)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(ratio(correct, labels.len()))
}

/// Mean recall over the classes that occur in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check(preds, labels, k)?;
    let c = confusion(preds, labels, k);
    let recalls: Vec<f64> = (0..k)
        .filter_map(|y| {
            let support: usize = c[y].iter().sum();
            (support > 0).then(|| ratio(c[y][y], support))
        })
        .collect();
    Ok(if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    })
}

fn f1_for(c: &[Vec<usize>], class: usize) -> f64 {
    let tp = c[class][class];
    let predicted: usize = c.iter().map(|row| row[class]).sum();
    let actual: usize = c[class].iter().sum();
    let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 of class 1 when `k = 2`, macro F1 over all `k` classes otherwise.
/// Precision or recall with an empty denominator counts as 0.
pub fn f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check(preds, labels, k)?;
    let c = confusion(preds, labels, k);
    Ok(if k == 2 {
        f1_for(&c, 1)
    } else {
        (0..k).map(|class| f1_for(&c, class)).sum::<f64>() / k as f64
    })
}
