//! Local Consistent Weighter.
//!
//! A sample is consistent when its prediction is within `β` (L2) of the mean
//! prediction over its feature-space neighborhood: the batch points closer
//! than the batch's mean pairwise distance, plus the sample itself. Its
//! adaptation weight is the margin of its adjusted prediction, zeroed when
//! it is inconsistent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{l2_distance, margin, pairwise_l2, Matrix};

/// Rows above which neighborhood work is spread across threads.
const PAR_MIN_ROWS: usize = 128;

/// Mean of the `n(n−1)/2` distances above the diagonal; 0 when `n < 2`.
pub fn mean_pairwise_distance(x: &Matrix) -> f64 {
    mean_upper(&pairwise_l2(x))
}

fn mean_upper(dist: &Matrix) -> f64 {
    let n = dist.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += dist[(i, j)];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Per-sample neighbor index lists (ascending, self always present).
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
    threshold: f64,
}

impl Neighborhoods {
    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    /// The mean pairwise distance used as the cutoff.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

pub fn neighborhoods(x: &Matrix) -> Neighborhoods {
    let dist = pairwise_l2(x);
    let threshold = mean_upper(&dist);
    let n = x.rows();
    let build = |k: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| j == k || dist[(k, j)] < threshold)
            .collect()
    };
    let lists = if n >= PAR_MIN_ROWS {
        (0..n).into_par_iter().map(build).collect()
    } else {
        (0..n).map(build).collect()
    };
    Neighborhoods { lists, threshold }
}

/// `true` where `‖f(x_k) − mean_{N(x_k)} f‖₂ < β`. `β = 0` is accepted and
/// marks every sample inconsistent.
pub fn consistency_indicator(preds: &Matrix, hoods: &Neighborhoods, beta: f64) -> Result<Vec<bool>> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be finite and >= 0, got {beta}")));
    }
    if hoods.len() != preds.rows() {
        return Err(Error::DimensionMismatch {
            expected: preds.rows(),
            actual: hoods.len(),
            context: "neighborhood count",
        });
    }
    let k = preds.cols();
    let check = |i: usize| -> bool {
        let members = hoods.get(i);
        let mut mean = vec![0.0; k];
        for &j in members {
            mean.iter_mut().zip(preds.row(j)).for_each(|(m, v)| *m += v);
        }
        let len = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= len);
        l2_distance(preds.row(i), &mean) < beta
    };
    Ok(if preds.rows() >= PAR_MIN_ROWS {
        (0..preds.rows()).into_par_iter().map(check).collect()
    } else {
        (0..preds.rows()).map(check).collect()
    })
}

/// `margin(f̂(x_k)) · indicator_k`.
pub fn sample_weights(adjusted: &Matrix, indicators: &[bool]) -> Result<Vec<f64>> {
    if indicators.len() != adjusted.rows() {
        return Err(Error::DimensionMismatch {
            expected: adjusted.rows(),
            actual: indicators.len(),
            context: "indicator count",
        });
    }
    Ok(adjusted
        .iter_rows()
        .zip(indicators)
        .map(|(row, &ok)| if ok { margin(row) } else { 0.0 })
        .collect())
}

/// Which predictions feed the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorSource {
    /// Unadjusted model outputs.
    #[default]
    Raw,
    /// Prior-adjusted outputs, the same ones the margin uses.
    Adjusted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodReport {
    pub neighborhoods: Neighborhoods,
    pub mean_distance: f64,
    pub indicators: Vec<bool>,
    pub weights: Vec<f64>,
}

impl NeighborhoodReport {
    pub fn consistent_fraction(&self) -> f64 {
        if self.indicators.is_empty() {
            return 0.0;
        }
        self.indicators.iter().filter(|&&b| b).count() as f64 / self.indicators.len() as f64
    }

    pub fn mean_weight(&self) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

/// Weights for one model's predictions given precomputed neighborhoods.
pub fn weigh(
    hoods: &Neighborhoods,
    raw: &Matrix,
    adjusted: &Matrix,
    beta: f64,
    source: IndicatorSource,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let basis = match source {
        IndicatorSource::Raw => raw,
        IndicatorSource::Adjusted => adjusted,
    };
    let indicators = consistency_indicator(basis, hoods, beta)?;
    let weights = sample_weights(adjusted, &indicators)?;
    Ok((indicators, weights))
}

/// Full weighting pass for one batch.
pub fn weigh_batch(
    x: &Matrix,
    raw: &Matrix,
    adjusted: &Matrix,
    beta: f64,
    source: IndicatorSource,
) -> Result<NeighborhoodReport> {
    let hoods = neighborhoods(x);
    let (indicators, weights) = weigh(&hoods, raw, adjusted, beta, source)?;
    Ok(NeighborhoodReport {
        mean_distance: hoods.threshold(),
        neighborhoods: hoods,
        indicators,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(points: &[f64]) -> Matrix {
        Matrix::from_vec(points.len(), 1, points.to_vec()).unwrap()
    }

    #[test]
    fn mean_distance_examples() {
        assert!((mean_pairwise_distance(&col(&[0.0, 1.0, 4.0])) - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_pairwise_distance(&col(&[2.0, 2.0, 2.0])), 0.0);
        assert_eq!(mean_pairwise_distance(&col(&[5.0])), 0.0);
    }

    #[test]
    fn neighborhood_examples() {
        let h = neighborhoods(&col(&[0.0, 1.0, 4.0]));
        assert_eq!(h.lists(), &[vec![0, 1], vec![0, 1], vec![2]]);
        let h = neighborhoods(&col(&[3.0, 3.0, 3.0]));
        assert_eq!(h.lists(), &[vec![0], vec![1], vec![2]]);
        let h = neighborhoods(&col(&[1.0]));
        assert_eq!(h.lists(), &[vec![0]]);
    }

    #[test]
    fn indicator_examples() {
        let preds = Matrix::from_rows(&[[0.7, 0.3]; 4]).unwrap();
        let h = neighborhoods(&col(&[0.0, 1.0, 2.0, 9.0]));
        assert_eq!(consistency_indicator(&preds, &h, 0.3).unwrap(), vec![true; 4]);

        // Neighborhood mean forced to [0, 1] by construction: ‖diff‖ = √2.
        let preds = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let h = Neighborhoods {
            lists: vec![vec![1], vec![1]],
            threshold: 1.0,
        };
        assert_eq!(consistency_indicator(&preds, &h, 0.3).unwrap()[0], false);

        // Difference of exactly β is not consistent.
        let preds = Matrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]]).unwrap();
        let h = Neighborhoods {
            lists: vec![vec![0, 1], vec![1]],
            threshold: 1.0,
        };
        let diff = l2_distance(&[0.75, 0.25], &[0.5, 0.5]);
        assert_eq!(consistency_indicator(&preds, &h, diff).unwrap()[0], false);
        assert_eq!(consistency_indicator(&preds, &h, diff * (1.0 + 1e-12)).unwrap()[0], true);
    }

    #[test]
    fn zero_beta_rejects_everything() {
        let preds = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let h = neighborhoods(&col(&[0.0, 0.0]));
        assert_eq!(consistency_indicator(&preds, &h, 0.0).unwrap(), [false, false]);
        assert!(consistency_indicator(&preds, &h, -0.1).is_err());
        assert!(consistency_indicator(&preds, &h, f64::NAN).is_err());
    }

    #[test]
    fn weight_examples() {
        let adj = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1], [0.5, 0.5]]).unwrap();
        let w = sample_weights(&adj, &[false, true, true]).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.8).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn single_sample_is_self_consistent() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let p = Matrix::from_rows(&[[0.9, 0.1]]).unwrap();
        let r = weigh_batch(&x, &p, &p, 0.3, IndicatorSource::Raw).unwrap();
        assert_eq!(r.mean_distance, 0.0);
        assert_eq!(r.indicators, vec![true]);
        assert!((r.weights[0] - 0.8).abs() < 1e-15);
    }

    fn batch() -> impl Strategy<Value = (Matrix, Matrix)> {
        (1usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n * 2),
                prop::collection::vec(0.01f64..1.0, n * 2),
            )
                .prop_map(move |(x, p)| {
                    let x = Matrix::from_vec(n, 2, x).unwrap();
                    let rows: Vec<Vec<f64>> = p
                        .chunks(2)
                        .map(|r| {
                            let s = r[0] + r[1];
                            vec![r[0] / s, r[1] / s]
                        })
                        .collect();
                    (x, Matrix::from_rows(&rows).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn weights_bounded_and_gated((x, p) in batch(), beta in 0.01f64..1.0) {
            let r = weigh_batch(&x, &p, &p, beta, IndicatorSource::Raw).unwrap();
            for (w, ok) in r.weights.iter().zip(&r.indicators) {
                prop_assert!((0.0..=1.0).contains(w));
                if !ok {
                    prop_assert_eq!(*w, 0.0);
                }
            }
            for (i, list) in r.neighborhoods.lists().iter().enumerate() {
                prop_assert!(list.contains(&i));
            }
        }

        #[test]
        fn permutation_equivariance((x, p) in batch(), beta in 0.01f64..1.0, rot in 0usize..24) {
            let n = x.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let a = weigh_batch(&x, &p, &p, beta, IndicatorSource::Raw).unwrap();
            let b = weigh_batch(&x.select_rows(&perm), &p.select_rows(&perm), &p.select_rows(&perm), beta, IndicatorSource::Raw).unwrap();
            // Floating-point summation order changes with the permutation, so
            // compare only samples whose decisions are not on a knife edge.
            let mut inv = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            for i in 0..n {
                let j = inv[i];
                let mapped: Vec<usize> = {
                    let mut v: Vec<usize> = b.neighborhoods.get(j).iter().map(|&q| perm[q]).collect();
                    v.sort_unstable();
                    v
                };
                let dist = pairwise_l2(&x);
                let near_edge = (0..n).any(|q| (dist[(i, q)] - a.mean_distance).abs() < 1e-9);
                if !near_edge {
                    prop_assert_eq!(a.neighborhoods.get(i), mapped.as_slice());
                    prop_assert_eq!(a.indicators[i], b.indicators[j]);
                    prop_assert_eq!(a.weights[i], b.weights[j]);
                }
            }
        }
    }
}
