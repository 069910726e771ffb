//! Class-conditional Gaussian streams with scheduled label shift and
//! per-class covariate transforms.
//!
//! Randomness comes from ChaCha8 keyed by the spec seed; the source training
//! table and every batch draw from their own stream id, so any batch can be
//! regenerated on its own.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::schema::{Feature, TableSchema};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math::{Matrix, ProbVector};

const TRAIN_STREAM: u64 = 0;
const BATCH_STREAM_BASE: u64 = 1;

/// Shift applied to one class's features at test time:
/// `x = mean + translation + scale · z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateTransform {
    pub translation: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl CovariateTransform {
    pub fn none(d: usize) -> Self {
        Self {
            translation: vec![0.0; d],
            scale: 1.0,
        }
    }
}

/// Everything needed to generate a shifted test stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    /// Class prior for each batch, `priors.len() == n_batches`.
    pub priors: Vec<ProbVector>,
    /// One transform per class.
    pub transforms: Vec<CovariateTransform>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Distance between any two class means before shifting.
    pub separation: f64,
}

impl ShiftSpec {
    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        if k < 2 || d == 0 {
            return Err(Error::InvalidInput("need K >= 2 classes and d >= 1 features".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.priors.len() != self.n_batches {
            return Err(Error::DimensionMismatch {
                expected: self.n_batches,
                actual: self.priors.len(),
                context: "per-batch prior count",
            });
        }
        if let Some(p) = self.priors.iter().find(|p| p.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: p.len(),
                context: "prior length",
            });
        }
        if self.transforms.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: self.transforms.len(),
                context: "covariate transform count",
            });
        }
        for t in &self.transforms {
            if t.translation.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: t.translation.len(),
                    context: "translation length",
                });
            }
            if !(t.scale > 0.0 && t.scale.is_finite()) {
                return Err(Error::InvalidInput("transform scale must be positive".into()));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidInput("separation must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Linear ramp of priors from `from` to `to` over `n` batches.
pub fn prior_ramp(from: &ProbVector, to: &ProbVector, n: usize) -> Result<Vec<ProbVector>> {
    if from.len() != to.len() {
        return Err(Error::DimensionMismatch {
            expected: from.len(),
            actual: to.len(),
            context: "ramp endpoint length",
        });
    }
    (0..n)
        .map(|t| {
            let frac = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
            ProbVector::normalized(
                from.iter()
                    .zip(to.iter())
                    .map(|(a, b)| a + (b - a) * frac)
                    .collect(),
            )
        })
        .collect()
}

/// Class means with pairwise distance `separation`: scaled unit vectors when
/// `K <= d`, evenly spaced points on the first axis otherwise.
pub fn class_means(k: usize, d: usize, separation: f64) -> Matrix {
    let mut means = Matrix::zeros(k, d);
    if k <= d && k > 2 {
        let s = separation / std::f64::consts::SQRT_2;
        for c in 0..k {
            means[(c, c)] = s;
        }
    } else {
        let center = (k - 1) as f64 / 2.0;
        for c in 0..k {
            means[(c, 0)] = separation * (c as f64 - center);
        }
    }
    means
}

/// Evaluation-only ground truth for one batch. Kept apart from [`Batch`] so
/// the adaptation path never sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub t: usize,
    pub prior: ProbVector,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub batch: Batch,
    pub truth: GroundTruth,
}

fn draw_class<R: Rng>(rng: &mut R, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    prior: &[f64],
    means: &Matrix,
    transforms: Option<&[CovariateTransform]>,
) -> (Matrix, Vec<usize>) {
    let d = means.cols();
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = draw_class(rng, prior);
        labels.push(y);
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = match transforms {
                Some(ts) => means[(y, j)] + ts[y].translation[j] + ts[y].scale * z,
                None => means[(y, j)] + z,
            };
        }
    }
    (x, labels)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unshifted labeled rows from the source distribution.
pub fn generate_source_table(
    spec: &ShiftSpec,
    source_prior: &ProbVector,
    k: usize,
    d: usize,
    n: usize,
) -> Result<(Matrix, Vec<usize>)> {
    spec.validate(k, d)?;
    if source_prior.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: source_prior.len(),
            context: "source prior length",
        });
    }
    let means = class_means(k, d, spec.separation);
    let mut rng = rng_for(spec.seed, TRAIN_STREAM);
    Ok(sample_rows(&mut rng, n, source_prior, &means, None))
}

/// Batch `t` of the shifted stream.
pub fn generate_batch(spec: &ShiftSpec, k: usize, d: usize, t: usize) -> Result<LabeledBatch> {
    spec.validate(k, d)?;
    if t >= spec.n_batches {
        return Err(Error::InvalidInput(format!(
            "batch {t} outside a stream of {} batches",
            spec.n_batches
        )));
    }
    let means = class_means(k, d, spec.separation);
    let mut rng = rng_for(spec.seed, BATCH_STREAM_BASE + t as u64);
    let prior = &spec.priors[t];
    let (features, labels) = sample_rows(&mut rng, spec.batch_size, prior, &means, Some(&spec.transforms));
    Ok(LabeledBatch {
        batch: Batch { t, features },
        truth: GroundTruth {
            t,
            prior: prior.clone(),
            labels,
        },
    })
}

pub fn generate_synthetic_stream(spec: &ShiftSpec, k: usize, d: usize) -> Result<Vec<LabeledBatch>> {
    spec.validate(k, d)?;
    (0..spec.n_batches).map(|t| generate_batch(spec, k, d, t)).collect()
}

/// Prior schedule as written in a synth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSchedule {
    Constant { prior: Vec<f64> },
    Ramp { from: Vec<f64>, to: Vec<f64> },
    List { priors: Vec<Vec<f64>> },
}

/// Per-class transform as written in a synth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShift {
    pub class: usize,
    pub translation: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
}

/// The `synth --spec` file: a [`ShiftSpec`] plus the table geometry and the
/// size of the unshifted source split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub features: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub n_batches: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Source label distribution for the training split; uniform when absent.
    #[serde(default)]
    pub source_prior: Option<Vec<f64>>,
    pub priors: PriorSchedule,
    #[serde(default)]
    pub shift: Vec<ClassShift>,
}

fn default_separation() -> f64 {
    3.0
}

fn default_batch_size() -> usize {
    512
}

fn default_train_size() -> usize {
    4096
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn source_prior(&self) -> Result<ProbVector> {
        match &self.source_prior {
            Some(p) => ProbVector::new(p.clone()),
            None => Ok(ProbVector::uniform(self.classes)),
        }
    }

    pub fn shift_spec(&self) -> Result<ShiftSpec> {
        let (k, d) = (self.classes, self.features);
        let priors = match &self.priors {
            PriorSchedule::Constant { prior } => vec![ProbVector::new(prior.clone())?; self.n_batches],
            PriorSchedule::Ramp { from, to } => prior_ramp(
                &ProbVector::new(from.clone())?,
                &ProbVector::new(to.clone())?,
                self.n_batches,
            )?,
            PriorSchedule::List { priors } => priors
                .iter()
                .map(|p| ProbVector::new(p.clone()))
                .collect::<Result<_>>()?,
        };
        let mut transforms = vec![CovariateTransform::none(d); k];
        for s in &self.shift {
            if s.class >= k {
                return Err(Error::Config(format!("shift names class {} but K = {k}", s.class)));
            }
            transforms[s.class] = CovariateTransform {
                translation: s.translation.clone(),
                scale: s.scale,
            };
        }
        let spec = ShiftSpec {
            priors,
            transforms,
            n_batches: self.n_batches,
            batch_size: self.batch_size,
            seed: self.seed,
            separation: self.separation,
        };
        spec.validate(k, d)?;
        Ok(spec)
    }

    /// Numeric schema `x0..x{d-1}`, label `label`, classes `c0..c{K-1}`.
    pub fn schema(&self) -> Result<TableSchema> {
        TableSchema::new(
            "label",
            (0..self.classes).map(|c| format!("c{c}")).collect(),
            (0..self.features).map(|j| Feature::numeric(format!("x{j}"))).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(priors: Vec<ProbVector>, batch: usize) -> ShiftSpec {
        ShiftSpec {
            n_batches: priors.len(),
            priors,
            transforms: vec![CovariateTransform::none(3); 2],
            batch_size: batch,
            seed: 42,
            separation: 2.0,
        }
    }

    #[test]
    fn uniform_priors_give_uniform_frequencies() {
        let s = spec(vec![ProbVector::uniform(2); 100], 64);
        let stream = generate_synthetic_stream(&s, 2, 3).unwrap();
        let ones: usize = stream.iter().map(|b| b.truth.labels.iter().filter(|&&y| y == 1).count()).sum();
        let freq = ones as f64 / 6400.0;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn same_seed_same_stream() {
        let s = spec(vec![ProbVector::uniform(2); 5], 32);
        assert_eq!(
            generate_synthetic_stream(&s, 2, 3).unwrap(),
            generate_synthetic_stream(&s, 2, 3).unwrap()
        );
        let mut other = s.clone();
        other.seed = 43;
        assert_ne!(
            generate_synthetic_stream(&s, 2, 3).unwrap(),
            generate_synthetic_stream(&other, 2, 3).unwrap()
        );
    }

    #[test]
    fn batches_regenerate_independently() {
        let s = spec(vec![ProbVector::uniform(2); 6], 16);
        let all = generate_synthetic_stream(&s, 2, 3).unwrap();
        assert_eq!(generate_batch(&s, 2, 3, 4).unwrap(), all[4]);
    }

    #[test]
    fn ramp_frequencies_track_schedule() {
        let from = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let to = ProbVector::new(vec![0.9, 0.1]).unwrap();
        let priors = prior_ramp(&from, &to, 20).unwrap();
        assert_eq!(priors[0], from);
        assert!((priors[19][0] - 0.9).abs() < 1e-15);
        let n = 2000;
        let stream = generate_synthetic_stream(&spec(priors, n), 2, 3).unwrap();
        for b in &stream {
            let p = b.truth.prior[0];
            let freq = b.truth.labels.iter().filter(|&&y| y == 0).count() as f64 / n as f64;
            // Five binomial standard deviations.
            let bound = 5.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= bound, "t={} freq={freq} p={p}", b.batch.t);
        }
    }

    #[test]
    fn transforms_translate_class_means() {
        let mut s = spec(vec![ProbVector::new(vec![1.0, 0.0]).unwrap()], 4000);
        s.transforms[0].translation = vec![1.0, -2.0, 0.0];
        let b = generate_batch(&s, 2, 3, 0).unwrap();
        let means = class_means(2, 3, 2.0);
        for j in 0..3 {
            let m = (0..4000).map(|i| b.batch.features[(i, j)]).sum::<f64>() / 4000.0;
            let want = means[(0, j)] + s.transforms[0].translation[j];
            assert!((m - want).abs() < 0.1, "col {j}: {m} vs {want}");
        }
    }

    #[test]
    fn class_means_are_separated() {
        for (k, d) in [(2, 3), (3, 5), (4, 2)] {
            let m = class_means(k, d, 3.0);
            for a in 0..k {
                for b in (a + 1)..k {
                    let dist = crate::math::l2_distance(m.row(a), m.row(b));
                    assert!(dist >= 3.0 - 1e-12, "K={k} d={d}: {dist}");
                }
            }
        }
    }

    #[test]
    fn synth_file_parses() {
        let text = r#"
            seed = 3
            classes = 2
            features = 2
            n_batches = 4
            batch_size = 8
            [priors]
            kind = "ramp"
            from = [0.5, 0.5]
            to = [0.8, 0.2]
            [[shift]]
            class = 0
            translation = [1.0, 0.0]
        "#;
        let s = SynthSpec::from_toml_str(text).unwrap();
        let shift = s.shift_spec().unwrap();
        assert_eq!(shift.priors.len(), 4);
        assert_eq!(shift.transforms[0].translation, vec![1.0, 0.0]);
        assert_eq!(shift.transforms[0].scale, 1.0);
        assert!(SynthSpec::from_toml_str(&format!("{text}\nunknown = 1")).is_err());
    }
}
