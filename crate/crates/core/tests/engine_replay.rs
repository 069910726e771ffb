//! The engine against hand-written replays of the adaptation loop.

use ftat_core::backbone::{loss_and_gradient, Adjustment};
use ftat_core::config::Config;
use ftat_core::math::{entropy, softmax_rows};
use ftat_core::{Batch, Checkpoint, Engine, EngineConfig, Error, Matrix, Method, MlpModel, ProbVector, Standardizer, TableSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(dims: &[usize], seed: u64, scale: f64) -> MlpModel {
    let mut m = MlpModel::init(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let flat: Vec<f64> = m.flatten().iter().map(|v| v * scale).collect();
    m.set_flat(&flat).unwrap();
    m
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn engine_config(edit: impl FnOnce(&mut Config)) -> EngineConfig {
    let mut c = Config::default();
    edit(&mut c);
    c.engine_config(2).unwrap()
}

/// Per-batch state of the replay: the prior entering the batch and the
/// emitted rows.
struct ReplayStep {
    prior: Vec<f64>,
    emitted: Vec<Vec<f64>>,
}

/// Single-member loop written out step by step from the definitions.
fn replay(mut model: MlpModel, p0: &[f64], cfg: &EngineConfig, batches: &[Matrix]) -> (Vec<ReplayStep>, MlpModel, Vec<f64>) {
    let lr = cfg.learning_rates[0];
    let mut p_hat = p0.to_vec();
    let mut steps = Vec::new();
    for x in batches {
        let n = x.rows();
        let raw = softmax_rows(&model.logits(x).unwrap()).unwrap();
        // Prior adjustment.
        let adj: Vec<Vec<f64>> = raw
            .iter_rows()
            .map(|r| {
                let v: Vec<f64> = (0..2).map(|k| r[k] * p_hat[k] / p0[k]).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|a| a / s).collect()
            })
            .collect();
        // Neighborhoods from the mean pairwise distance, self included.
        let dist = |i: usize, j: usize| -> f64 {
            (0..x.cols()).map(|c| (x[(i, c)] - x[(j, c)]).powi(2)).sum::<f64>().sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += dist(i, j);
            }
        }
        let mean_d = total / (n * (n - 1) / 2) as f64;
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                let hood: Vec<usize> = (0..n).filter(|&j| j == i || dist(i, j) < mean_d).collect();
                let mut m = [0.0; 2];
                for &j in &hood {
                    m[0] += raw[(j, 0)];
                    m[1] += raw[(j, 1)];
                }
                let gap = ((raw[(i, 0)] - m[0] / hood.len() as f64).powi(2)
                    + (raw[(i, 1)] - m[1] / hood.len() as f64).powi(2))
                .sqrt();
                if gap < cfg.beta {
                    adj[i][0].max(adj[i][1]) - adj[i][0].min(adj[i][1])
                } else {
                    0.0
                }
            })
            .collect();
        steps.push(ReplayStep {
            prior: p_hat.clone(),
            emitted: adj.clone(),
        });
        // One gradient step.
        let a = Adjustment::from_priors(&ProbVector::new(p_hat.clone()).unwrap(), &ProbVector::new(p0.to_vec()).unwrap()).unwrap();
        let (_, grad) = loss_and_gradient(&model, x, &weights, &a).unwrap();
        let params: Vec<f64> = model.flatten().iter().zip(grad.flatten()).map(|(p, g)| p - lr * g).collect();
        model.set_flat(&params).unwrap();
        // Confident prior, confusion matrix, ridge solve, clamp, smoothing.
        let confident: Vec<&Vec<f64>> = adj.iter().filter(|r| entropy(r) < cfg.epsilon).collect();
        if confident.is_empty() {
            continue;
        }
        let p_tilde: Vec<f64> = (0..2)
            .map(|k| confident.iter().map(|r| r[k]).sum::<f64>() / confident.len() as f64)
            .collect();
        let mut c = [[0.0; 2]; 2];
        let mut counts = [0usize; 2];
        for r in &adj {
            let arg = if r[1] > r[0] { 1 } else { 0 };
            counts[arg] += 1;
            c[arg][0] += r[0];
            c[arg][1] += r[1];
        }
        for k in 0..2 {
            if counts[k] == 0 {
                c[k] = [0.0; 2];
                c[k][k] = 1.0;
            } else {
                c[k][0] /= counts[k] as f64;
                c[k][1] /= counts[k] as f64;
            }
            c[k][k] += cfg.lambda;
        }
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let sol = [
            (c[1][1] * p_tilde[0] - c[0][1] * p_tilde[1]) / det,
            (c[0][0] * p_tilde[1] - c[1][0] * p_tilde[0]) / det,
        ];
        let clamped: Vec<f64> = sol.iter().map(|v| v.max(1e-6)).collect();
        let s: f64 = clamped.iter().sum();
        let d: Vec<f64> = clamped.iter().map(|v| v / s).collect();
        let blended: Vec<f64> = (0..2).map(|k| p_hat[k] + cfg.alpha * (d[k] - p_hat[k])).collect();
        let s: f64 = blended.iter().sum();
        p_hat = blended.iter().map(|v| v / s).collect();
    }
    (steps, model, p_hat)
}

#[test]
fn three_batch_trajectory_matches_scripted_replay() {
    let model = random_model(&[2, 5, 2], 11, 3.0);
    let p0 = [0.6, 0.4];
    let cfg = engine_config(|c| {
        c.dme.learning_rates = vec![0.05];
        c.cdo.alpha = 0.5;
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches: Vec<Matrix> = (0..3).map(|_| random_batch(&mut rng, 24, 2)).collect();
    let (expected, final_model, final_prior) = replay(model.clone(), &p0, &cfg, &batches);

    let mut engine = Engine::new(model, ProbVector::new(p0.to_vec()).unwrap(), cfg).unwrap();
    for (t, (x, want)) in batches.iter().zip(&expected).enumerate() {
        let r = engine.process_batch(t, x).unwrap();
        for (a, b) in r.prior_used.iter().zip(&want.prior) {
            assert!((a - b).abs() < 1e-12, "t={t}: prior {a} vs {b}");
        }
        for (i, row) in want.emitted.iter().enumerate() {
            for k in 0..2 {
                assert!((r.predictions[(i, k)] - row[k]).abs() < 1e-12);
            }
        }
        assert!(r.confident_fraction > 0.0);
    }
    let got = engine.tracker().p_hat();
    for (a, b) in got.iter().zip(&final_prior) {
        assert!((a - b).abs() < 1e-12, "final prior {a} vs {b}");
    }
    assert!((got[0] - p0[0]).abs() > 1e-3, "tracker never moved");
    let flat = engine.ensemble().members()[0].model.flatten();
    for (a, b) in flat.iter().zip(final_model.flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn disabled_adaptation_reproduces_the_frozen_model_bitwise() {
    let model = random_model(&[3, 8, 2], 5, 1.0);
    let p0 = ProbVector::new(vec![0.55, 0.45]).unwrap();
    let collapsed = engine_config(|c| {
        c.cdo.alpha = 0.0;
        c.lcw.beta = 0.0;
        c.dme.learning_rates = vec![5e-4];
        c.engine.steps_per_batch = 0;
    });
    let frozen = engine_config(|c| c.engine.method = Method::NoAdapt);
    let mut a = Engine::new(model.clone(), p0.clone(), collapsed).unwrap();
    let mut b = Engine::new(model.clone(), p0, frozen).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 0..20 {
        let x = random_batch(&mut rng, 40, 3);
        let (ra, rb) = (a.process_batch(t, &x).unwrap(), b.process_batch(t, &x).unwrap());
        assert!(ra.predictions.as_slice().iter().zip(rb.predictions.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(ra.labels, rb.labels);
        assert_eq!(ra.mean_weight, Some(0.0));
    }
    assert_eq!(a.ensemble().members()[0].model, model);
}

#[test]
fn all_zero_weights_still_leave_parameters_untouched_with_steps() {
    let model = random_model(&[3, 8, 2], 6, 1.0);
    let cfg = engine_config(|c| {
        c.lcw.beta = 0.0;
        c.dme.learning_rates = vec![0.1];
    });
    let mut e = Engine::new(model.clone(), ProbVector::uniform(2), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 0..5 {
        e.process_batch(t, &random_batch(&mut rng, 30, 3)).unwrap();
    }
    assert_eq!(e.ensemble().members()[0].model, model);
}

#[test]
fn prediction_depends_only_on_state_entering_the_batch() {
    let cfg = engine_config(|c| c.dme.learning_rates = vec![0.05, 0.01, 0.002]);
    let mut e = Engine::new(random_model(&[4, 6, 2], 9, 2.0), ProbVector::uniform(2), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 0..10 {
        let x = random_batch(&mut rng, 50, 4);
        let snapshot = e.clone();
        let r = e.process_batch(t, &x).unwrap();
        assert_eq!(r.predictions, snapshot.predict(&x).unwrap());
        // The snapshot is still usable and unchanged by the replay.
        assert_eq!(snapshot.tracker().p_hat(), &r.prior_used);
    }
}

#[test]
fn soak_keeps_state_finite() {
    let cfg = engine_config(|c| c.dme.learning_rates = vec![0.05, 0.5, 0.01]);
    let mut e = Engine::new(random_model(&[2, 4, 2], 1, 2.0), ProbVector::new(vec![0.7, 0.3]).unwrap(), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for t in 0..10_000 {
        let x = random_batch(&mut rng, 12, 2);
        let r = e.process_batch(t, &x).unwrap();
        assert!(r.predictions.is_finite(), "t={t}");
        assert!(r.p_hat.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!(r.member_weights.iter().all(|w| w.is_finite()));
    }
    assert!(e.ensemble().members().iter().all(|m| m.model.is_finite()));
}

fn checkpoint(d: usize) -> Checkpoint {
    let schema = TableSchema::new(
        "y",
        vec!["a".into(), "b".into()],
        (0..d).map(|j| ftat_core::data::Feature::numeric(format!("x{j}"))).collect(),
    )
    .unwrap();
    Checkpoint::new(&random_model(&[d, 4, 2], 3, 1.0), ProbVector::uniform(2), Standardizer::identity(d), schema).unwrap()
}

#[test]
fn run_stream_edge_cases() {
    let ckpt = checkpoint(3);
    let cfg = EngineConfig::defaults(2).unwrap();
    assert!(ftat_core::run_stream(&ckpt, &[], &cfg).unwrap().is_empty());

    let good = Batch { t: 0, features: Matrix::zeros(5, 3) };
    let bad = Batch { t: 1, features: Matrix::zeros(5, 4) };
    let err = ftat_core::run_stream(&ckpt, &[good, bad], &cfg).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
}

#[test]
fn same_inputs_same_results() {
    let ckpt = checkpoint(2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batches: Vec<Batch> = (0..8).map(|t| Batch { t, features: random_batch(&mut rng, 64, 2) }).collect();
    let cfg = EngineConfig::defaults(2).unwrap();
    let a = ftat_core::run_stream(&ckpt, &batches, &cfg).unwrap();
    let b = ftat_core::run_stream(&ckpt, &batches, &cfg).unwrap();
    assert_eq!(a, b);
}
