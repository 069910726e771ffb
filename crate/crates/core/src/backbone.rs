//! Multilayer-perceptron classifier with analytic gradients.
//!
//! Parameters are stored per layer as an `out × in` row-major weight matrix
//! and a bias vector. The flattened parameter order used by checkpoints and
//! gradient checks is: layer 0 weights, layer 0 bias, layer 1 weights, ...
//!
//! The test-time objective is the weighted entropy of prior-adjusted
//! predictions. Adjusting `softmax(z)` by the ratio `P̂ / P0` and renormalizing
//! equals `softmax(z + ln(P̂ / P0))`, so the adjustment enters the loss as a
//! constant logit offset and gradients flow through the renormalization.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax_into, Matrix, ProbVector, PROB_FLOOR};

/// Row-block size above which dense kernels fan out across threads.
const PAR_MIN_FLOPS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }

    /// `out[i] = W x_i + b` for every row.
    fn forward(&self, x: &Matrix) -> Matrix {
        let n = x.rows();
        let out_dim = self.output_dim();
        let mut out = Matrix::zeros(n, out_dim);
        if out_dim == 0 {
            return out;
        }
        let row_kernel = |(i, row): (usize, &mut [f64])| {
            let xi = x.row(i);
            for (o, slot) in row.iter_mut().enumerate() {
                *slot = dot(self.weights.row(o), xi) + self.bias[o];
            }
        };
        if n * self.param_count() >= PAR_MIN_FLOPS {
            out.as_mut_slice()
                .par_chunks_mut(out_dim)
                .enumerate()
                .for_each(row_kernel);
        } else {
            out.as_mut_slice()
                .chunks_mut(out_dim)
                .enumerate()
                .for_each(row_kernel);
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient with the same shape as an [`MlpModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layers: Vec<Dense>,
}

impl Gradient {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|&v| v == 0.0))
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.values_mut().for_each(|v| *v *= c);
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.values_mut().zip(b.values()).for_each(|(x, y)| *x += y);
        }
    }

    fn same_shape(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.input_dim() == l.input_dim() && g.output_dim() == l.output_dim()
            })
    }
}

/// Cached activations from a forward pass: `activations[0]` is the input,
/// the last entry holds the logits, and hidden entries are post-activation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Matrix>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("forward pass has an output")
    }

    pub fn into_logits(mut self) -> Matrix {
        self.activations.pop().expect("forward pass has an output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    activation: Activation,
}

impl MlpModel {
    fn validate_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput(
                "an MLP needs at least input and output dimensions".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidInput("layer dimensions must be positive".into()));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::InvalidInput("a classifier needs K >= 2 outputs".into()));
        }
        Ok(())
    }

    /// All-zero parameters: every input maps to the uniform prediction.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::validate_dims(layer_dims)?;
        Ok(Self {
            layers: layer_dims
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            activation: Activation::Relu,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for layer in &mut model.layers {
            let std = (2.0 / layer.input_dim() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in layer.weights.as_mut_slice() {
                *w = normal.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                    context: "consecutive layer widths",
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    actual: l.bias.len(),
                    context: "bias length",
                });
            }
        }
        let model = Self {
            layers,
            activation: Activation::Relu,
        };
        Self::validate_dims(&model.layer_dims())?;
        Ok(model)
    }

    pub fn from_flat(layer_dims: &[usize], params: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        model.set_flat(params)?;
        Ok(model)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
                context: "flattened parameter count",
            });
        }
        let mut src = params.iter();
        for layer in &mut self.layers {
            for (dst, v) in layer.values_mut().zip(&mut src) {
                *dst = *v;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
                context: "feature columns",
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(activations.last().unwrap());
            if idx < last {
                match self.activation {
                    Activation::Relu => z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            activations.push(z);
        }
        Ok(ForwardPass { activations })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.into_logits())
    }

    /// Backpropagates `dL/dlogits` through a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, mut delta: Matrix) -> Gradient {
        let mut grad = Gradient::zeros_like(self);
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let input = &pass.activations[idx];
            let g = &mut grad.layers[idx];
            let (in_dim, out_dim) = (layer.input_dim(), layer.output_dim());
            let n = input.rows();
            let parallel = n * layer.param_count() >= PAR_MIN_FLOPS;

            // dW[o] = sum_i delta[i, o] * input[i]; row order fixed per o.
            let weight_kernel = |(o, w_row): (usize, &mut [f64])| {
                for i in 0..n {
                    let d = delta[(i, o)];
                    if d != 0.0 {
                        for (w, a) in w_row.iter_mut().zip(input.row(i)) {
                            *w += d * a;
                        }
                    }
                }
            };
            if parallel {
                g.weights
                    .as_mut_slice()
                    .par_chunks_mut(in_dim)
                    .enumerate()
                    .for_each(weight_kernel);
            } else {
                g.weights
                    .as_mut_slice()
                    .chunks_mut(in_dim)
                    .enumerate()
                    .for_each(weight_kernel);
            }
            for i in 0..n {
                for (b, d) in g.bias.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }

            if idx == 0 {
                break;
            }
            let mut next = Matrix::zeros(n, in_dim);
            let input_kernel = |(i, row): (usize, &mut [f64])| {
                for o in 0..out_dim {
                    let d = delta[(i, o)];
                    if d != 0.0 {
                        for (r, w) in row.iter_mut().zip(layer.weights.row(o)) {
                            *r += d * w;
                        }
                    }
                }
                // ReLU mask from the post-activation input of this layer.
                for (r, a) in row.iter_mut().zip(input.row(i)) {
                    if *a <= 0.0 {
                        *r = 0.0;
                    }
                }
            };
            if parallel {
                next.as_mut_slice()
                    .par_chunks_mut(in_dim)
                    .enumerate()
                    .for_each(input_kernel);
            } else {
                next.as_mut_slice()
                    .chunks_mut(in_dim)
                    .enumerate()
                    .for_each(input_kernel);
            }
            delta = next;
        }
        grad
    }
}

/// Constant logit offset `ln(P̂ / P0)` applied before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    log_ratio: Vec<f64>,
}

impl Adjustment {
    pub fn identity(k: usize) -> Self {
        Self {
            log_ratio: vec![0.0; k],
        }
    }

    pub fn from_priors(p_hat: &ProbVector, p0: &ProbVector) -> Result<Self> {
        if p_hat.len() != p0.len() {
            return Err(Error::DimensionMismatch {
                expected: p0.len(),
                actual: p_hat.len(),
                context: "prior length",
            });
        }
        Ok(Self {
            log_ratio: p_hat
                .iter()
                .zip(p0.iter())
                .map(|(h, s)| h.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln())
                .collect(),
        })
    }

    pub fn log_ratio(&self) -> &[f64] {
        &self.log_ratio
    }

    pub fn len(&self) -> usize {
        self.log_ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_ratio.is_empty()
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: weights.len(),
            context: "sample weight count",
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "sample weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// Loss value and `dL/dlogits` for `(1/n) Σ w_i H(softmax(z_i + ln r))`.
fn entropy_head(logits: &Matrix, weights: &[f64], adj: &Adjustment) -> Result<(f64, Matrix)> {
    let (n, k) = (logits.rows(), logits.cols());
    check_weights(weights, n)?;
    if adj.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: adj.len(),
            context: "adjustment length",
        });
    }
    let mut delta = Matrix::zeros(n, k);
    if n == 0 {
        return Ok((0.0, delta));
    }
    let inv_n = 1.0 / n as f64;
    let mut shifted = vec![0.0; k];
    let mut log_q = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for ((s, z), r) in shifted.iter_mut().zip(logits.row(i)).zip(&adj.log_ratio) {
            *s = z + r;
        }
        log_softmax_into(&shifted, &mut log_q);
        let h: f64 = -log_q.iter().map(|l| l.exp() * l).sum::<f64>();
        total += w * h;
        let scale = w * inv_n;
        for (d, l) in delta.row_mut(i).iter_mut().zip(&log_q) {
            *d = -scale * l.exp() * (l + h);
        }
    }
    Ok((total * inv_n, delta))
}

/// `(1/n) Σ_i w_i · Entropy(f̂(x_i))` where `f̂` is the prior-adjusted prediction.
pub fn weighted_entropy_loss(
    model: &MlpModel,
    x: &Matrix,
    weights: &[f64],
    adj: &Adjustment,
) -> Result<f64> {
    let logits = model.logits(x)?;
    Ok(entropy_head(&logits, weights, adj)?.0)
}

/// Analytic gradient of [`weighted_entropy_loss`] with respect to every parameter.
pub fn loss_gradient(
    model: &MlpModel,
    x: &Matrix,
    weights: &[f64],
    adj: &Adjustment,
) -> Result<Gradient> {
    Ok(loss_and_gradient(model, x, weights, adj)?.1)
}

pub fn loss_and_gradient(
    model: &MlpModel,
    x: &Matrix,
    weights: &[f64],
    adj: &Adjustment,
) -> Result<(f64, Gradient)> {
    let pass = model.forward(x)?;
    let (loss, delta) = entropy_head(pass.logits(), weights, adj)?;
    if weights.iter().all(|&w| w == 0.0) {
        return Ok((loss, Gradient::zeros_like(model)));
    }
    Ok((loss, model.backward(&pass, delta)))
}

/// Mean cross-entropy and its gradient for labeled rows.
pub fn cross_entropy_and_gradient(
    model: &MlpModel,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradient)> {
    let pass = model.forward(x)?;
    let logits = pass.logits();
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
            context: "label count",
        });
    }
    let mut delta = Matrix::zeros(n, k);
    let mut log_q = vec![0.0; k];
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidInput(format!("label {y} out of range for K={k}")));
        }
        log_softmax_into(logits.row(i), &mut log_q);
        loss -= log_q[y];
        for (j, (d, l)) in delta.row_mut(i).iter_mut().zip(&log_q).enumerate() {
            *d = (l.exp() - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, model.backward(&pass, delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpdateRule {
    /// `θ ← θ − lr · g`
    #[default]
    GradientDescent,
    /// Heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr · v`.
    Momentum { momentum: f64 },
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    learning_rate: f64,
    rule: UpdateRule,
    velocity: Option<Gradient>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, rule: UpdateRule) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if let UpdateRule::Momentum { momentum } = rule {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidInput(format!(
                    "momentum must be in [0, 1), got {momentum}"
                )));
            }
        }
        Ok(Self {
            learning_rate,
            rule,
            velocity: None,
        })
    }

    pub fn gradient_descent(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, UpdateRule::GradientDescent)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }
}

/// Applies one optimizer step. Returns `Ok(false)` and leaves the model
/// untouched when the gradient (or the resulting parameters) is non-finite.
pub fn apply_update(model: &mut MlpModel, grad: &Gradient, opt: &mut OptimizerState) -> Result<bool> {
    if !grad.same_shape(model) {
        return Err(Error::InvalidInput(
            "gradient shape does not match model parameters".into(),
        ));
    }
    if !grad.is_finite() {
        warn!("non-finite gradient; update skipped");
        return Ok(false);
    }
    let step = match opt.rule {
        UpdateRule::GradientDescent => grad.clone(),
        UpdateRule::Momentum { momentum } => {
            let mut v = opt
                .velocity
                .take()
                .unwrap_or_else(|| Gradient::zeros_like(model));
            v.scale(momentum);
            v.add_assign(grad);
            opt.velocity = Some(v.clone());
            v
        }
    };
    let lr = opt.learning_rate;
    let mut updated = model.clone();
    for (layer, g) in updated.layers.iter_mut().zip(&step.layers) {
        layer
            .values_mut()
            .zip(g.values())
            .for_each(|(p, d)| *p -= lr * d);
    }
    if !updated.is_finite() {
        warn!("update produced non-finite parameters; update skipped");
        return Ok(false);
    }
    *model = updated;
    Ok(true)
}
