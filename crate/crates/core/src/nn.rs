//! Dense-layer networks with hand-written reverse-mode gradients.
//!
//! Everything is `f64`. Gradients are computed one example at a time, which
//! is exactly the granularity DP-SGD needs for per-sample clipping. Batch
//! entry points fan examples out over rayon and collect results in index
//! order, so parallel and sequential evaluation agree bit for bit.
//!
//! Parameters are flattened layer by layer: the row-major weight matrix
//! (`out × in`) followed by the bias vector.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape {shape:?} does not match {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },

    #[error("tensor contains a non-finite value at index {index}")]
    NonFiniteValue { index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid layer dimensions {0:?}")]
    InvalidDims(Vec<usize>),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss for example {example}")]
    NonFiniteLoss { example: usize },

    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major dense array of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != values.len() {
            return Err(NnError::ShapeMismatch {
                shape,
                len: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteValue { index });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; len],
        }
    }

    /// Builds an `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub dense: Dense,
    pub activation: Activation,
}

/// Labelled inputs, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(NnError::DimensionMismatch {
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-example parameter gradients, `n × P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    pub grads: Tensor,
    pub per_example_loss: Vec<f64>,
}

impl PerSampleGrads {
    pub fn row(&self, i: usize) -> &[f64] {
        self.grads.row(i)
    }

    pub fn len(&self) -> usize {
        self.per_example_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example_loss.is_empty()
    }

    /// Sum of all rows, accumulated in row order.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.grads.cols()];
        for i in 0..self.len() {
            for (a, g) in acc.iter_mut().zip(self.row(i)) {
                *a += g;
            }
        }
        acc
    }
}

/// A stack of dense layers; the last layer emits class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidDims(vec![]));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.dense.bias.len() != layer.dense.output_dim() {
                return Err(NnError::DimensionMismatch {
                    expected: layer.dense.output_dim(),
                    actual: layer.dense.bias.len(),
                });
            }
            if l > 0 {
                let prev = layers[l - 1].dense.output_dim();
                if layer.dense.input_dim() != prev {
                    return Err(NnError::DimensionMismatch {
                        expected: prev,
                        actual: layer.dense.input_dim(),
                    });
                }
            }
        }
        Ok(Self { layers })
    }

    /// Builds a zero-parameter model with ReLU hidden layers and an identity
    /// output layer. `dims` lists every width from input to logits.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidDims(dims.to_vec()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                dense: Dense {
                    weights: Tensor::zeros(vec![w[1], w[0]]),
                    bias: Tensor::zeros(vec![w[1]]),
                },
                activation: if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Widths from input to logits.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.dense.output_dim()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dense.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].dense.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.dense.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.dense.weights.values());
            out.extend_from_slice(layer.dense.bias.values());
        }
        out
    }

    pub fn load_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NnError::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.dense.weights.values_mut();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.dense.bias.values_mut();
            b.copy_from_slice(&params[offset..offset + b.len()]);
            offset += b.len();
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let input = activations.last().expect("input pushed above");
            let z = affine(&layer.dense, input);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        Trace {
            activations,
            pre_activations,
        }
    }

    /// Logits for a single example.
    pub fn logits_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            let mut z = affine(&layer.dense, &a);
            for v in &mut z {
                *v = layer.activation.apply(*v);
            }
            a = z;
        }
        Ok(a)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.class_count() {
            return Err(NnError::LabelOutOfRange {
                label: y,
                classes: self.class_count(),
            });
        }
        Ok(())
    }

    /// Backprop of a single example. Writes the flattened parameter gradient
    /// into `param_grad` (if given) and returns `(loss, input_gradient)`.
    fn backprop_one(
        &self,
        x: &[f64],
        y: usize,
        mut param_grad: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        self.check_input(x.len())?;
        self.check_label(y)?;
        let trace = self.trace(x);
        let logits = trace.activations.last().expect("at least one layer");
        let (loss, mut delta) = softmax_ce_one(logits, y);

        let offsets = self.param_offsets();
        let mut input_grad = None;
        for l in (0..self.layers.len()).rev() {
            let dense = &self.layers[l].dense;
            let (n_out, n_in) = (dense.output_dim(), dense.input_dim());
            let input = &trace.activations[l];
            if let Some(grad) = param_grad.as_deref_mut() {
                let off = offsets[l];
                let gw = &mut grad[off..off + n_out * n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g = d * a;
                    }
                }
                grad[off + n_out * n_in..off + n_out * n_in + n_out].copy_from_slice(&delta);
                let written = &grad[off..off + n_out * n_in + n_out];
                if written.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient { layer: l });
                }
            }
            if l == 0 && !want_input_grad {
                break;
            }
            // delta for the layer input
            let w = dense.weights.values();
            let mut back = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (b, &wv) in back.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *b += wv * d;
                }
            }
            if l == 0 {
                if back.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient { layer: 0 });
                }
                input_grad = Some(back);
            } else {
                let act = self.layers[l - 1].activation;
                for (b, &z) in back.iter_mut().zip(&trace.pre_activations[l - 1]) {
                    *b *= act.derivative(z);
                }
                delta = back;
            }
        }
        Ok((loss, input_grad))
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.dense.param_count();
        }
        offsets
    }

    /// Parameter gradient of one example's loss, written into `out`.
    /// Returns the example's loss.
    pub fn example_gradient(&self, x: &[f64], y: usize, out: &mut [f64]) -> Result<f64> {
        if out.len() != self.param_count() {
            return Err(NnError::DimensionMismatch {
                expected: self.param_count(),
                actual: out.len(),
            });
        }
        let (loss, _) = self.backprop_one(x, y, Some(out), false)?;
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss { example: 0 });
        }
        Ok(loss)
    }

    /// Gradient of one example's loss with respect to its input.
    pub fn example_input_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let (_, g) = self.backprop_one(x, y, None, true)?;
        Ok(g.expect("input gradient requested"))
    }
}

fn affine(dense: &Dense, input: &[f64]) -> Vec<f64> {
    let n_in = dense.input_dim();
    let w = dense.weights.values();
    dense
        .bias
        .values()
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(input).fold(b, |acc, (wv, xv)| acc + wv * xv)
        })
        .collect()
}

/// Stable log-sum-exp of a logit row.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Cross-entropy of one logit row and its gradient `softmax(z) − onehot(y)`.
fn softmax_ce_one(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let loss = (m - z[y]) + s.ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / s).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

/// Softmax cross-entropy of a single logit row.
pub fn cross_entropy_row(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    (m - z[y]) + s.ln()
}

/// Logits for every row of `inputs`, `n × K`.
pub fn forward(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    if inputs.shape().len() < 2 {
        return Err(NnError::DimensionMismatch {
            expected: 2,
            actual: inputs.shape().len(),
        });
    }
    model.check_input(inputs.cols())?;
    let rows: Vec<Vec<f64>> = (0..inputs.rows())
        .into_par_iter()
        .map(|i| model.logits_one(inputs.row(i)))
        .collect::<Result<_>>()?;
    let k = model.class_count();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::matrix(inputs.rows(), k, values)
}

/// Softmax cross-entropy per row and its arithmetic mean.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    if logits.rows() != labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: logits.rows(),
            actual: labels.len(),
        });
    }
    let k = logits.cols();
    let mut per_example = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(NnError::LabelOutOfRange { label: y, classes: k });
        }
        let l = cross_entropy_row(logits.row(i), y);
        if !l.is_finite() {
            return Err(NnError::NonFiniteLoss { example: i });
        }
        per_example.push(l);
    }
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok((per_example, mean))
}

/// Row `i` is the parameter gradient of example `i`'s loss alone.
pub fn grads_per_sample(model: &Model, batch: &Batch) -> Result<PerSampleGrads> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let p = model.param_count();
    let n = batch.len();
    let mut grads = vec![0.0; n * p];
    let losses: Vec<f64> = grads
        .par_chunks_mut(p)
        .enumerate()
        .map(|(i, row)| {
            model
                .example_gradient(batch.inputs.row(i), batch.labels[i], row)
                .map_err(|e| match e {
                    NnError::NonFiniteLoss { .. } => NnError::NonFiniteLoss { example: i },
                    other => other,
                })
        })
        .collect::<Result<_>>()?;
    Ok(PerSampleGrads {
        grads: Tensor {
            shape: vec![n, p],
            values: grads,
        },
        per_example_loss: losses,
    })
}

/// Gradient of the batch-mean loss with respect to the inputs.
pub fn grad_wrt_input(model: &Model, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    if x.rows() != y.len() {
        return Err(NnError::DimensionMismatch {
            expected: x.rows(),
            actual: y.len(),
        });
    }
    let n = y.len() as f64;
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| model.example_input_gradient(x.row(i), y[i]))
        .collect::<Result<_>>()?;
    let values = rows.into_iter().flatten().map(|g| g / n).collect();
    Tensor::new(x.shape().to_vec(), values)
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, dims: &[usize]) -> Result<Model> {
    let mut model = Model::zeros(dims)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for layer in model.layers_mut() {
        let (fan_out, fan_in) = (layer.dense.output_dim(), layer.dense.input_dim());
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite positive limit");
        for w in layer.dense.weights.values_mut() {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(model)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}
