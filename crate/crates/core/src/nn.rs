//! A small fully connected classifier with exact gradients.
//!
//! The model is a plain MLP: affine layers with ReLU on every hidden layer
//! and raw logits at the output. The loss is a weighted softmax
//! cross-entropy where each sample carries its own coefficient; the loss is
//! a pure weighted sum, so uniform weights `1/n` reproduce the usual mean
//! reduction and nothing divides by the batch size implicitly.
//!
//! Gradients come in three forms:
//! - [`backward`]: the batch gradient of the weighted loss,
//! - [`per_sample_grads`]: one flattened gradient row per sample
//!   (unweighted), used by the meta-gradient,
//! - [`finite_diff_grad`]: a central-difference oracle for checking both.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One affine layer: `weight` is `out x in`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// All trainable parameters of the classifier.
///
/// `layer_sizes` is `[d, h1, ..., C]`; adjacent entries give each layer's
/// input and output width.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub layer_sizes: Vec<usize>,
}

impl MlpParams {
    /// Zero-valued parameters for the given architecture.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must list at least input and output widths, got {layer_sizes:?}"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| DenseLayer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(MlpParams {
            layers,
            layer_sizes: layer_sizes.to_vec(),
        })
    }

    /// Seeded initialization: weights uniform in `[-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)]`, biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = MlpParams::zeros(layer_sizes)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    /// Feature dimension the model expects.
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of output classes.
    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flattens every parameter into one vector, layer by layer, weights
    /// (row-major) before biases. [`GradientSet::flatten`] and
    /// [`PerSampleGrads`] rows use the same order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Mutable access to the `i`-th parameter in flattening order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weight.data().len();
            if i < nw {
                return &mut layer.weight.data_mut()[i];
            }
            i -= nw;
            if i < layer.bias.len() {
                return &mut layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradients, shape-congruent with the [`MlpParams`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<DenseLayer>,
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Same flattening order as [`MlpParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Rebuilds a gradient set from a flat vector, given the target shape.
    pub fn from_flat(params: &MlpParams, flat: &[f64]) -> Result<Self> {
        if flat.len() != params.param_count() {
            return Err(Error::Shape(format!(
                "flat gradient length {} does not match parameter count {}",
                flat.len(),
                params.param_count()
            )));
        }
        let mut grads = GradientSet::zeros_like(params);
        let mut offset = 0;
        for layer in &mut grads.layers {
            let nw = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(grads)
    }

    /// Elementwise scale, used by the weight-linearity tests.
    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for w in layer.weight.data_mut() {
                *w *= factor;
            }
            for b in &mut layer.bias {
                *b *= factor;
            }
        }
    }
}

/// Marks where a sample in a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Stream,
    Buffer,
}

/// A mini-batch of labeled rows.
///
/// `clean_labels`, when present, holds the pre-noise ground truth;
/// `source_mask` tells stream rows from replayed buffer rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub source_mask: Vec<SampleSource>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, source: SampleSource) -> Self {
        let n = inputs.rows();
        assert_eq!(labels.len(), n, "label count does not match rows");
        LabeledBatch {
            inputs,
            labels,
            clean_labels: None,
            source_mask: vec![source; n],
        }
    }

    pub fn empty(cols: usize) -> Self {
        LabeledBatch {
            inputs: Matrix::zeros(0, cols),
            labels: Vec::new(),
            clean_labels: None,
            source_mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &LabeledBatch) -> Result<LabeledBatch> {
        let inputs = self.inputs.vstack(&other.inputs)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let clean_labels = match (&self.clean_labels, &other.clean_labels) {
            (None, None) => None,
            // A side without annotations is taken at face value.
            _ => {
                let mut clean = self
                    .clean_labels
                    .clone()
                    .unwrap_or_else(|| self.labels.clone());
                clean.extend(
                    other
                        .clean_labels
                        .clone()
                        .unwrap_or_else(|| other.labels.clone()),
                );
                Some(clean)
            }
        };
        let mut source_mask = self.source_mask.clone();
        source_mask.extend_from_slice(&other.source_mask);
        Ok(LabeledBatch {
            inputs,
            labels,
            clean_labels,
            source_mask,
        })
    }

    /// Per-row noise flags: true where the carried label differs from the
    /// clean one. All false when no annotations exist.
    pub fn noisy_flags(&self) -> Vec<bool> {
        match &self.clean_labels {
            Some(clean) => self
                .labels
                .iter()
                .zip(clean)
                .map(|(l, c)| l != c)
                .collect(),
            None => vec![false; self.len()],
        }
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `layer_inputs[0]` is the batch itself.
    layer_inputs: Vec<Matrix>,
    /// Pre-activation of each layer; the last one is the logits.
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().unwrap()
    }

    /// Slices out the cache of a single sample, for per-sample backprop.
    fn single_row(&self, r: usize) -> ForwardCache {
        ForwardCache {
            layer_inputs: self.layer_inputs.iter().map(|m| m.single_row(r)).collect(),
            pre_activations: self
                .pre_activations
                .iter()
                .map(|m| m.single_row(r))
                .collect(),
        }
    }
}

/// Forward pass: ReLU on hidden layers, identity at the output.
///
/// Returns the `n x C` logits along with the cache for [`backward`].
pub fn mlp_forward(params: &MlpParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let depth = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activation = inputs.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        layer_inputs.push(activation.clone());
        let z = affine(&activation, &layer.weight, &layer.bias);
        if l + 1 < depth {
            activation = relu(&z);
        }
        pre_activations.push(z);
    }
    let logits = pre_activations.last().unwrap().clone();
    Ok((
        logits,
        ForwardCache {
            layer_inputs,
            pre_activations,
        },
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Weighted softmax cross-entropy: `-sum_k w_k * log p_k[y_k]`.
///
/// The weights are used as given; they are not normalized.
pub fn weighted_ce_loss(logits: &Matrix, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let n = logits.rows();
    let classes = logits.cols();
    if labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} rows with {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let mut loss = 0.0;
    for r in 0..n {
        let y = labels[r];
        if y >= classes {
            return Err(Error::Label {
                label: y,
                class_count: classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += weights[r] * (log_sum - row[y]);
    }
    debug_assert!(loss.is_finite(), "non-finite loss");
    Ok(loss)
}

/// Exact gradient of [`weighted_ce_loss`] with respect to every parameter.
///
/// Uses the fused softmax/cross-entropy form: the logit gradient of sample
/// `k` is `w_k * (p_k - onehot(y_k))`.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    labels: &[usize],
    weights: &[f64],
) -> Result<GradientSet> {
    let logits = cache.logits();
    let n = logits.rows();
    let classes = params.class_count();
    if cache.layer_inputs.len() != params.layers.len()
        || logits.cols() != classes
        || cache
            .layer_inputs
            .iter()
            .zip(&params.layers)
            .any(|(input, layer)| input.cols() != layer.weight.cols())
    {
        return Err(Error::Shape("cache does not match parameters".to_string()));
    }
    if labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "cache holds {n} rows but got {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::Label {
                label: y,
                class_count: classes,
            });
        }
    }

    let mut d_z = softmax_rows(logits);
    for r in 0..n {
        let w = weights[r];
        let y = labels[r];
        let row = d_z.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= w;
        }
    }

    let mut grads = GradientSet::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        let layer_input = &cache.layer_inputs[l];
        // dW = dz^T * input, db = column sums of dz.
        let g = &mut grads.layers[l];
        for r in 0..n {
            let dz_row = d_z.row(r);
            let in_row = layer_input.row(r);
            for (o, &dz) in dz_row.iter().enumerate() {
                g.bias[o] += dz;
                let w_row = g.weight.row_mut(o);
                for (i, &x) in in_row.iter().enumerate() {
                    w_row[i] += dz * x;
                }
            }
        }
        if l > 0 {
            // d_input = dz * W, masked by the ReLU derivative of the
            // previous pre-activation.
            let weight = &params.layers[l].weight;
            let prev_z = &cache.pre_activations[l - 1];
            let mut d_prev = Matrix::zeros(n, weight.cols());
            for r in 0..n {
                let dz_row = d_z.row(r);
                let out = d_prev.row_mut(r);
                for (o, &dz) in dz_row.iter().enumerate() {
                    if dz != 0.0 {
                        let w_row = weight.row(o);
                        for (i, &w) in w_row.iter().enumerate() {
                            out[i] += dz * w;
                        }
                    }
                }
                let z_row = prev_z.row(r);
                for (i, v) in out.iter_mut().enumerate() {
                    if z_row[i] <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            d_z = d_prev;
        }
    }
    Ok(grads)
}

/// Per-sample gradient rows of an `n x P` matrix.
///
/// Row `k` is the flattened gradient of sample `k`'s *unweighted* loss, so
/// `sum_k w_k * row_k` reproduces the batch gradient under weights `w`.
#[derive(Debug, Clone)]
pub struct PerSampleGrads {
    pub grads: Matrix,
}

impl PerSampleGrads {
    /// Weighted recombination of the rows into a flat gradient.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.grads.rows() {
            return Err(Error::Shape(format!(
                "{} weights for {} gradient rows",
                weights.len(),
                self.grads.rows()
            )));
        }
        let mut out = vec![0.0; self.grads.cols()];
        for (r, &w) in weights.iter().enumerate() {
            for (o, &g) in out.iter_mut().zip(self.grads.row(r)) {
                *o += w * g;
            }
        }
        Ok(out)
    }
}

/// Computes each sample's unweighted loss gradient as one flat row.
pub fn per_sample_grads(params: &MlpParams, batch: &LabeledBatch) -> Result<PerSampleGrads> {
    let (_, cache) = mlp_forward(params, &batch.inputs)?;
    per_sample_grads_cached(params, &cache, &batch.labels)
}

/// Same as [`per_sample_grads`] but reuses an existing forward cache.
pub fn per_sample_grads_cached(
    params: &MlpParams,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<PerSampleGrads> {
    let n = labels.len();
    let p = params.param_count();
    let mut grads = Matrix::zeros(n, p);
    for r in 0..n {
        let row_cache = cache.single_row(r);
        let g = backward(params, &row_cache, &labels[r..r + 1], &[1.0])?;
        grads.row_mut(r).copy_from_slice(&g.flatten());
    }
    Ok(PerSampleGrads { grads })
}

/// One SGD step: `theta - lr * g`, no momentum.
pub fn sgd_step(params: &MlpParams, grads: &GradientSet, lr: f64) -> MlpParams {
    assert!(lr > 0.0, "learning rate must be positive");
    let mut next = params.clone();
    for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
        for (w, &dw) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= lr * dw;
        }
        for (b, &db) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * db;
        }
    }
    next
}

/// Central-difference gradient oracle: `(L(p + h e_i) - L(p - h e_i)) / 2h`
/// for every parameter.
pub fn finite_diff_grad<F>(loss_fn: F, params: &MlpParams, h: f64) -> GradientSet
where
    F: Fn(&MlpParams) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let count = params.param_count();
    let mut flat = vec![0.0; count];
    for (i, slot) in flat.iter_mut().enumerate() {
        let mut plus = params.clone();
        *plus.param_mut(i) += h;
        let mut minus = params.clone();
        *minus.param_mut(i) -= h;
        *slot = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
    }
    GradientSet::from_flat(params, &flat).expect("shape preserved")
}

fn affine(inputs: &Matrix, weight: &Matrix, bias: &[f64]) -> Matrix {
    let n = inputs.rows();
    let out_dim = weight.rows();
    let mut z = Matrix::zeros(n, out_dim);
    for r in 0..n {
        let in_row = inputs.row(r);
        let z_row = z.row_mut(r);
        for o in 0..out_dim {
            let w_row = weight.row(o);
            let mut sum = bias[o];
            for (x, w) in in_row.iter().zip(w_row) {
                sum += x * w;
            }
            z_row[o] = sum;
        }
    }
    z
}

fn relu(z: &Matrix) -> Matrix {
    let mut a = z.clone();
    for v in a.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    a
}

/// Relative error with an absolute fallback for near-zero references.
pub fn grad_rel_error(actual: f64, reference: f64) -> f64 {
    if reference.abs() < 1e-8 {
        (actual - reference).abs()
    } else {
        (actual - reference).abs() / actual.abs().max(reference.abs())
    }
}
