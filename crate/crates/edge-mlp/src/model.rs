//! Dense network: per hidden layer an affine map, batch normalization, ReLU,
//! and inverted dropout; a plain affine output layer whose softmax is fused
//! into the loss. The backward pass is written by hand, including the full
//! batch-norm gradient through the batch mean and variance.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Stream tag so weight init never shares a stream with shuffles/dropout.
pub(crate) const INIT_STREAM: u64 = 3;

/// Architecture and regularization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rates: Vec<f32>,
    pub output_dim: usize,
    pub bn_epsilon: f32,
    pub bn_momentum: f32,
}

impl MlpConfig {
    /// The reference architecture: 1568 -> 1024 -> 512 -> 256 -> classes,
    /// dropout 0.5/0.4/0.3, BN eps 1e-3 and momentum 0.99.
    pub fn for_classes(output_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim: crate::edge::FEATURE_DIM,
            hidden_dims: vec![1024, 512, 256],
            dropout_rates: vec![0.5, 0.4, 0.3],
            output_dim,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidParameter("zero layer dimension".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParameter("zero hidden dimension".into()));
        }
        if self.hidden_dims.len() != self.dropout_rates.len() {
            return Err(Error::InvalidParameter(format!(
                "{} hidden layers but {} dropout rates",
                self.hidden_dims.len(),
                self.dropout_rates.len()
            )));
        }
        if self.dropout_rates.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::InvalidParameter("dropout rate outside [0,1)".into()));
        }
        if !self.bn_epsilon.is_finite()
            || self.bn_epsilon <= 0.0
            || !(0.0..1.0).contains(&self.bn_momentum)
        {
            return Err(Error::InvalidParameter(
                "bad batch-norm hyperparameters".into(),
            ));
        }
        Ok(())
    }

    /// Trainable parameter total: each dense layer contributes
    /// `in*out + out`, each hidden layer's BN adds `2*out`.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut fan_in = self.input_dim;
        for &dim in &self.hidden_dims {
            count += fan_in * dim + dim; // dense
            count += 2 * dim; // gamma, beta
            fan_in = dim;
        }
        count += fan_in * self.output_dim + self.output_dim;
        count
    }
}

/// Hidden layer: dense weights/bias plus BN parameters and running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weights: Matrix, // in x out
    pub bias: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub moving_mean: Vec<f32>,
    pub moving_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub weights: Matrix, // in x out
    pub bias: Vec<f32>,
}

/// Provenance recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub dataset: String,
    pub seed: u64,
    pub epochs_trained: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: MlpConfig,
    pub hidden: Vec<HiddenLayer>,
    pub output: OutputLayer,
    pub meta: ModelMeta,
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

/// Glorot-uniform weights, zero biases and beta, unit gamma, moving stats
/// initialized to (0, 1).
pub fn init_model(config: MlpConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = Rng::new(seed).derive(INIT_STREAM);
    let mut hidden = Vec::with_capacity(config.hidden_dims.len());
    let mut fan_in = config.input_dim;
    for &dim in &config.hidden_dims {
        let limit = glorot_limit(fan_in, dim);
        let weights = Matrix::from_vec(fan_in, dim, rng.uniform_vec(-limit, limit, fan_in * dim)?)?;
        hidden.push(HiddenLayer {
            weights,
            bias: vec![0.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            moving_mean: vec![0.0; dim],
            moving_var: vec![1.0; dim],
        });
        fan_in = dim;
    }
    let limit = glorot_limit(fan_in, config.output_dim);
    let output = OutputLayer {
        weights: Matrix::from_vec(
            fan_in,
            config.output_dim,
            rng.uniform_vec(-limit, limit, fan_in * config.output_dim)?,
        )?,
        bias: vec![0.0; config.output_dim],
    };
    Ok(Model {
        config,
        hidden,
        output,
        meta: ModelMeta::default(),
    })
}

/// Per-batch values the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch_rows: usize,
    /// Input to each dense layer: `[batch, h1_out, ..]`, length hidden+1.
    inputs: Vec<Matrix>,
    /// Per hidden layer: normalized activations before gamma/beta.
    pub(crate) xhat: Vec<Matrix>,
    /// Per hidden layer: 1/sqrt(batch_var + eps).
    inv_std: Vec<Vec<f32>>,
    /// Per hidden layer: post-ReLU, pre-dropout activations.
    relu_out: Vec<Matrix>,
    /// Per hidden layer: dropout scale per element (None when rate is 0).
    masks: Vec<Option<Vec<f32>>>,
}

/// Gradients for one dense(+BN) layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f32>,
    pub gamma: Option<Vec<f32>>,
    pub beta: Option<Vec<f32>>,
}

/// Gradients for every trainable tensor, hidden layers first, output last.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Model {
    pub fn class_count(&self) -> usize {
        self.config.output_dim
    }

    /// Trainable tensors in canonical order (per hidden layer: weights,
    /// bias, gamma, beta; then output weights, bias). The optimizer and the
    /// model file both follow this order.
    pub fn param_slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for layer in &self.hidden {
            out.push(layer.weights.as_slice());
            out.push(layer.bias.as_slice());
            out.push(layer.gamma.as_slice());
            out.push(layer.beta.as_slice());
        }
        out.push(self.output.weights.as_slice());
        out.push(self.output.bias.as_slice());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for layer in &mut self.hidden {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
            out.push(layer.gamma.as_mut_slice());
            out.push(layer.beta.as_mut_slice());
        }
        out.push(self.output.weights.as_mut_slice());
        out.push(self.output.bias.as_mut_slice());
        out
    }

    /// Independent parameter total, by enumerating every tensor.
    pub fn enumerate_param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} but model input_dim {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Training-mode forward: batch statistics for BN (updating the moving
    /// stats), inverted dropout, and a cache for [`Model::backward`].
    pub fn forward_train(
        &mut self,
        batch: &Matrix,
        rng: &mut Rng,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let b = batch.rows();
        if b < 2 {
            return Err(Error::BatchTooSmall { rows: b });
        }
        let momentum = self.config.bn_momentum;
        let eps = self.config.bn_epsilon;

        let mut cache = ForwardCache {
            batch_rows: b,
            inputs: Vec::with_capacity(self.hidden.len() + 1),
            xhat: Vec::with_capacity(self.hidden.len()),
            inv_std: Vec::with_capacity(self.hidden.len()),
            relu_out: Vec::with_capacity(self.hidden.len()),
            masks: Vec::with_capacity(self.hidden.len()),
        };

        let mut x = batch.clone();
        for (layer, &rate) in self.hidden.iter_mut().zip(&self.config.dropout_rates) {
            let dim = layer.bias.len();
            let mut z = x.matmul(&layer.weights)?;
            cache.inputs.push(x);
            z.row_add(&layer.bias)?;

            let mean = z.col_mean();
            let var = z.col_var_biased();
            let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            for (m, &batch_m) in layer.moving_mean.iter_mut().zip(&mean) {
                *m = momentum * *m + (1.0 - momentum) * batch_m;
            }
            for (v, &batch_v) in layer.moving_var.iter_mut().zip(&var) {
                *v = momentum * *v + (1.0 - momentum) * batch_v;
            }

            // xhat = (z - mean) * inv_std, then h = relu(gamma*xhat + beta)
            let mut xhat = z;
            for row in xhat.as_mut_slice().chunks_exact_mut(dim) {
                for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                    *v = (*v - m) * s;
                }
            }
            let mut h = Matrix::zeros(b, dim);
            for (h_row, x_row) in h
                .as_mut_slice()
                .chunks_exact_mut(dim)
                .zip(xhat.as_slice().chunks_exact(dim))
            {
                for (((o, &xh), &g), &bt) in h_row
                    .iter_mut()
                    .zip(x_row)
                    .zip(&layer.gamma)
                    .zip(&layer.beta)
                {
                    *o = (g * xh + bt).max(0.0);
                }
            }

            let (dropped, mask) = if rate > 0.0 {
                let keep = 1.0 - rate as f64;
                let scale = (1.0 / keep) as f32;
                let mut mask = vec![0.0f32; b * dim];
                for m in &mut mask {
                    if rng.next_f64() < keep {
                        *m = scale;
                    }
                }
                let mut d = h.clone();
                for (o, &m) in d.as_mut_slice().iter_mut().zip(&mask) {
                    *o *= m;
                }
                (d, Some(mask))
            } else {
                (h.clone(), None)
            };

            cache.xhat.push(xhat);
            cache.inv_std.push(inv_std);
            cache.relu_out.push(h);
            cache.masks.push(mask);
            x = dropped;
        }

        let mut logits = x.matmul(&self.output.weights)?;
        cache.inputs.push(x);
        logits.row_add(&self.output.bias)?;
        Ok((logits, cache))
    }

    /// Inference-mode forward: moving statistics for BN, no dropout.
    /// Deterministic and side-effect free.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let eps = self.config.bn_epsilon;
        let mut x = batch.clone();
        for layer in &self.hidden {
            let dim = layer.bias.len();
            let mut z = x.matmul(&layer.weights)?;
            z.row_add(&layer.bias)?;
            // fused BN affine + relu with the moving statistics
            let scale: Vec<f32> = layer
                .gamma
                .iter()
                .zip(&layer.moving_var)
                .map(|(&g, &v)| g / (v + eps).sqrt())
                .collect();
            let shift: Vec<f32> = layer
                .beta
                .iter()
                .zip(&layer.moving_mean)
                .zip(&scale)
                .map(|((&bt, &m), &s)| bt - m * s)
                .collect();
            for row in z.as_mut_slice().chunks_exact_mut(dim) {
                for ((v, &s), &t) in row.iter_mut().zip(&scale).zip(&shift) {
                    *v = (*v * s + t).max(0.0);
                }
            }
            x = z;
        }
        let mut logits = x.matmul(&self.output.weights)?;
        logits.row_add(&self.output.bias)?;
        Ok(logits)
    }

    fn check_cache(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<()> {
        let h = self.hidden.len();
        let consistent = cache.inputs.len() == h + 1
            && cache.xhat.len() == h
            && cache.inv_std.len() == h
            && cache.relu_out.len() == h
            && cache.masks.len() == h
            && dlogits.rows() == cache.batch_rows
            && dlogits.cols() == self.config.output_dim
            && cache.inputs[0].cols() == self.config.input_dim
            && self
                .hidden
                .iter()
                .zip(&cache.xhat)
                .all(|(l, x)| x.cols() == l.bias.len() && x.rows() == cache.batch_rows);
        if consistent {
            Ok(())
        } else {
            Err(Error::StaleCache)
        }
    }

    /// Backward pass over a cached training-mode forward. Returns gradients
    /// for every trainable tensor; the input gradient of the first layer is
    /// not materialized (training never uses it).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        self.check_cache(cache, dlogits)?;
        let b = cache.batch_rows as f32;
        let h_count = self.hidden.len();
        let mut layers: Vec<Option<LayerGrads>> = vec![None; h_count + 1];

        // output layer
        let x_last = &cache.inputs[h_count];
        layers[h_count] = Some(LayerGrads {
            weights: x_last.matmul_at(dlogits)?,
            bias: dlogits.col_sum(),
            gamma: None,
            beta: None,
        });
        let mut d = dlogits.matmul_bt(&self.output.weights)?;

        for l in (0..h_count).rev() {
            let layer = &self.hidden[l];
            let dim = layer.bias.len();

            if let Some(mask) = &cache.masks[l] {
                for (v, &m) in d.as_mut_slice().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            for (v, &h) in d
                .as_mut_slice()
                .iter_mut()
                .zip(cache.relu_out[l].as_slice())
            {
                if h == 0.0 {
                    *v = 0.0;
                }
            }

            // batch-norm backward through the batch statistics
            let xhat = &cache.xhat[l];
            let inv_std = &cache.inv_std[l];
            let mut dgamma = vec![0.0f32; dim];
            let mut dbeta = vec![0.0f32; dim];
            for (d_row, x_row) in d
                .as_slice()
                .chunks_exact(dim)
                .zip(xhat.as_slice().chunks_exact(dim))
            {
                for (((dg, db), &dv), &xh) in dgamma
                    .iter_mut()
                    .zip(dbeta.iter_mut())
                    .zip(d_row)
                    .zip(x_row)
                {
                    *dg += dv * xh;
                    *db += dv;
                }
            }
            // dxhat = d * gamma (in place)
            for row in d.as_mut_slice().chunks_exact_mut(dim) {
                for (v, &g) in row.iter_mut().zip(&layer.gamma) {
                    *v *= g;
                }
            }
            let mut sum_dxhat = vec![0.0f32; dim];
            let mut sum_dxhat_xhat = vec![0.0f32; dim];
            for (d_row, x_row) in d
                .as_slice()
                .chunks_exact(dim)
                .zip(xhat.as_slice().chunks_exact(dim))
            {
                for (((s1, s2), &dv), &xh) in sum_dxhat
                    .iter_mut()
                    .zip(sum_dxhat_xhat.iter_mut())
                    .zip(d_row)
                    .zip(x_row)
                {
                    *s1 += dv;
                    *s2 += dv * xh;
                }
            }
            // dz = inv_std/B * (B*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            for (d_row, x_row) in d
                .as_mut_slice()
                .chunks_exact_mut(dim)
                .zip(xhat.as_slice().chunks_exact(dim))
            {
                for ((((dv, &xh), &s1), &s2), &istd) in d_row
                    .iter_mut()
                    .zip(x_row)
                    .zip(&sum_dxhat)
                    .zip(&sum_dxhat_xhat)
                    .zip(inv_std)
                {
                    *dv = istd / b * (b * *dv - s1 - xh * s2);
                }
            }

            layers[l] = Some(LayerGrads {
                weights: cache.inputs[l].matmul_at(&d)?,
                bias: d.col_sum(),
                gamma: Some(dgamma),
                beta: Some(dbeta),
            });
            if l > 0 {
                d = d.matmul_bt(&layer.weights)?;
            }
        }

        Ok(Gradients {
            layers: layers.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Gradient of one logit with respect to the 1568 inputs, taken in
    /// eval mode (moving-stat BN, no dropout). Used for saliency maps.
    pub fn logit_input_gradient(&self, input: &Matrix, class: usize) -> Result<Vec<f32>> {
        self.check_input(input)?;
        if input.rows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a single row, got {}",
                input.rows()
            )));
        }
        if class >= self.config.output_dim {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: class as i64,
                class_count: self.config.output_dim,
            });
        }
        let eps = self.config.bn_epsilon;

        // forward, caching relu masks and the BN scale per layer
        let mut x = input.clone();
        let mut relu_masks: Vec<Vec<f32>> = Vec::with_capacity(self.hidden.len());
        let mut bn_scales: Vec<Vec<f32>> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let dim = layer.bias.len();
            let mut z = x.matmul(&layer.weights)?;
            z.row_add(&layer.bias)?;
            let scale: Vec<f32> = layer
                .gamma
                .iter()
                .zip(&layer.moving_var)
                .map(|(&g, &v)| g / (v + eps).sqrt())
                .collect();
            let shift: Vec<f32> = layer
                .beta
                .iter()
                .zip(&layer.moving_mean)
                .zip(&scale)
                .map(|((&bt, &m), &s)| bt - m * s)
                .collect();
            let row = z.row_mut(0);
            let mut mask = vec![0.0f32; dim];
            for (j, v) in row.iter_mut().enumerate() {
                let a = *v * scale[j] + shift[j];
                if a > 0.0 {
                    *v = a;
                    mask[j] = 1.0;
                } else {
                    *v = 0.0;
                }
            }
            relu_masks.push(mask);
            bn_scales.push(scale);
            x = z;
        }

        // backward from the selected logit
        let mut d = Matrix::zeros(1, self.config.output_dim);
        d.set(0, class, 1.0);
        let mut d = d.matmul_bt(&self.output.weights)?;
        for l in (0..self.hidden.len()).rev() {
            let row = d.row_mut(0);
            for ((v, &m), &s) in row.iter_mut().zip(&relu_masks[l]).zip(&bn_scales[l]) {
                *v *= m * s;
            }
            d = d.matmul_bt(&self.hidden[l].weights)?;
        }
        Ok(d.row(0).to_vec())
    }
}

/// Row-wise softmax with the max-shift trick.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.as_mut_slice().chunks_exact_mut(cols) {
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its logit gradient
/// `(softmax - onehot) / B`.
pub fn loss_softmax_xent(logits: &Matrix, labels: &[u8]) -> Result<(f32, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows but {} labels",
            b,
            labels.len()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            index,
            label: label as i64,
            class_count: c,
        });
    }
    let mut dlogits = logits.clone();
    let inv_b = 1.0 / b as f32;
    let mut loss_acc = 0.0f64;
    for (i, row) in dlogits.as_mut_slice().chunks_exact_mut(c).enumerate() {
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let label = labels[i] as usize;
        let p_label = row[label] / sum;
        loss_acc += -(p_label.max(f32::MIN_POSITIVE) as f64).ln();
        for v in row.iter_mut() {
            *v = *v / sum * inv_b;
        }
        row[label] -= inv_b;
    }
    Ok(((loss_acc / b as f64) as f32, dlogits))
}
