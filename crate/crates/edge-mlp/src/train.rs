//! Training loop, metrics, confusion matrices, and saliency maps.

use std::time::Instant;

use crate::dataset::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::edge::{FeatureSet, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::model::{loss_softmax_xent, softmax, Model};
use crate::optim::{AdamState, EarlyStopState, PlateauState, StopDecision};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Rows per eval-mode forward pass (results are batch-size invariant; this
/// only bounds memory).
const EVAL_BATCH: usize = 512;

/// Stream tag for the training loop's shuffles and dropout masks.
const TRAIN_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: u32,
    pub learning_rate: f32,
    pub seed: u64,
    pub dataset: String,
}

impl TrainConfig {
    pub fn new(seed: u64, dataset: impl Into<String>) -> TrainConfig {
        TrainConfig {
            batch_size: 128,
            max_epochs: 50,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            seed,
            dataset: dataset.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(
                "batch_size must be at least 2 (batch statistics)".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "max_epochs must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate in effect after this epoch's plateau update.
    pub lr: f32,
    pub seconds: f64,
}

impl EpochRecord {
    /// One-line JSON object, the metrics-log wire format.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"train_loss\":{},\"train_accuracy\":{},\"val_loss\":{},\"val_accuracy\":{},\"lr\":{},\"seconds\":{}}}",
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
            self.lr,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_accuracy)
    }
}

/// Mini-batch index ranges over `n` samples. The final short batch is kept;
/// a trailing batch of a single row (which batch statistics cannot handle)
/// is merged into the previous one.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n / batch_size + 1);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() >= 2 && out.last().map(|&(s, e)| e - s) == Some(1) {
        out.pop();
        out.last_mut().unwrap().1 = n;
    }
    out
}

fn check_features(model: &Model, set: &FeatureSet, what: &str) -> Result<()> {
    if set.features.cols() != model.config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "{what} features are {}-dim, model expects {}",
            set.features.cols(),
            model.config.input_dim
        )));
    }
    if set.features.rows() != set.labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} feature rows vs {} labels",
            set.features.rows(),
            set.labels.len()
        )));
    }
    if set.class_count != model.class_count() {
        return Err(Error::ClassCountMismatch {
            model: model.class_count(),
            data: set.class_count,
        });
    }
    Ok(())
}

/// Mean loss and accuracy of a frozen model over a feature set (eval mode).
pub fn eval_metrics(model: &Model, set: &FeatureSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    check_features(model, set, "eval")?;
    let n = set.len();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for (start, end) in batch_ranges(n, EVAL_BATCH) {
        let indices: Vec<usize> = (start..end).collect();
        let batch = set.features.gather_rows(&indices);
        let labels = &set.labels[start..end];
        let logits = model.forward_eval(&batch)?;
        let (loss, _) = loss_softmax_xent(&logits, labels)?;
        loss_sum += loss as f64 * (end - start) as f64;
        for (pred, &label) in logits.row_argmax().iter().zip(labels) {
            if *pred == label as usize {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Run the full optimization recipe on a fit/validation split.
///
/// Per epoch: seeded reshuffle, sequential mini-batches (train-mode forward,
/// fused softmax loss, backward, Adam), one full validation pass in eval
/// mode, then the plateau and early-stop callbacks in that order. Returns
/// the model restored to its best-validation-accuracy weights, plus the
/// per-epoch history. `on_epoch` fires as each record completes, so an
/// interrupted run still leaves a partial log behind.
pub fn train(
    mut model: Model,
    fit: &FeatureSet,
    val: &FeatureSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    check_features(&model, fit, "fit")?;
    check_features(&model, val, "validation")?;
    if fit.is_empty() {
        return Err(Error::EmptyDataset("fit set".into()));
    }

    model.meta.dataset = config.dataset.clone();
    model.meta.seed = config.seed;

    let n = fit.len();
    let mut rng = Rng::new(config.seed).derive(TRAIN_STREAM);
    let mut adam = AdamState::new(&model, config.learning_rate);
    let mut early = EarlyStopState::new();
    let mut plateau = PlateauState::new();
    let mut history = TrainHistory::default();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut indices);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_no, &(start, end)) in batch_ranges(n, config.batch_size).iter().enumerate() {
            let picked = &indices[start..end];
            let batch = fit.features.gather_rows(picked);
            let labels: Vec<u8> = picked.iter().map(|&i| fit.labels[i]).collect();

            let (logits, cache) = model.forward_train(&batch, &mut rng)?;
            let (loss, dlogits) = loss_softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += loss as f64 * picked.len() as f64;
            for (pred, &label) in logits.row_argmax().iter().zip(&labels) {
                if *pred == label as usize {
                    correct += 1;
                }
            }

            let grads = model.backward(&cache, &dlogits)?;
            adam.apply(&mut model, &grads)?;
        }

        let (val_loss, val_accuracy) = eval_metrics(&model, val)?;
        adam.lr = plateau.update(epoch, val_loss, adam.lr)?;
        model.meta.epochs_trained = epoch;
        let decision = early.update(epoch, val_accuracy, &model)?;

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss,
            val_accuracy,
            lr: adam.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.records.push(record);

        if decision == StopDecision::Stop {
            break;
        }
    }

    if let Some(best) = early.best_weights.take() {
        model = best;
    }
    Ok((model, history))
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.class_count + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_count + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.class_count).map(|i| self.count(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.class_count)
            .map(|t| (0..self.class_count).map(|p| self.count(t, p)).sum())
            .collect()
    }

    /// Off-diagonal cells with nonzero counts, sorted by descending count
    /// then ascending (true, predicted).
    pub fn top_confusions(&self, k: usize) -> Vec<(usize, usize, u64)> {
        let mut cells = Vec::new();
        for t in 0..self.class_count {
            for p in 0..self.class_count {
                if t != p {
                    let c = self.count(t, p);
                    if c > 0 {
                        cells.push((t, p, c));
                    }
                }
            }
        }
        cells.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cells.truncate(k);
        cells
    }

    /// CSV with a header row and column of class labels.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.class_count {
            return Err(Error::ShapeMismatch(format!(
                "{} class names for {} classes",
                class_names.len(),
                self.class_count
            )));
        }
        let mut out = String::from("true_class");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for p in 0..self.class_count {
                out.push(',');
                out.push_str(&self.count(t, p).to_string());
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Digits for 10 classes, uppercase letters for 26, indices otherwise.
pub fn default_class_names(class_count: usize) -> Vec<String> {
    match class_count {
        10 => (0..10).map(|d| d.to_string()).collect(),
        26 => (b'A'..=b'Z').map(|c| (c as char).to_string()).collect(),
        n => (0..n).map(|d| d.to_string()).collect(),
    }
}

/// Top-1 accuracy and the full confusion matrix of a frozen model.
pub fn evaluate(model: &Model, set: &FeatureSet) -> Result<(f64, ConfusionMatrix)> {
    if set.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    check_features(model, set, "evaluate")?;
    let n = set.len();
    let mut cm = ConfusionMatrix::new(model.class_count());
    for (start, end) in batch_ranges(n, EVAL_BATCH) {
        let indices: Vec<usize> = (start..end).collect();
        let batch = set.features.gather_rows(&indices);
        let logits = model.forward_eval(&batch)?;
        for (pred, &label) in logits.row_argmax().iter().zip(&set.labels[start..end]) {
            cm.record(label as usize, *pred);
        }
    }
    let accuracy = cm.trace() as f64 / n as f64;
    Ok((accuracy, cm))
}

/// Predicted class and the full softmax probability vector for one feature
/// vector.
pub fn predict(model: &Model, features: &[f32]) -> Result<(usize, Vec<f32>)> {
    let input = Matrix::from_vec(1, features.len(), features.to_vec())?;
    let logits = model.forward_eval(&input)?;
    let probs = softmax(&logits);
    Ok((logits.row_argmax()[0], probs.row(0).to_vec()))
}

/// Signed per-pixel attribution for the two derivative channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMaps {
    pub gx: Vec<f32>, // IMAGE_PIXELS, row-major
    pub gy: Vec<f32>,
}

fn split_channels(values: &[f32]) -> SaliencyMaps {
    SaliencyMaps {
        gx: values[..IMAGE_PIXELS].to_vec(),
        gy: values[IMAGE_PIXELS..].to_vec(),
    }
}

/// Gradient of the predicted-class logit with respect to the 1568 inputs
/// (eval mode: moving-stat BN, no dropout), unflattened into the two 28x28
/// channel maps.
pub fn saliency(model: &Model, feature_vector: &[f32]) -> Result<SaliencyMaps> {
    if model.config.input_dim != FEATURE_DIM || feature_vector.len() != FEATURE_DIM {
        return Err(Error::ShapeMismatch(format!(
            "saliency needs {FEATURE_DIM}-dim features, got model {} and input {}",
            model.config.input_dim,
            feature_vector.len()
        )));
    }
    let input = Matrix::from_vec(1, FEATURE_DIM, feature_vector.to_vec())?;
    let logits = model.forward_eval(&input)?;
    let class = logits.row_argmax()[0];
    let grad = model.logit_input_gradient(&input, class)?;
    Ok(split_channels(&grad))
}

/// Static attribution: L2 norm of each input's outgoing first-layer weights,
/// unflattened into the two channel maps.
pub fn weight_energy_map(model: &Model) -> Result<SaliencyMaps> {
    if model.config.input_dim != FEATURE_DIM {
        return Err(Error::ShapeMismatch(format!(
            "weight energy map needs a {FEATURE_DIM}-dim input layer",
        )));
    }
    let weights = match model.hidden.first() {
        Some(layer) => &layer.weights,
        None => &model.output.weights,
    };
    let energies: Vec<f32> = (0..FEATURE_DIM)
        .map(|i| {
            let row = weights.row(i);
            crate::tensor::kernels::dot(row, row).sqrt()
        })
        .collect();
    Ok(split_channels(&energies))
}

/// 28x28 map to a binary PGM (P5), scaling |value| so the largest magnitude
/// is white; an all-zero map stays all black.
pub fn map_to_pgm(map: &[f32]) -> Result<Vec<u8>> {
    if map.len() != IMAGE_PIXELS {
        return Err(Error::BadImageShape {
            expected: format!("{IMAGE_PIXELS} values"),
            got: format!("{}", map.len()),
        });
    }
    let peak = map.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
    let mut out = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    for &v in map {
        let px = if peak == 0.0 {
            0.0
        } else {
            (v.abs() / peak * 255.0).round()
        };
        out.push(px as u8);
    }
    Ok(out)
}
