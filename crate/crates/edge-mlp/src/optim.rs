//! Adam updates and the two training callbacks: early stopping on
//! validation accuracy (with best-weight restoration) and learning-rate
//! reduction on validation-loss plateau.

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-7;
pub const DEFAULT_LEARNING_RATE: f32 = 1e-3;

pub const EARLY_STOP_PATIENCE: u32 = 4;
pub const PLATEAU_PATIENCE: u32 = 3;
pub const PLATEAU_FACTOR: f32 = 0.5;
pub const PLATEAU_MIN_LR: f32 = 1e-6;
pub const PLATEAU_MIN_DELTA: f32 = 1e-4;

/// First/second moment state for every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model, lr: f32) -> AdamState {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        AdamState {
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update:
    /// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`, bias-corrected
    /// `m^ = m/(1-b1^t)`, `v^ = v/(1-b2^t)`, `p <- p - lr*m^/(sqrt(v^)+eps)`.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let grad_slices = flatten_grads(grads);
        let mut params = model.param_slices_mut();
        if params.len() != self.m.len() || grad_slices.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} tensors, model {} and grads {}",
                self.m.len(),
                params.len(),
                grad_slices.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grad_slices)
            .zip(self.m.iter().zip(&self.v))
        {
            if p.len() != g.len() || p.len() != m.len() || v.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adam tensor of {} params vs {} grads",
                    p.len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grad_slices)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradient tensors in the model's canonical parameter order.
fn flatten_grads(grads: &Gradients) -> Vec<&[f32]> {
    let mut out = Vec::new();
    for layer in &grads.layers {
        out.push(layer.weights.as_slice());
        out.push(layer.bias.as_slice());
        if let Some(g) = &layer.gamma {
            out.push(g.as_slice());
        }
        if let Some(b) = &layer.beta {
            out.push(b.as_slice());
        }
    }
    out
}

/// Decision returned by the early-stopping callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early stopping on validation accuracy: strict improvement resets the
/// counter and snapshots the weights; `patience` stagnant epochs stop the
/// run, after which the trainer restores the snapshot.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub patience: u32,
    pub best_val_accuracy: f64,
    pub best_epoch: u32,
    pub best_weights: Option<Model>,
    pub epochs_since_improvement: u32,
    last_epoch: u32,
}

impl EarlyStopState {
    pub fn new() -> EarlyStopState {
        EarlyStopState {
            patience: EARLY_STOP_PATIENCE,
            best_val_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            best_weights: None,
            epochs_since_improvement: 0,
            last_epoch: 0,
        }
    }

    /// Feed the completed epoch's validation accuracy. Epochs are 1-based
    /// and must arrive in order.
    pub fn update(
        &mut self,
        epoch: u32,
        val_accuracy: f64,
        weights: &Model,
    ) -> Result<StopDecision> {
        if epoch != self.last_epoch + 1 {
            return Err(Error::OutOfOrderEpoch {
                expected: self.last_epoch + 1,
                got: epoch,
            });
        }
        self.last_epoch = epoch;
        if val_accuracy > self.best_val_accuracy {
            self.best_val_accuracy = val_accuracy;
            self.best_epoch = epoch;
            self.best_weights = Some(weights.clone());
            self.epochs_since_improvement = 0;
            Ok(StopDecision::Continue)
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                Ok(StopDecision::Stop)
            } else {
                Ok(StopDecision::Continue)
            }
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning-rate reduction on validation-loss plateau. Improvement means
/// beating the best seen loss by more than `min_delta`; after `patience`
/// consecutive non-improvements the rate is halved (down to `min_lr`) and
/// the counter resets.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub patience: u32,
    pub factor: f32,
    pub min_lr: f32,
    pub min_delta: f32,
    pub best_val_loss: f64,
    pub epochs_since_improvement: u32,
    last_epoch: u32,
}

impl PlateauState {
    pub fn new() -> PlateauState {
        PlateauState {
            patience: PLATEAU_PATIENCE,
            factor: PLATEAU_FACTOR,
            min_lr: PLATEAU_MIN_LR,
            min_delta: PLATEAU_MIN_DELTA,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            last_epoch: 0,
        }
    }

    /// Feed the completed epoch's validation loss; returns the learning
    /// rate to use from here on.
    pub fn update(&mut self, epoch: u32, val_loss: f64, current_lr: f32) -> Result<f32> {
        if epoch != self.last_epoch + 1 {
            return Err(Error::OutOfOrderEpoch {
                expected: self.last_epoch + 1,
                got: epoch,
            });
        }
        self.last_epoch = epoch;
        let improved = val_loss < self.best_val_loss - self.min_delta as f64;
        // best always tracks the minimum seen, improvement or not
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
        }
        if improved {
            self.epochs_since_improvement = 0;
            return Ok(current_lr);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            self.epochs_since_improvement = 0;
            Ok((current_lr * self.factor).max(self.min_lr))
        } else {
            Ok(current_lr)
        }
    }
}

impl Default for PlateauState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, MlpConfig};
    use crate::rng::Rng;
    use crate::tensor::Matrix;

    fn scalar_model() -> Model {
        // 1 -> 1 linear model: a single weight plus a bias
        let config = MlpConfig {
            input_dim: 1,
            hidden_dims: vec![],
            dropout_rates: vec![],
            output_dim: 1,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        };
        let mut model = init_model(config, 0).unwrap();
        model.output.weights.set(0, 0, 0.0);
        model
    }

    fn scalar_grads(g_weight: f32) -> Gradients {
        Gradients {
            layers: vec![crate::model::LayerGrads {
                weights: Matrix::from_vec(1, 1, vec![g_weight]).unwrap(),
                bias: vec![0.0],
                gamma: None,
                beta: None,
            }],
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_but_steps() {
        let mut model = scalar_model();
        let mut state = AdamState::new(&model, 1e-3);
        state.apply(&mut model, &scalar_grads(0.0)).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(model.output.weights.get(0, 0), 0.0);
    }

    #[test]
    fn first_step_closed_form() {
        // t=1: m_hat = g, v_hat = g^2, update = lr*g/(|g|+eps)
        for &g in &[1.0f32, -1.0, 0.35, -2.5] {
            let mut model = scalar_model();
            let mut state = AdamState::new(&model, 1e-3);
            state.apply(&mut model, &scalar_grads(g)).unwrap();
            let p = model.output.weights.get(0, 0);
            let expected = -1e-3 * g / (g.abs() + 1e-7);
            assert!(
                (p - expected).abs() < 1e-6,
                "g={g}: step {p}, closed form {expected}"
            );
        }
    }

    #[test]
    fn first_step_magnitude_bounded_by_lr() {
        let mut rng = Rng::new(40);
        for _ in 0..50 {
            let g = rng.uniform(-5.0, 5.0).unwrap();
            if g == 0.0 {
                continue;
            }
            let mut model = scalar_model();
            let mut state = AdamState::new(&model, 1e-3);
            state.apply(&mut model, &scalar_grads(g)).unwrap();
            let delta = model.output.weights.get(0, 0).abs();
            assert!(delta <= 1e-3 * (1.0 + 1e-3), "|delta| = {delta}");
        }
    }

    #[test]
    fn moments_stay_finite_and_v_nonnegative() {
        let mut model = scalar_model();
        let mut state = AdamState::new(&model, 1e-3);
        let mut rng = Rng::new(41);
        for _ in 0..500 {
            let g = rng.uniform(-100.0, 100.0).unwrap();
            state.apply(&mut model, &scalar_grads(g)).unwrap();
        }
        for (m, v) in state.m.iter().zip(&state.v) {
            assert!(m.iter().all(|x| x.is_finite()));
            assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
        assert!(model.output.weights.get(0, 0).is_finite());
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut model = scalar_model();
        let mut state = AdamState::new(&model, 1e-3);
        let bad = Gradients {
            layers: vec![crate::model::LayerGrads {
                weights: Matrix::zeros(2, 2),
                bias: vec![0.0],
                gamma: None,
                beta: None,
            }],
        };
        assert!(matches!(
            state.apply(&mut model, &bad),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn early_stopping_trace_from_rule() {
        // accuracies [.90,.91,.91,.91,.91,.91]: best at epoch 2, stop after
        // epoch 6, restored weights are epoch 2's
        let mut state = EarlyStopState::new();
        let accs = [0.90, 0.91, 0.91, 0.91, 0.91, 0.91];
        let mut decision = StopDecision::Continue;
        for (i, &acc) in accs.iter().enumerate() {
            let epoch = i as u32 + 1;
            let mut marker = scalar_model();
            marker.output.bias[0] = epoch as f32; // identify the snapshot
            decision = state.update(epoch, acc, &marker).unwrap();
            if epoch < 6 {
                assert_eq!(decision, StopDecision::Continue, "epoch {epoch}");
            }
        }
        assert_eq!(decision, StopDecision::Stop);
        assert_eq!(state.best_epoch, 2);
        assert_eq!(state.best_weights.unwrap().output.bias[0], 2.0);
    }

    #[test]
    fn early_stopping_never_fires_on_strict_improvement() {
        let mut state = EarlyStopState::new();
        let model = scalar_model();
        for epoch in 1..=50u32 {
            let acc = 0.5 + epoch as f64 * 1e-3;
            assert_eq!(
                state.update(epoch, acc, &model).unwrap(),
                StopDecision::Continue
            );
        }
    }

    #[test]
    fn early_stopping_ties_count_as_stagnation() {
        let mut state = EarlyStopState::new();
        let model = scalar_model();
        state.update(1, 0.9, &model).unwrap();
        for epoch in 2..=4u32 {
            assert_eq!(
                state.update(epoch, 0.9, &model).unwrap(),
                StopDecision::Continue
            );
        }
        assert_eq!(state.update(5, 0.9, &model).unwrap(), StopDecision::Stop);
    }

    #[test]
    fn early_stopping_out_of_order_epoch() {
        let mut state = EarlyStopState::new();
        let model = scalar_model();
        state.update(1, 0.5, &model).unwrap();
        assert!(matches!(
            state.update(3, 0.6, &model),
            Err(Error::OutOfOrderEpoch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn plateau_trace_from_rule() {
        // losses [1.0, .99, .99, .99, .99]: halves after epoch 5
        let mut state = PlateauState::new();
        let mut lr = 1e-3f32;
        let losses = [1.0, 0.99, 0.99, 0.99, 0.99];
        for (i, &loss) in losses.iter().enumerate() {
            let epoch = i as u32 + 1;
            lr = state.update(epoch, loss, lr).unwrap();
            if epoch < 5 {
                assert_eq!(lr, 1e-3, "epoch {epoch}");
            }
        }
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn plateau_floor() {
        let mut state = PlateauState::new();
        let mut lr = 1.5e-6f32;
        for epoch in 1..=4u32 {
            lr = state.update(epoch, 1.0, lr).unwrap();
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn plateau_never_fires_while_losses_fall() {
        let mut state = PlateauState::new();
        let mut lr = 1e-3f32;
        let mut loss = 2.0f64;
        for epoch in 1..=30u32 {
            loss -= 1e-3;
            lr = state.update(epoch, loss, lr).unwrap();
            assert_eq!(lr, 1e-3);
        }
    }

    #[test]
    fn plateau_reductions_are_at_least_patience_apart() {
        // epoch 1 always improves on the infinite initial best, so the
        // first cut lands at epoch 4, then every 3 stagnant epochs after
        let mut state = PlateauState::new();
        let mut lr = 1e-3f32;
        let mut cuts = Vec::new();
        for epoch in 1..=13u32 {
            let new_lr = state.update(epoch, 1.0, lr).unwrap();
            if new_lr < lr {
                cuts.push(epoch);
            }
            lr = new_lr;
        }
        assert_eq!(cuts, vec![4, 7, 10, 13]);
        for pair in cuts.windows(2) {
            assert!(pair[1] - pair[0] >= PLATEAU_PATIENCE);
        }
    }
}
