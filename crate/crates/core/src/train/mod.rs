//! Training: loss, Adam, effective-batch gradient accumulation, learning
//! rate schedules, plateau-reduce with rewind, checkpoints and averaging.

use std::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::model::{Packed, Session, TransformerModel, PAD};
use crate::tensor::tape::cross_entropy_value;
use crate::tensor::{Scalar, Tensor};

mod checkpoint;
mod schedule;
mod trainer;

pub use checkpoint::{average_checkpoints, load_checkpoint, save_checkpoint, select_best, CheckpointRecord};
pub use schedule::{inv_sqrt_lr, plateau_step, scaled_lr, Action, PlateauReduceState};
pub use trainer::{rewind, train_loop, write_log, DevEvaluator, LogRow, Schedule, TrainConfig, TrainOutcome};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Mean label-smoothed cross entropy over the non-PAD targets.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize], label_smoothing: f64) -> Result<f64> {
    let (sum, count) = cross_entropy_value(logits, targets, T::of_f64(label_smoothing), Some(PAD))?;
    if count == 0 {
        bail!(Value, "every target is padding");
    }
    Ok(sum.as_f64() / count as f64)
}

/// Adam moments, step count and current learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments shaped like the model's parameters.
    pub fn new(model: &TransformerModel<T>, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> =
            model.params().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, lr }
    }

    /// One bias-corrected Adam step with learning rate `lr`.
    pub fn apply(&mut self, model: &mut TransformerModel<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::of_f64(ADAM_BETA1), T::of_f64(ADAM_BETA2));
        let (one, eps) = (T::one(), T::of_f64(ADAM_EPS));
        let step_size = T::of_f64(lr / c1);
        let inv_c2 = T::of_f64(1.0 / c2);
        for (name, g) in grads {
            let (Some(m), Some(v), Some(p)) = (self.m.get_mut(name), self.v.get_mut(name), model.param_mut(name)) else {
                bail!(State, "optimizer has no state for parameter {name}");
            };
            if g.shape() != p.shape() {
                bail!(Shape, "gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape());
            }
            let iter = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        self.lr = lr;
        Ok(())
    }
}

/// Loss and gradient statistics of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Summed smoothed loss over all micro-batches.
    pub loss_sum: f64,
    pub tokens: usize,
}

impl StepStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }
}

/// Summed loss gradients of one micro-batch, keyed by parameter name.
pub fn micro_batch_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    batch: &Packed,
    label_smoothing: f64,
    dropout_seed: Option<u64>,
) -> Result<(BTreeMap<String, Tensor<T>>, f64, usize)> {
    let mut s = match dropout_seed {
        Some(seed) => Session::training(model, seed),
        None => Session::deterministic(model),
    };
    let (loss, count) = s.loss(batch, label_smoothing)?;
    let value = s.tape.value(loss).data()[0].as_f64();
    let mut grads = s.tape.backward(loss)?;
    let bound: Vec<(String, crate::tensor::Var)> = s.bound().map(|(k, v)| (k.to_string(), v)).collect();
    let mut out = BTreeMap::new();
    for (name, var) in bound {
        if let Some(g) = grads.take(var) {
            out.insert(name, g);
        }
    }
    Ok((out, value, count))
}

/// Sums gradients over `micro_batches` (in order), divides by their total
/// target token count and applies exactly one optimizer step.
///
/// With `dropout_seed` set, micro-batch `i` uses a dropout stream derived
/// from that seed and `i`; otherwise dropout is off.
pub fn effective_batch_update<T: Scalar>(
    model: &mut TransformerModel<T>,
    micro_batches: &[Packed],
    optimizer: &mut OptimizerState<T>,
    lr: f64,
    label_smoothing: f64,
    dropout_seed: Option<u64>,
) -> Result<StepStats> {
    if micro_batches.is_empty() {
        bail!(Usage, "an update needs at least one micro-batch");
    }
    let mut total: BTreeMap<String, Tensor<T>> =
        model.params().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
    let mut stats = StepStats { loss_sum: 0.0, tokens: 0 };
    for (i, batch) in micro_batches.iter().enumerate() {
        let seed = dropout_seed.map(|s| crate::rng::derive_seed(s, &format!("micro/{i}")));
        let (grads, loss, count) = micro_batch_gradients(model, batch, label_smoothing, seed)?;
        for (name, g) in grads {
            total.get_mut(&name).expect("gradient for a model parameter").add_assign(&g)?;
        }
        stats.loss_sum += loss;
        stats.tokens += count;
    }
    if stats.tokens == 0 {
        bail!(Value, "micro-batches contain no target tokens");
    }
    let norm = T::of_f64(1.0 / stats.tokens as f64);
    for g in total.values_mut() {
        g.scale_in_place(norm);
    }
    optimizer.apply(model, &total, lr)?;
    Ok(stats)
}
