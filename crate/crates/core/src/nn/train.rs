//! Mini-batch gradient descent over image patches.
//!
//! Per-sample gradients inside a batch are computed in parallel but summed
//! in sample order, so a run is bitwise reproducible for a fixed seed no
//! matter how many worker threads execute it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RasterImage};
use crate::patching::Patch;

use super::network::{image_to_tensor, Gradients, NetworkModel};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Loss weight of object pixels; 1.0 disables class weighting.
    pub object_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            learning_rate: 1e-4,
            epochs: 23,
            momentum: 0.0,
            seed: 0,
            object_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must lie in [0, 1)".into()));
        }
        if !(self.object_weight > 0.0) {
            return Err(Error::InvalidParameter("object weight must be positive".into()));
        }
        Ok(())
    }
}

/// One network input with its target mask. Pixels stay 8-bit until the
/// sample is visited, which keeps large patch sets affordable.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub pixels: RasterImage,
    pub target: BinaryMask,
}

impl TrainingSample {
    pub fn from_patch(p: Patch) -> Result<Self> {
        match p.mask {
            Some(target) => Ok(Self {
                pixels: p.pixels,
                target,
            }),
            None => Err(Error::InvalidInput(format!("patch at {:?} has no mask", p.origin))),
        }
    }

    pub fn input(&self) -> Tensor {
        image_to_tensor(&self.pixels)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample cost of each epoch, measured before each batch's update.
    pub cost_history: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_cost\n");
        for (i, c) in self.cost_history.iter().enumerate() {
            out.push_str(&format!("{},{:e}\n", i + 1, c));
        }
        out
    }
}

/// Plain (optionally momentum) gradient descent state.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &NetworkModel, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// `v ← μ·v + g`, `w ← w − lr·v`, using each parameter's gradient slot.
    pub fn step(&mut self, model: &mut NetworkModel) {
        for (param, vel) in model.params_mut().iter_mut().zip(&mut self.velocity) {
            let grad = param.value.grad_mut().to_vec();
            for ((w, v), g) in param.value.values_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g;
                *w -= self.learning_rate * *v;
            }
        }
    }
}

/// Writes `sum / count` into every parameter's gradient slot.
fn store_mean_gradient(model: &mut NetworkModel, sum: &Gradients, count: usize) {
    let scale = 1.0 / count as f64;
    for (param, total) in model.params_mut().iter_mut().zip(sum) {
        for (slot, g) in param.value.grad_mut().iter_mut().zip(total) {
            *slot = g * scale;
        }
    }
}

/// Trains in place and returns the per-epoch cost history.
///
/// `on_epoch` is called with `(epoch, mean_cost)` after every epoch.
pub fn train(
    model: &mut NetworkModel,
    samples: &[TrainingSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    let mut sum: Gradients = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let wave = rayon::current_num_threads().max(1);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_cost = 0.0;
        for batch in order.chunks(config.batch_size) {
            for g in sum.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            // Bounded fan-out keeps at most `wave` gradient sets alive; sums
            // are always taken in sample order.
            for wave_ids in batch.chunks(wave) {
                let results: Vec<(f64, Gradients)> = wave_ids
                    .par_iter()
                    .map(|&i| {
                        let s = &samples[i];
                        model.loss_and_gradients(&s.input(), &s.target, config.object_weight)
                    })
                    .collect::<Result<_>>()?;
                for (loss, grads) in results {
                    epoch_cost += loss;
                    for (acc, g) in sum.iter_mut().zip(&grads) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            store_mean_gradient(model, &sum, batch.len());
            sgd.step(model);
        }
        let mean = epoch_cost / samples.len() as f64;
        report.cost_history.push(mean);
        model.meta.epochs_run += 1;
        model.meta.final_cost = Some(mean);
        on_epoch(epoch + 1, mean);
    }
    for p in model.params_mut() {
        p.value.drop_grad();
    }
    Ok(report)
}
