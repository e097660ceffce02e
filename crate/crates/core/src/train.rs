//! Mini-batch SGD with momentum on softmax cross-entropy.
//!
//! The same routine trains vanilla models and finetunes pruned ones: with a
//! `winner_rate` the superficial gate is recomputed for every example and
//! treated as a constant in the backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::occlude;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{softmax_cross_entropy, Gradients, Model};
use crate::sin::{pruned_forward, SinConfig};
use crate::tensor::Tensor;
use crate::windows::Window;

/// Random square occlusion applied to training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionAugment {
    pub side: usize,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Train through the SIN gate at this winner rate.
    pub winner_rate: Option<f32>,
    pub occlusion: Option<OcclusionAugment>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            winner_rate: None,
            occlusion: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(a) = &self.occlusion {
            if a.side == 0 || !(0.0..=1.0).contains(&a.probability) {
                return Err(Error::config("occlusion augmentation needs side >= 1 and probability in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f32>,
    /// Accuracy on the training batches of the last epoch.
    pub final_accuracy: f32,
}

struct Sample {
    loss: f32,
    correct: bool,
    grads: Gradients,
}

fn example_gradient(model: &Model, x: &Tensor, y: usize, sin: Option<&SinConfig>) -> Result<Sample> {
    let trace = match sin {
        Some(cfg) => pruned_forward(model, x, cfg, None, true)?.0,
        None => model.forward(x, true)?,
    };
    let (loss, dlogits) = softmax_cross_entropy(trace.logits.data(), y);
    let grads = model.backward(&trace, &dlogits)?;
    Ok(Sample {
        loss,
        correct: trace.label == y,
        grads,
    })
}

fn random_window(rng: &mut ChaCha8Rng, side: usize, h: usize, w: usize) -> Window {
    let side = side.min(h).min(w);
    Window::square(rng.gen_range(0..=w - side), rng.gen_range(0..=h - side), side)
}

/// Trains `model` in place. Deterministic for a fixed seed regardless of
/// thread count: per-example gradients are summed in batch order.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if data.dims != model.input_dims() || data.classes != model.class_count() {
        return Err(Error::config("dataset shape or class count does not match the model"));
    }
    let sin = cfg.winner_rate.map(|r| SinConfig::for_model(model, r)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .layers()
        .iter()
        .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut final_accuracy = 0.0;
    let (h, w) = (data.dims.height, data.dims.width);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<(Tensor, usize)> = batch
                .iter()
                .map(|&i| {
                    let x = &data.images[i];
                    let x = match cfg.occlusion {
                        Some(a) if rng.gen::<f32>() < a.probability => occlude(x, &random_window(&mut rng, a.side, h, w)),
                        _ => x.clone(),
                    };
                    (x, data.labels[i])
                })
                .collect();
            let frozen: &Model = model;
            let samples = inputs
                .par_iter()
                .map(|(x, y)| example_gradient(frozen, x, *y, sin.as_ref()))
                .collect::<Result<Vec<_>>>()?;

            let batch_loss: f32 = samples.iter().map(|s| s.loss).sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("epoch {epoch}, batch {b}"),
                });
            }
            total += f64::from(batch_loss);
            correct += samples.iter().filter(|s| s.correct).count();

            let scale = 1.0 / samples.len() as f32;
            for (li, layer) in model.layers_mut().iter_mut().enumerate() {
                let (Some((wt, bs)), Some((vw, vb))) = (layer.params_mut(), velocity[li].as_mut()) else {
                    continue;
                };
                let mut gw = vec![0.0f32; wt.len()];
                let mut gb = vec![0.0f32; bs.len()];
                for s in &samples {
                    let g = s.grads.params[li].as_ref().expect("parameterised layer has a gradient");
                    for (a, v) in gw.iter_mut().zip(g.weight.data()) {
                        *a += v;
                    }
                    for (a, v) in gb.iter_mut().zip(g.bias.data()) {
                        *a += v;
                    }
                }
                step(wt.data_mut(), vw, &gw, scale, cfg);
                step(bs.data_mut(), vb, &gb, scale, cfg);
                if !(wt.all_finite() && bs.all_finite()) {
                    return Err(Error::NonFiniteLoss {
                        context: format!("layer {li} parameters after epoch {epoch}, batch {b}"),
                    });
                }
            }
        }
        epoch_loss.push((total / data.len() as f64) as f32);
        final_accuracy = correct as f32 / data.len() as f32;
    }
    Ok(TrainReport {
        epoch_loss,
        final_accuracy,
    })
}

fn step(param: &mut [f32], velocity: &mut [f32], grad: &[f32], scale: f32, cfg: &TrainConfig) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g * scale;
        *p -= cfg.learning_rate * *v;
    }
}

/// Fraction of `data` classified correctly, optionally through the SIN gate.
pub fn accuracy(model: &Model, data: &Dataset, winner_rate: Option<f32>) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let sin = winner_rate.map(|r| SinConfig::for_model(model, r)).transpose()?;
    let hits = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| {
            let label = match &sin {
                Some(cfg) => pruned_forward(model, x, cfg, None, false)?.0.label,
                None => model.forward(x, false)?.label,
            };
            Ok(usize::from(label == y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f32 / data.len() as f32)
}
