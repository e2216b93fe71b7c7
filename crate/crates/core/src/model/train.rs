//! Mini-batch Adam training over weighted, optionally labelled examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{self, Dropout};
use super::Model;
use crate::autograd::{Grads, Tape};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::text::TokenId;

/// One training pair. `tgt` is the exact scored sequence (normally ending in `EOS`).
///
/// `label` feeds the classifier head: `Some(true)` is a positive example,
/// `Some(false)` a negative one which adds classifier loss but no LM loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub label: Option<bool>,
    pub weight: f64,
}

impl TrainExample {
    pub fn new(src: Vec<TokenId>, tgt: Vec<TokenId>) -> Self {
        TrainExample { src, tgt, label: None, weight: 1.0 }
    }

    pub fn labelled(src: Vec<TokenId>, tgt: Vec<TokenId>, label: bool) -> Self {
        TrainExample { src, tgt, label: Some(label), weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Weight of the classifier loss relative to the LM loss.
    pub cls_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            cls_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Mat], cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads.tensors[i].data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p.data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn check_example(m: &Model, ex: &TrainExample) -> Result<()> {
    if ex.tgt.is_empty() {
        return Err(Error::invalid("example", "empty target"));
    }
    if !(ex.weight >= 0.0 && ex.weight.is_finite()) {
        return Err(Error::invalid("example", format!("weight {} must be finite and >= 0", ex.weight)));
    }
    if ex.label.is_some() && !m.has_classifier_head() {
        return Err(Error::invalid("example", "labelled example needs a classifier head"));
    }
    m.check_lengths(&ex.src, &ex.tgt)
}

/// Trains in place. Batches average per-example losses. Stops with
/// [`Error::NonFinite`] before applying an update whose loss or gradient is
/// not finite, leaving the parameters from the previous step.
pub fn train(model: &mut Model, examples: &[TrainExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    for ex in examples {
        check_example(model, ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg);
    let mut grads = Grads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport { steps: 0, epoch_losses: Vec::with_capacity(cfg.epochs) };
    let rate = model.config.dropout;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut tape = Tape::new(&model.params);
                let drop = (rate > 0.0).then(|| Dropout { rate, rng: &mut rng });
                let root = forward::example_loss(model, &mut tape, &examples[i], cfg.cls_weight, drop);
                batch_loss += tape.scalar(root);
                tape.backward(root, &mut grads);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite { step: report.steps, loss: batch_loss / n });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut model.params, &grads);
            report.steps += 1;
            epoch_loss += batch_loss;
        }
        report.epoch_losses.push(if examples.is_empty() { 0.0 } else { epoch_loss / examples.len() as f64 });
    }
    Ok(report)
}
