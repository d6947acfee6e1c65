//! SGD-with-momentum training, evaluation, prediction and loss history.

mod eval;
mod history;

pub use eval::{
    evaluate, evaluate_otsu, overlay, predict, predict_batch, segmenter_from_checkpoint, Background,
    Oracle, Segmenter, PALETTE,
};
pub use history::{history_csv, parse_history_csv, read_history, write_history, EpochRecord, History};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{pipeline, resize, AugmentConfig, Preset, RngStream};
use crate::error::{Error, Result};
use crate::imgdata::{GrayImage, LabelMask, Sample};
use crate::lossmetrics::{soft_jaccard_logits, soft_jaccard_loss, softmax, JACCARD_EPS};
use crate::model::{save_weights, Model};
use crate::tensor::{Parameterized, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Zero selects a frozen evaluation-only mode.
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub aug: Preset,
    /// Write `ckpt_<epoch>` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-5,
            momentum: 0.9,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            aug: Preset::Full,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Classical momentum update: `v = momentum * v - lr * g; w = w + v`.
pub fn sgd_step(weights: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f64, momentum: f64) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd step over {} weights, {} grads, {} velocities",
            weights.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, m) = (lr as f32, momentum as f32);
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v - lr * g;
        *w += *v;
    }
    Ok(())
}

/// Momentum state for every trainable parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized) -> Result<()> {
        let (lr, m) = (self.learning_rate, self.momentum);
        let velocity = &mut self.velocity;
        let mut index = 0;
        let mut result = Ok(());
        model.visit_mut("", &mut |_, p| {
            if !p.trainable || result.is_err() {
                return;
            }
            if velocity.len() == index {
                velocity.push(vec![0.0; p.len()]);
            }
            if p.grad.is_empty() {
                p.grad_mut();
            }
            result = sgd_step(&mut p.value, &p.grad, &mut velocity[index], lr, m);
            index += 1;
        });
        result
    }
}

/// Network input for a batch of same-size images: intensities mapped to
/// `[-1, 1]` and replicated over `channels`.
pub fn to_input(images: &[&GrayImage], channels: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut t = Tensor::zeros(images.len(), channels, h, w);
    for (b, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        let s = t.sample_mut(b);
        for plane in s.chunks_exact_mut(w * h) {
            for (o, &v) in plane.iter_mut().zip(img.values()) {
                *o = v as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(t)
}

/// Resize-only preprocessing used for validation, evaluation and prediction.
pub fn preprocess(sample: &Sample, size: usize) -> Sample {
    resize(sample, size, size)
}

/// Soft loss of an inference pass over `samples`, averaged per batch.
pub fn validation_loss(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let size = model.spec.input_size;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in samples.chunks(batch_size) {
        let prepared: Vec<Sample> = chunk.iter().map(|s| preprocess(s, size)).collect();
        let images: Vec<&GrayImage> = prepared.iter().map(|s| &s.image).collect();
        let logits = model.forward(&to_input(&images, model.spec.backbone.in_channels)?)?;
        let masks: Vec<LabelMask> = prepared.iter().map(|s| s.mask.clone()).collect();
        total += soft_jaccard_loss(&softmax(&logits), &masks, JACCARD_EPS)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Training and validation samples held in memory.
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Augmentation stream for the sample at `index` in `epoch`.
pub fn sample_stream(seed: u64, epoch: usize, index: usize) -> RngStream {
    RngStream::new(seed, ((epoch as u64) << 32) | index as u64)
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss {loss} at epoch {epoch}, batch {batch}; lower the learning rate"
        )))
    }
}

/// Runs `cfg.epochs` epochs of minibatch SGD on the soft Jaccard loss.
///
/// With `run_dir` set, writes `history.csv` after every epoch, `ckpt_<epoch>`
/// every `checkpoint_every` epochs and `best` whenever the validation loss
/// improves. A zero learning rate freezes the model entirely (norm
/// statistics included), so the recorded losses only measure the data.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    run_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    aug.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    let aug = AugmentConfig {
        output_size: model.spec.input_size,
        ..aug.clone()
    };
    let channels = model.spec.backbone.in_channels;
    let frozen = cfg.learning_rate == 0.0;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut RngStream::new(cfg.seed, u64::MAX - epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| pipeline(&data.train[i], &aug, &mut sample_stream(cfg.seed, epoch, i)))
                .collect();
            let images: Vec<&GrayImage> = augmented.iter().map(|s| &s.image).collect();
            let x = to_input(&images, channels)?;
            let masks: Vec<LabelMask> = augmented.iter().map(|s| s.mask.clone()).collect();
            let loss = if frozen {
                soft_jaccard_loss(&softmax(&model.forward(&x)?), &masks, JACCARD_EPS)?
            } else {
                let logits = model.forward_train(x)?;
                let (loss, grad) = soft_jaccard_logits(&logits, &masks, JACCARD_EPS)?;
                check_finite(loss, epoch, b)?;
                model.zero_grad();
                model.backward(&grad);
                sgd.step(model)?;
                loss
            };
            check_finite(loss, epoch, b)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = validation_loss(model, &data.val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} ({:.1}s)",
            record.train_loss,
            record.val_loss,
            record.seconds
        );
        let improved = history.push(record);
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_history(&history, &dir.join("history.csv"))?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_weights(model, &dir.join(format!("ckpt_{epoch}")))?;
            }
            if improved {
                save_weights(model, &dir.join("best"))?;
            }
        }
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_history(&history, &dir.join("history.csv"))?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
