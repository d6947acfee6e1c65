//! Micro-averaged evaluation over anything that produces label masks.

use crate::augment::{resize_image, resize_mask};
use crate::error::{Error, Result};
use crate::imgdata::{GrayImage, LabelMask, Sample};
use crate::lossmetrics::{argmax_mask, confusion, otsu_threshold, ConfusionTotals, MetricsRow};
use crate::model::{Checkpoint, Model};

use super::to_input;

/// Produces one mask per sample, at the sample's own resolution.
pub trait Segmenter {
    fn name(&self) -> String;

    fn num_classes(&self) -> usize {
        crate::NUM_CLASSES
    }

    fn segment(&self, samples: &[Sample]) -> Result<Vec<LabelMask>>;
}

/// Returns the ground truth.
pub struct Oracle;

/// Predicts background everywhere.
pub struct Background;

impl Segmenter for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn segment(&self, samples: &[Sample]) -> Result<Vec<LabelMask>> {
        Ok(samples.iter().map(|s| s.mask.clone()).collect())
    }
}

impl Segmenter for Background {
    fn name(&self) -> String {
        "background".into()
    }

    fn segment(&self, samples: &[Sample]) -> Result<Vec<LabelMask>> {
        Ok(samples.iter().map(|s| LabelMask::zeros(s.width(), s.height())).collect())
    }
}

impl Segmenter for Model {
    fn name(&self) -> String {
        "model".into()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn segment(&self, samples: &[Sample]) -> Result<Vec<LabelMask>> {
        let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in images.chunks(8) {
            out.extend(predict_batch(self, chunk)?);
        }
        Ok(out)
    }
}

pub fn segmenter_from_checkpoint(ckpt: Checkpoint) -> Box<dyn Segmenter> {
    match ckpt {
        Checkpoint::Model(m) => m,
        Checkpoint::Oracle => Box::new(Oracle),
        Checkpoint::Background => Box::new(Background),
    }
}

/// Resizes to the model input, runs inference, takes the per-pixel argmax
/// and resizes the labels back with nearest sampling.
pub fn predict_batch(model: &Model, images: &[&GrayImage]) -> Result<Vec<LabelMask>> {
    let size = model.spec.input_size;
    let resized: Vec<GrayImage> = images.iter().map(|img| resize_image(img, size, size)).collect();
    let refs: Vec<&GrayImage> = resized.iter().collect();
    let logits = model.forward(&to_input(&refs, model.spec.backbone.in_channels)?)?;
    Ok(argmax_mask(&logits)
        .into_iter()
        .zip(images)
        .map(|(m, img)| resize_mask(&m, img.width(), img.height()))
        .collect())
}

pub fn predict(model: &Model, image: &GrayImage) -> Result<LabelMask> {
    Ok(predict_batch(model, &[image])?.remove(0))
}

/// Merges per-image confusion totals, then computes metrics once.
pub fn evaluate(seg: &dyn Segmenter, samples: &[Sample], split: &str) -> Result<MetricsRow> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let classes = seg.num_classes();
    let mut totals = ConfusionTotals::empty(classes);
    for chunk in samples.chunks(8) {
        for (pred, s) in seg.segment(chunk)?.iter().zip(chunk) {
            totals += &confusion(pred, &s.mask, classes)?;
        }
    }
    Ok(MetricsRow::new(seg.name(), split, samples.len(), totals))
}

/// Otsu hand-vs-background baseline: any nonzero class counts as
/// foreground. Images with a single intensity are skipped; their ids are
/// returned alongside the metrics.
pub fn evaluate_otsu(samples: &[Sample], split: &str) -> Result<(MetricsRow, Vec<String>)> {
    let mut totals = ConfusionTotals::empty(2);
    let mut skipped = Vec::new();
    for s in samples {
        match otsu_threshold(&s.image) {
            Ok(pred) => totals += &confusion(&pred, &s.mask.binarized(), 2)?,
            Err(Error::DegenerateInput(msg)) => {
                log::warn!("skipping `{}`: {msg}", s.id);
                skipped.push(s.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    let n = samples.len() - skipped.len();
    Ok((MetricsRow::new("otsu", split, n, totals), skipped))
}

/// One colour per class; background keeps the image.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// The image in gray with class regions tinted by [`PALETTE`].
pub fn overlay(image: &GrayImage, mask: &LabelMask) -> Result<image::RgbImage> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::DimensionMismatch("overlay needs matching image and mask".into()));
    }
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let v = image.values()[i] as u16;
        let l = mask.labels()[i] as usize;
        px.0 = if l == 0 {
            [v as u8; 3]
        } else {
            PALETTE[l % PALETTE.len()].map(|c| ((c as u16 + v) / 2) as u8)
        };
    }
    Ok(out)
}
