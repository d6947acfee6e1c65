//! Image/mask data model, synthetic hand generator, dataset splits and file I/O.

mod io;
mod synth;

pub use io::{
    load_dataset, load_sample, read_image, read_mask, read_splits, save_sample, write_image,
    write_mask, write_splits, IMAGE_SUFFIX, MASK_SUFFIX, SPLITS_FILE,
};
pub use synth::{synth_dataset, synth_sample, BackgroundKind, Range, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Row-major 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if values.len() != width * height {
            return Err(Error::Validation(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    /// Applies `f` to every intensity.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.values {
            hist[v as usize] += 1;
        }
        hist
    }
}

/// Row-major grid of class indices in `0..NUM_CLASSES`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        Self::with_classes(width, height, labels, NUM_CLASSES)
    }

    /// Builds a mask whose labels must lie in `0..classes`.
    pub fn with_classes(width: usize, height: usize, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("mask dimensions must be positive".into()));
        }
        if labels.len() != width * height {
            return Err(Error::Validation(format!(
                "{width}x{height} mask needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "mask label {bad} outside 0..{}",
                classes - 1
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<u8> {
        let hist = class_histogram(self);
        (0..NUM_CLASSES as u8)
            .filter(|&c| hist[c as usize] > 0)
            .collect()
    }

    /// Collapses every nonzero class to 1.
    pub fn binarized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| u8::from(l != 0)).collect(),
        }
    }
}

/// A paired image and label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: LabelMask) -> Result<Self> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::DimensionMismatch(format!(
                "image is {}x{}, mask is {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Disjoint train / validation / test id lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl SplitSet {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that no id appears twice across (or within) the splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("sample id `{id}` listed twice")));
            }
        }
        Ok(())
    }
}

/// Pixel count per class; sums to `width * height`.
pub fn class_histogram(mask: &LabelMask) -> [u64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for &l in mask.labels() {
        counts[l as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_examples() {
        assert_eq!(
            class_histogram(&LabelMask::zeros(10, 10)),
            [100, 0, 0, 0, 0, 0, 0, 0, 0]
        );
        let m = LabelMask::new(2, 2, vec![0, 5, 0, 0]).unwrap();
        assert_eq!(class_histogram(&m), [3, 0, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        assert!(matches!(
            LabelMask::new(2, 1, vec![0, 9]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sample_rejects_dimension_mismatch() {
        let img = GrayImage::filled(100, 80, 0);
        let mask = LabelMask::zeros(100, 81);
        assert!(matches!(
            Sample::new("x", img, mask),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn split_validation_detects_duplicates() {
        let s = SplitSet {
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["a".into()],
        };
        assert!(s.validate().is_err());
    }
}
