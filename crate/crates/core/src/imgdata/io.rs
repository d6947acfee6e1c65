//! Lossless PNG storage for samples and the plain-text split manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{GrayImage, LabelMask, Sample, Split, SplitSet};
use crate::error::{Error, Result};

pub const IMAGE_SUFFIX: &str = ".img.png";
pub const MASK_SUFFIX: &str = ".mask.png";
pub const SPLITS_FILE: &str = "splits.txt";

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{IMAGE_SUFFIX}"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{MASK_SUFFIX}"))
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    image::save_buffer_with_format(
        path,
        values,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads any raster as 8-bit luminance.
pub(crate) fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    let (w, h) = (sample.width(), sample.height());
    write_gray_png(&image_path(dir, &sample.id), w, h, sample.image.values())?;
    write_gray_png(&mask_path(dir, &sample.id), w, h, sample.mask.labels())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let (iw, ih, values) = read_gray_png(&image_path(dir, id))?;
    let path = mask_path(dir, id);
    let (mw, mh, labels) = read_gray_png(&path)?;
    if (iw, ih) != (mw, mh) {
        return Err(Error::DimensionMismatch(format!(
            "sample `{id}`: image is {iw}x{ih}, mask is {mw}x{mh}"
        )));
    }
    let mask = LabelMask::new(mw, mh, labels)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Sample::new(id, GrayImage::new(iw, ih, values)?, mask)
}

/// Reads a single image file as 8-bit grayscale.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let (w, h, values) = read_gray_png(path)?;
    GrayImage::new(w, h, values)
}

pub fn write_image(image: &GrayImage, path: &Path) -> Result<()> {
    write_gray_png(path, image.width(), image.height(), image.values())
}

/// Stores class indices directly as 8-bit gray values.
pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    write_gray_png(path, mask.width(), mask.height(), mask.labels())
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let (w, h, labels) = read_gray_png(path)?;
    LabelMask::new(w, h, labels).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn write_splits(split: &SplitSet, dir: &Path) -> Result<()> {
    split.validate()?;
    let mut text = String::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        for id in split.ids(s) {
            let _ = writeln!(text, "{},{id}", s.as_str());
        }
    }
    let path = dir.join(SPLITS_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_splits(dir: &Path) -> Result<SplitSet> {
    let path = dir.join(SPLITS_FILE);
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut split = SplitSet::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, id) = line.split_once(',').ok_or_else(|| {
            Error::Validation(format!("{}:{}: expected `split,id`", path.display(), n + 1))
        })?;
        let which: Split = name
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{}:{}: unknown split `{name}`", path.display(), n + 1)))?;
        let id = id.trim().to_string();
        match which {
            Split::Train => split.train.push(id),
            Split::Val => split.val.push(id),
            Split::Test => split.test.push(id),
        }
    }
    split.validate()?;
    Ok(split)
}

/// Loads every sample listed under `which` in the manifest of `dir`.
pub fn load_dataset(dir: &Path, which: Split) -> Result<Vec<Sample>> {
    let split = read_splits(dir)?;
    split.ids(which).iter().map(|id| load_sample(dir, id)).collect()
}
