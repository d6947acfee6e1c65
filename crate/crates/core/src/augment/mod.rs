//! Training-time augmentation with mask-consistent geometry.
//!
//! Seven transforms are available: resized crop, rotation, perspective,
//! Gaussian blur, solarize, posterize and equalize. The [`pipeline`] applies
//! each independently with probability `apply_prob`, in a random order, and
//! finishes with a rescale to `output_size` squared. The photometric ops
//! leave the mask untouched.

mod ops;

pub use ops::{
    crop_resize_pad, equalize, equalize_blended, equalize_lut, gaussian_blur, gaussian_kernel,
    posterize, random_blur, random_perspective, random_resized_crop, random_rotation, resize,
    resize_image, resize_mask, rotate, solarize, warp_perspective, CropRect, Homography,
};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgdata::{Range, Sample};

/// Side length of network inputs.
pub const OUTPUT_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    None,
    Minimal,
    #[default]
    Full,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::None, Preset::Minimal, Preset::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::None => "none",
            Preset::Minimal => "minimal",
            Preset::Full => "full",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation preset `{s}` (none, minimal, full)")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Crop,
    Rotation,
    Perspective,
    Blur,
    Solarize,
    Posterize,
    Equalize,
}

impl Op {
    pub const ALL: [Op; 7] = [
        Op::Crop,
        Op::Rotation,
        Op::Perspective,
        Op::Blur,
        Op::Solarize,
        Op::Posterize,
        Op::Equalize,
    ];

    pub fn is_photometric(self) -> bool {
        matches!(self, Op::Blur | Op::Solarize | Op::Posterize | Op::Equalize)
    }
}

/// Augmentation strengths. File form: a `preset` plus optional per-field
/// overrides on top of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "AugmentFile")]
pub struct AugmentConfig {
    pub preset: Preset,
    pub apply_prob: f64,
    /// Area fraction of the crop window.
    pub crop_scale: Range,
    /// Width / height of the crop window.
    pub crop_aspect: Range,
    /// Degrees.
    pub rotation: Range,
    /// Maximal corner displacement as a fraction of half the side.
    pub perspective_distortion: f64,
    /// Pixels.
    pub blur_sigma: Range,
    /// Values at or above the drawn threshold are inverted.
    pub solarize_threshold: Range,
    /// Inclusive range of retained bits.
    pub posterize_bits: [u8; 2],
    /// Weight of the equalized image against the original.
    pub equalize_blend: f64,
    pub output_size: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentFile {
    #[serde(default)]
    preset: Preset,
    apply_prob: Option<f64>,
    crop_scale: Option<Range>,
    crop_aspect: Option<Range>,
    rotation: Option<Range>,
    perspective_distortion: Option<f64>,
    blur_sigma: Option<Range>,
    solarize_threshold: Option<Range>,
    posterize_bits: Option<[u8; 2]>,
    equalize_blend: Option<f64>,
    output_size: Option<usize>,
}

impl From<AugmentFile> for AugmentConfig {
    fn from(f: AugmentFile) -> Self {
        let base = AugmentConfig::from_preset(f.preset);
        AugmentConfig {
            preset: f.preset,
            apply_prob: f.apply_prob.unwrap_or(base.apply_prob),
            crop_scale: f.crop_scale.unwrap_or(base.crop_scale),
            crop_aspect: f.crop_aspect.unwrap_or(base.crop_aspect),
            rotation: f.rotation.unwrap_or(base.rotation),
            perspective_distortion: f.perspective_distortion.unwrap_or(base.perspective_distortion),
            blur_sigma: f.blur_sigma.unwrap_or(base.blur_sigma),
            solarize_threshold: f.solarize_threshold.unwrap_or(base.solarize_threshold),
            posterize_bits: f.posterize_bits.unwrap_or(base.posterize_bits),
            equalize_blend: f.equalize_blend.unwrap_or(base.equalize_blend),
            output_size: f.output_size.unwrap_or(base.output_size),
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Full)
    }
}

impl AugmentConfig {
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            apply_prob: 0.5,
            crop_scale: Range::new(0.75, 1.0),
            crop_aspect: Range::new(0.9, 1.1),
            rotation: Range::new(-60.0, 60.0),
            perspective_distortion: 0.3,
            blur_sigma: Range::new(0.1, 2.0),
            solarize_threshold: Range::new(64.0, 192.0),
            posterize_bits: [3, 7],
            equalize_blend: 1.0,
            output_size: OUTPUT_SIZE,
        }
    }

    /// Every range pulled halfway towards its identity value.
    pub fn minimal() -> Self {
        Self {
            preset: Preset::Minimal,
            crop_scale: Range::new(0.875, 1.0),
            crop_aspect: Range::new(0.95, 1.05),
            rotation: Range::new(-30.0, 30.0),
            perspective_distortion: 0.15,
            blur_sigma: Range::new(0.05, 1.0),
            solarize_threshold: Range::new(160.0, 224.0),
            posterize_bits: [5, 7],
            equalize_blend: 0.5,
            ..Self::full()
        }
    }

    /// Resize only.
    pub fn none() -> Self {
        Self {
            preset: Preset::None,
            ..Self::full()
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::None => Self::none(),
            Preset::Minimal => Self::minimal(),
            Preset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return err("apply_prob must lie in [0, 1]");
        }
        for (name, r) in [
            ("crop_scale", &self.crop_scale),
            ("crop_aspect", &self.crop_aspect),
            ("rotation", &self.rotation),
            ("blur_sigma", &self.blur_sigma),
            ("solarize_threshold", &self.solarize_threshold),
        ] {
            r.validate(name)?;
        }
        if self.crop_scale.min <= 0.0 || self.crop_scale.max > 1.0 {
            return err("crop_scale must lie in (0, 1]");
        }
        if self.crop_aspect.min <= 0.0 {
            return err("crop_aspect must be positive");
        }
        if !(0.0..=1.0).contains(&self.perspective_distortion) {
            return err("perspective_distortion must lie in [0, 1]");
        }
        if self.blur_sigma.min < 0.0 {
            return err("blur_sigma must be non-negative");
        }
        if self.solarize_threshold.min < 0.0 || self.solarize_threshold.max > 256.0 {
            return err("solarize_threshold must lie in [0, 256]");
        }
        let [lo, hi] = self.posterize_bits;
        if lo < 1 || hi > 8 || lo > hi {
            return err("posterize_bits must be an interval inside [1, 8]");
        }
        if !(0.0..=1.0).contains(&self.equalize_blend) {
            return err("equalize_blend must lie in [0, 1]");
        }
        if self.output_size == 0 {
            return err("output_size must be positive");
        }
        Ok(())
    }
}

/// Reproducible random source identified by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// The ops a pipeline call applied, in application order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub applied: Vec<Op>,
}

/// Applies one op with parameters drawn from `cfg`.
pub fn apply_op(op: Op, sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let photometric = |image| Sample {
        id: sample.id.clone(),
        image,
        mask: sample.mask.clone(),
    };
    match op {
        Op::Crop => random_resized_crop(sample, cfg, rng),
        Op::Rotation => random_rotation(sample, cfg, rng).0,
        Op::Perspective => random_perspective(sample, cfg, rng),
        Op::Blur => photometric(random_blur(&sample.image, cfg, rng)),
        Op::Solarize => {
            let t = cfg.solarize_threshold.sample(rng).round() as u16;
            photometric(solarize(&sample.image, t))
        }
        Op::Posterize => {
            let [lo, hi] = cfg.posterize_bits;
            photometric(posterize(&sample.image, rng.random_range(lo..=hi)))
        }
        Op::Equalize => photometric(equalize_blended(&sample.image, cfg.equalize_blend)),
    }
}

/// Full augmentation pass, also reporting which ops ran.
pub fn pipeline_traced(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Sample, Trace) {
    let mut trace = Trace::default();
    let mut out = sample.clone();
    if cfg.preset != Preset::None {
        let mut order = Op::ALL;
        order.shuffle(rng);
        let selected: Vec<Op> = order
            .into_iter()
            .filter(|_| rng.random_bool(cfg.apply_prob))
            .collect();
        for op in selected {
            out = apply_op(op, &out, cfg, rng);
            trace.applied.push(op);
        }
    }
    let out = resize(&out, cfg.output_size, cfg.output_size);
    (out, trace)
}

pub fn pipeline(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    pipeline_traced(sample, cfg, rng).0
}
