//! Parametric synthetic hand images with fingertip ground truth.
//!
//! A hand is a palm ellipse with a wrist and four finger capsules fanned
//! above it. The distal `fingertip_fraction` of each capsule is the
//! fingertip region and carries a ridge-like texture. Classes 1-4 are the
//! left index..little fingertips, 5-8 the right ones.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_sample, write_splits, GrayImage, LabelMask, Sample, SplitSet};
use crate::error::{Error, Result};

/// Closed interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::Config(format!(
                "{name}: range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }
}

impl From<[f64; 2]> for Range {
    fn from([min, max]: [f64; 2]) -> Self {
        Self { min, max }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Probability that a sample shows a right hand.
    pub hand_side_prob: f64,
    pub finger_length_range: Range,
    pub finger_width_range: Range,
    /// Distal fraction of each finger labelled as fingertip.
    pub fingertip_fraction: f64,
    /// Degrees.
    pub global_rotation_range: Range,
    pub background_kind: BackgroundKind,
    /// Offset added to the whole image.
    pub illumination_range: Range,
    pub background_level_range: Range,
    pub hand_level_range: Range,
    /// Extra brightness of fingertips over the rest of the hand.
    pub tip_contrast: f64,
    pub ridge_amplitude: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 256,
            image_height: 256,
            hand_side_prob: 0.5,
            finger_length_range: Range::new(60.0, 90.0),
            finger_width_range: Range::new(18.0, 26.0),
            fingertip_fraction: 0.3,
            global_rotation_range: Range::new(-30.0, 30.0),
            background_kind: BackgroundKind::Gradient,
            illumination_range: Range::new(-20.0, 20.0),
            background_level_range: Range::new(30.0, 100.0),
            hand_level_range: Range::new(130.0, 180.0),
            tip_contrast: 20.0,
            ridge_amplitude: 14.0,
            noise_amplitude: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Brightly lit fingertips over a dark scene and a dim hand.
    pub fn high_contrast() -> Self {
        Self {
            background_kind: BackgroundKind::Flat,
            illumination_range: Range::new(-5.0, 5.0),
            background_level_range: Range::new(30.0, 50.0),
            hand_level_range: Range::new(60.0, 80.0),
            tip_contrast: 140.0,
            ridge_amplitude: 8.0,
            noise_amplitude: 3.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width < 32 || self.image_height < 32 {
            return Err(Error::Config("synthetic images must be at least 32x32".into()));
        }
        if !(0.0..=1.0).contains(&self.hand_side_prob) {
            return Err(Error::Config("hand_side_prob must lie in [0, 1]".into()));
        }
        if !(self.fingertip_fraction > 0.0 && self.fingertip_fraction < 1.0) {
            return Err(Error::Config("fingertip_fraction must lie in (0, 1)".into()));
        }
        for (name, r) in [
            ("finger_length_range", &self.finger_length_range),
            ("finger_width_range", &self.finger_width_range),
            ("global_rotation_range", &self.global_rotation_range),
            ("illumination_range", &self.illumination_range),
            ("background_level_range", &self.background_level_range),
            ("hand_level_range", &self.hand_level_range),
        ] {
            r.validate(name)?;
        }
        if self.finger_width_range.min < 4.0 || self.finger_length_range.min < self.finger_width_range.max {
            return Err(Error::Config(
                "fingers must be at least 4 px wide and longer than they are wide".into(),
            ));
        }
        for (name, v) in [
            ("tip_contrast", self.tip_contrast),
            ("ridge_amplitude", self.ridge_amplitude),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Vec2 {
    x: f64,
    y: f64,
}

impl Vec2 {
    fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// A capsule from `base` along unit `dir` for `length`, radius `radius`.
#[derive(Clone, Copy, Debug)]
struct Finger {
    base: Vec2,
    dir: Vec2,
    length: f64,
    radius: f64,
    class: u8,
}

impl Finger {
    /// Axial position in `[0, 1]` when inside the capsule.
    fn axial(&self, p: Vec2) -> Option<f64> {
        let rel = p.sub(self.base);
        let t = rel.dot(self.dir).clamp(0.0, self.length);
        let closest = self.base.add(self.dir.scale(t));
        (p.sub(closest).norm() <= self.radius).then(|| rel.dot(self.dir) / self.length)
    }

    fn tip(&self) -> Vec2 {
        self.base.add(self.dir.scale(self.length))
    }
}

struct Hand {
    palm_center: Vec2,
    palm_axes: (f64, f64),
    rotation: f64,
    wrist_half_width: f64,
    fingers: Vec<Finger>,
}

impl Hand {
    fn in_palm(&self, p: Vec2) -> bool {
        let local = p.sub(self.palm_center).rotate(-self.rotation);
        let (a, b) = self.palm_axes;
        let ellipse = (local.x / a).powi(2) + (local.y / b).powi(2) <= 1.0;
        // wrist: a band from the palm centre downwards (in hand coordinates)
        let wrist = local.y >= 0.0 && local.x.abs() <= self.wrist_half_width;
        ellipse || wrist
    }
}

fn draw_hand(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Hand {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let right = rng.random_bool(cfg.hand_side_prob);
    let rotation = cfg.global_rotation_range.sample(rng).to_radians();
    let widths: Vec<f64> = (0..4).map(|_| cfg.finger_width_range.sample(rng)).collect();
    let spacing = widths.iter().cloned().fold(0.0, f64::max) * 1.15;
    let palm_a = 2.0 * spacing + 2.0;
    let palm_b = 0.8 * palm_a;
    let palm_center = Vec2::new(
        w * 0.5 + rng.random_range(-0.06..=0.06) * w,
        h * 0.74 + rng.random_range(-0.05..=0.05) * h,
    );
    // index, middle, ring, little
    let length_scale = [0.92, 1.0, 0.95, 0.78];
    let fan_deg: [f64; 4] = [-4.0, -1.5, 1.5, 4.0];
    let mut fingers = Vec::with_capacity(4);
    for slot in 0..4 {
        // slot 0 is the leftmost finger in the image
        let finger = if right { slot } else { 3 - slot };
        let class = if right { 5 + finger as u8 } else { 1 + finger as u8 };
        let offset_x = (slot as f64 - 1.5) * spacing;
        let base_local = Vec2::new(offset_x, -palm_b * 0.55);
        let fan = (fan_deg[slot] * 2.5 + rng.random_range(-2.0..=2.0)).to_radians();
        let dir_local = Vec2::new(0.0, -1.0).rotate(fan);
        let length = cfg.finger_length_range.sample(rng) * length_scale[finger];
        fingers.push(Finger {
            base: palm_center.add(base_local.rotate(rotation)),
            dir: dir_local.rotate(rotation),
            length,
            radius: widths[finger] * 0.5,
            class,
        });
    }
    Hand {
        palm_center,
        palm_axes: (palm_a, palm_b),
        rotation,
        wrist_half_width: palm_a * 0.6,
        fingers,
    }
}

fn fits(hand: &Hand, cfg: &SynthConfig) -> bool {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    hand.fingers.iter().all(|f| {
        let t = f.tip();
        let m = f.radius + 2.0;
        t.x >= m && t.x <= w - m && t.y >= m && t.y <= h - m
    })
}

fn background_value(cfg: &SynthConfig, level: f64, grad_dir: Vec2, x: f64, y: f64, rng: &mut ChaCha8Rng) -> f64 {
    match cfg.background_kind {
        BackgroundKind::Flat => level,
        BackgroundKind::Gradient => {
            let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
            let u = (Vec2::new(x / w - 0.5, y / h - 0.5)).dot(grad_dir);
            level + 60.0 * u
        }
        BackgroundKind::Speckle => level + rng.random_range(-35.0..=35.0),
    }
}

/// Deterministic sample for `(cfg.seed, index)`.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let mut hand = None;
    for _ in 0..64 {
        let candidate = draw_hand(cfg, &mut rng);
        if fits(&candidate, cfg) {
            hand = Some(candidate);
            break;
        }
    }
    let hand = hand.ok_or_else(|| {
        Error::Config(format!(
            "fingers do not fit a {}x{} image; reduce finger_length_range",
            cfg.image_width, cfg.image_height
        ))
    })?;

    let (w, h) = (cfg.image_width, cfg.image_height);
    let bg_level = cfg.background_level_range.sample(&mut rng);
    let hand_level = cfg.hand_level_range.sample(&mut rng);
    let illumination = cfg.illumination_range.sample(&mut rng);
    let grad_dir = Vec2::new(1.0, 0.0).rotate(rng.random_range(0.0..std::f64::consts::TAU));
    let ridge_period = rng.random_range(3.5..=5.0);
    let shading = Vec2::new(1.0, 0.0).rotate(rng.random_range(0.0..std::f64::consts::TAU));
    let tip_start = 1.0 - cfg.fingertip_fraction;

    let mut values = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut label = 0u8;
            let mut on_hand = hand.in_palm(p);
            let mut tip_texture = 0.0;
            for f in &hand.fingers {
                if let Some(t) = f.axial(p) {
                    on_hand = true;
                    if t >= tip_start {
                        label = f.class;
                        let centre = f.tip().sub(f.dir.scale(f.length * 0.15));
                        let r = p.sub(centre).norm();
                        tip_texture = (std::f64::consts::TAU * r / ridge_period).sin();
                    }
                }
            }
            let noise = if cfg.noise_amplitude > 0.0 {
                rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude)
            } else {
                0.0
            };
            let base = if on_hand {
                let shade = 12.0 * p.sub(hand.palm_center).dot(shading) / w as f64;
                let mut v = hand_level + shade;
                if label != 0 {
                    v += cfg.tip_contrast + cfg.ridge_amplitude * tip_texture;
                }
                v
            } else {
                background_value(cfg, bg_level, grad_dir, p.x, p.y, &mut rng)
            };
            values.push((base + illumination + noise).round().clamp(0.0, 255.0) as u8);
            labels.push(label);
        }
    }
    Sample::new(
        format!("s{index:06}"),
        GrayImage::new(w, h, values)?,
        LabelMask::new(w, h, labels)?,
    )
}

/// Writes `n_train + n_val + n_test` samples and the split manifest to `out_dir`.
///
/// Sample indices run consecutively: train first, then val, then test.
pub fn synth_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<SplitSet> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut split = SplitSet::default();
    let mut index = 0u64;
    for (count, list) in [
        (n_train, &mut split.train),
        (n_val, &mut split.val),
        (n_test, &mut split.test),
    ] {
        for _ in 0..count {
            let sample = synth_sample(cfg, index)?;
            save_sample(&sample, out_dir)?;
            list.push(sample.id);
            index += 1;
        }
    }
    write_splits(&split, out_dir)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgdata::class_histogram;

    fn components_of(mask: &LabelMask, class: u8) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for start in 0..w * h {
            if seen[start] || mask.labels()[start] != class {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |nx: usize, ny: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && mask.labels()[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
        }
        count
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_sample(&cfg, 7).unwrap(), synth_sample(&cfg, 7).unwrap());
        assert_ne!(synth_sample(&cfg, 7).unwrap(), synth_sample(&cfg, 8).unwrap());
    }

    #[test]
    fn forced_left_hand() {
        let cfg = SynthConfig {
            hand_side_prob: 0.0,
            ..SynthConfig::default()
        };
        for i in 0..10 {
            let s = synth_sample(&cfg, i).unwrap();
            assert!(s.mask.labels().iter().all(|&l| l <= 4));
        }
    }

    #[test]
    fn hundred_samples_have_five_labels_each_connected() {
        let cfg = SynthConfig::default();
        for i in 0..100 {
            let s = synth_sample(&cfg, i).unwrap();
            let labels = s.mask.label_set();
            assert_eq!(labels.len(), 5, "sample {i}: {labels:?}");
            assert_eq!(labels[0], 0);
            let left = labels[1..].iter().all(|&l| (1..=4).contains(&l));
            let right = labels[1..].iter().all(|&l| (5..=8).contains(&l));
            assert!(left ^ right, "sample {i} mixes hands: {labels:?}");
            for &c in &labels[1..] {
                assert_eq!(components_of(&s.mask, c), 1, "sample {i} class {c}");
            }
            let hist = class_histogram(&s.mask);
            assert_eq!(hist.iter().sum::<u64>(), (s.width() * s.height()) as u64);
        }
    }

    #[test]
    fn tips_are_brighter_than_background_on_average() {
        let cfg = SynthConfig::default();
        let (mut tip, mut tip_n, mut bg, mut bg_n) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..20 {
            let s = synth_sample(&cfg, i).unwrap();
            for (&v, &l) in s.image.values().iter().zip(s.mask.labels()) {
                if l == 0 {
                    bg += v as f64;
                    bg_n += 1.0;
                } else {
                    tip += v as f64;
                    tip_n += 1.0;
                }
            }
        }
        assert!(tip / tip_n > bg / bg_n + 30.0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SynthConfig {
            fingertip_fraction: 1.0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_sample(&cfg, 0), Err(Error::Config(_))));
        let cfg = SynthConfig {
            finger_width_range: Range::new(30.0, 20.0),
            ..SynthConfig::default()
        };
        assert!(synth_sample(&cfg, 0).is_err());
    }
}
