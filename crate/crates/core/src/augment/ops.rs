//! Individual geometric and photometric transforms.
//!
//! Geometric ops are inverse warps: every output pixel centre is mapped back
//! into the source, the image is sampled bilinearly and the mask by nearest
//! neighbour, and points outside the source read as intensity 0 / class 0.

use rand::Rng;

use crate::imgdata::{GrayImage, LabelMask, Sample};

use super::AugmentConfig;

/// Pixel-centre coordinates `(x, y)` in the source for an output pixel.
type InverseMap<'a> = dyn Fn(f64, f64) -> Option<(f64, f64)> + 'a;

fn bilinear(img: &GrayImage, sx: f64, sy: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let clamp_x = |x: f64| x.clamp(0.0, (w - 1) as f64) as usize;
    let clamp_y = |y: f64| y.clamp(0.0, (h - 1) as f64) as usize;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    let v = |x, y| img.get(x, y) as f64;
    let top = v(xa, ya) * (1.0 - fx) + v(xb, ya) * fx;
    let bottom = v(xa, yb) * (1.0 - fx) + v(xb, yb) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn inside(w: usize, h: usize, sx: f64, sy: f64) -> bool {
    sx >= -0.5 && sy >= -0.5 && sx <= w as f64 - 0.5 && sy <= h as f64 - 0.5
}

fn nearest_index(v: f64, len: usize) -> usize {
    ((v + 0.5).floor().max(0.0) as usize).min(len - 1)
}

/// Resamples image and mask through `map` onto an `out_w x out_h` grid.
fn warp_sample(sample: &Sample, out_w: usize, out_h: usize, map: &InverseMap) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let mut values = vec![0u8; out_w * out_h];
    let mut labels = vec![0u8; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            if let Some((sx, sy)) = map(x as f64, y as f64) {
                if inside(w, h, sx, sy) {
                    let i = y * out_w + x;
                    values[i] = bilinear(&sample.image, sx, sy).round().clamp(0.0, 255.0) as u8;
                    labels[i] = sample.mask.get(nearest_index(sx, w), nearest_index(sy, h));
                }
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image: GrayImage::new(out_w, out_h, values).expect("non-empty output grid"),
        mask: LabelMask::new(out_w, out_h, labels).expect("labels copied from a valid mask"),
    }
}

/// Rescales to `out_w x out_h`: bilinear for the image, nearest for the mask.
pub fn resize(sample: &Sample, out_w: usize, out_h: usize) -> Sample {
    if sample.width() == out_w && sample.height() == out_h {
        return sample.clone();
    }
    let sx = sample.width() as f64 / out_w as f64;
    let sy = sample.height() as f64 / out_h as f64;
    warp_sample(sample, out_w, out_h, &|x, y| {
        Some(((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5))
    })
}

/// Bilinear resize of an image alone.
pub fn resize_image(image: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let sample = Sample {
        id: String::new(),
        mask: LabelMask::zeros(image.width(), image.height()),
        image: image.clone(),
    };
    resize(&sample, out_w, out_h).image
}

/// Nearest-neighbour resize of a mask alone.
pub fn resize_mask(mask: &LabelMask, out_w: usize, out_h: usize) -> LabelMask {
    let sample = Sample {
        id: String::new(),
        image: GrayImage::filled(mask.width(), mask.height(), 0),
        mask: mask.clone(),
    };
    resize(&sample, out_w, out_h).mask
}

/// Axis-aligned crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

/// Crops `rect`, scales it so its longer side is `out`, and zero-pads the
/// shorter side symmetrically to an `out x out` square.
pub fn crop_resize_pad(sample: &Sample, rect: CropRect, out: usize) -> Sample {
    let scale = out as f64 / rect.width.max(rect.height);
    let content_w = rect.width * scale;
    let content_h = rect.height * scale;
    let off_x = (out as f64 - content_w) / 2.0;
    let off_y = (out as f64 - content_h) / 2.0;
    warp_sample(sample, out, out, &|x, y| {
        let (px, py) = (x + 0.5 - off_x, y + 0.5 - off_y);
        if px < 0.0 || py < 0.0 || px > content_w || py > content_h {
            return None;
        }
        Some((rect.x + px / scale - 0.5, rect.y + py / scale - 0.5))
    })
}

/// Draws an area fraction and aspect ratio from the config and crops a
/// uniformly placed window of that shape.
pub fn random_resized_crop(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let out = cfg.output_size;
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    if sample.width() < 2 || sample.height() < 2 {
        return crop_resize_pad(sample, CropRect { x: 0.0, y: 0.0, width: w, height: h }, out);
    }
    let scale = cfg.crop_scale.sample(rng);
    let aspect = cfg.crop_aspect.sample(rng);
    let area = scale * w * h;
    let cw = (area * aspect).sqrt().min(w);
    let ch = (area / aspect).sqrt().min(h);
    let x = if w > cw { rng.random_range(0.0..=w - cw) } else { 0.0 };
    let y = if h > ch { rng.random_range(0.0..=h - ch) } else { 0.0 };
    crop_resize_pad(sample, CropRect { x, y, width: cw, height: ch }, out)
}

/// Rotates image and mask about the image centre, keeping the canvas size.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    if degrees == 0.0 {
        return sample.clone();
    }
    let (w, h) = (sample.width(), sample.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (s, c) = degrees.to_radians().sin_cos();
    warp_sample(sample, w, h, &|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        Some((c * dx + s * dy + cx, -s * dx + c * dy + cy))
    })
}

pub fn random_rotation(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Sample, f64) {
    let angle = cfg.rotation.sample(rng);
    (rotate(sample, angle), angle)
}

/// Row-major 3x3 projective transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let z = m[6] * x + m[7] * y + m[8];
        if z.abs() < 1e-12 {
            return None;
        }
        Some(((m[0] * x + m[1] * y + m[2]) / z, (m[3] * x + m[4] * y + m[5]) / z))
    }

    /// The transform taking each `src[i]` to `dst[i]`, or `None` when the
    /// correspondence is degenerate.
    pub fn from_points(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Homography> {
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(x, y), &(u, v))) in src.iter().zip(&dst).enumerate() {
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gauss-Jordan with partial pivoting on the augmented 8x9 system
        for col in 0..8 {
            let pivot = (col..8).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
            if a[pivot][col].abs() < 1e-10 {
                return None;
            }
            a.swap(col, pivot);
            let p = a[col][col];
            for k in col..9 {
                a[col][k] /= p;
            }
            for r in 0..8 {
                if r != col {
                    let f = a[r][col];
                    if f != 0.0 {
                        for k in col..9 {
                            a[r][k] -= f * a[col][k];
                        }
                    }
                }
            }
        }
        let h: Vec<f64> = a.iter().map(|row| row[8]).collect();
        Some(Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
    }
}

/// Warps image and mask so that the source corners land on `corners`
/// (top-left, top-right, bottom-right, bottom-left, pixel-centre coordinates).
pub fn warp_perspective(sample: &Sample, corners: [(f64, f64); 4]) -> Option<Sample> {
    let (w, h) = (sample.width(), sample.height());
    let src = image_corners(w, h);
    if corners == src {
        return Some(sample.clone());
    }
    if !is_convex(&corners) {
        return None;
    }
    let inverse = Homography::from_points(corners, src)?;
    Some(warp_sample(sample, w, h, &|x, y| inverse.apply(x, y)))
}

fn image_corners(w: usize, h: usize) -> [(f64, f64); 4] {
    let (r, b) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)]
}

/// Strictly convex, consistently oriented quadrilateral.
fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-6 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Moves each corner inwards by up to `distortion * side / 2` per axis;
/// degenerate draws are redrawn.
pub fn random_perspective(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let d = cfg.perspective_distortion;
    if d == 0.0 {
        return sample.clone();
    }
    let (w, h) = (sample.width(), sample.height());
    let max_dx = d * w as f64 / 2.0;
    let max_dy = d * h as f64 / 2.0;
    let src = image_corners(w, h);
    let inward = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    for _ in 0..16 {
        let corners: [(f64, f64); 4] = std::array::from_fn(|i| {
            let dx = rng.random_range(0.0..=max_dx);
            let dy = rng.random_range(0.0..=max_dy);
            (src[i].0 + inward[i].0 * dx, src[i].1 + inward[i].1 * dy)
        });
        if let Some(out) = warp_perspective(sample, corners) {
            return out;
        }
    }
    sample.clone()
}

/// Normalized 1-D Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &GrayImage, sigma: f64) -> GrayImage {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return image.clone();
    }
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (image.width() as isize, image.height() as isize);
    let src = image.values();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = (x + k as isize - r).clamp(0, w - 1);
                acc += kv * src[(y * w + sx) as usize] as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = (y + k as isize - r).clamp(0, h - 1);
                acc += kv * tmp[(sy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage::new(image.width(), image.height(), out).expect("same dimensions")
}

pub fn random_blur(image: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> GrayImage {
    gaussian_blur(image, cfg.blur_sigma.sample(rng))
}

/// Inverts every value at or above `threshold` (0..=256).
pub fn solarize(image: &GrayImage, threshold: u16) -> GrayImage {
    image.map(|v| if v as u16 >= threshold { 255 - v } else { v })
}

/// Keeps the top `bits` bits of every value (1..=8).
pub fn posterize(image: &GrayImage, bits: u8) -> GrayImage {
    let bits = bits.clamp(1, 8);
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    image.map(|v| v & mask)
}

/// Lookup table for histogram equalization.
pub fn equalize_lut(image: &GrayImage) -> [u8; 256] {
    let hist = image.histogram();
    let total: u64 = hist.iter().sum();
    let mut lut: [u8; 256] = std::array::from_fn(|i| i as u8);
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if total == cdf_min {
        return lut;
    }
    let mut cdf = 0u64;
    for (v, &count) in hist.iter().enumerate() {
        cdf += count;
        let num = cdf.saturating_sub(cdf_min) as f64;
        lut[v] = (num * 255.0 / (total - cdf_min) as f64).round() as u8;
    }
    lut
}

/// Histogram equalization through the cumulative distribution.
pub fn equalize(image: &GrayImage) -> GrayImage {
    let lut = equalize_lut(image);
    image.map(|v| lut[v as usize])
}

/// Equalization mixed with the original at weight `blend` (1 = full).
pub fn equalize_blended(image: &GrayImage, blend: f64) -> GrayImage {
    let lut = equalize_lut(image);
    image.map(|v| {
        let e = lut[v as usize] as f64;
        (blend * e + (1.0 - blend) * v as f64).round().clamp(0.0, 255.0) as u8
    })
}
