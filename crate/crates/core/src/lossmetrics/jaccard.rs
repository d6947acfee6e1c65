//! Soft Jaccard loss over one-hot targets, summed over classes and pixels.

use crate::error::{Error, Result};
use crate::imgdata::LabelMask;
use crate::tensor::Tensor;

/// Smoothing term added to intersection and union.
pub const JACCARD_EPS: f64 = 1e-7;

fn check_targets(probs: &Tensor, targets: &[LabelMask]) -> Result<()> {
    if targets.len() != probs.n() {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            probs.n()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.width() != probs.w() || t.height() != probs.h() {
            return Err(Error::Shape(format!(
                "target {i} is {}x{}, map is {}x{}",
                t.width(),
                t.height(),
                probs.w(),
                probs.h()
            )));
        }
        if let Some(&bad) = t.labels().iter().find(|&&l| l as usize >= probs.c()) {
            return Err(Error::Shape(format!(
                "target {i} has label {bad} but the map has {} channels",
                probs.c()
            )));
        }
    }
    Ok(())
}

/// Total probability mass, soft intersection, target mass.
fn sums(probs: &Tensor, targets: &[LabelMask]) -> (f64, f64, f64) {
    let hw = probs.plane_len();
    let mut mass = 0.0;
    let mut inter = 0.0;
    for (n, t) in targets.iter().enumerate() {
        let s = probs.sample(n);
        mass += s.iter().map(|&v| v as f64).sum::<f64>();
        for (i, &l) in t.labels().iter().enumerate() {
            inter += s[l as usize * hw + i] as f64;
        }
    }
    (mass, inter, (targets.len() * hw) as f64)
}

/// `1 - (I + eps) / (U + eps)` with `I = sum p*t` and `U = sum p + sum t - I`.
pub fn soft_jaccard_loss(probs: &Tensor, targets: &[LabelMask], eps: f64) -> Result<f64> {
    check_targets(probs, targets)?;
    let (mass, inter, target_mass) = sums(probs, targets);
    let union = mass + target_mass - inter;
    Ok(1.0 - (inter + eps) / (union + eps))
}

/// Loss and its gradient with respect to `probs`.
pub fn soft_jaccard_grad(probs: &Tensor, targets: &[LabelMask], eps: f64) -> Result<(f64, Tensor)> {
    check_targets(probs, targets)?;
    let (mass, inter, target_mass) = sums(probs, targets);
    let u = mass + target_mass - inter + eps;
    let i = inter + eps;
    let loss = 1.0 - i / u;
    // dL/dp = -(t*u - i*(1 - t)) / u^2
    let on = (-1.0 / u) as f32;
    let off = (i / (u * u)) as f32;
    let [n, c, h, w] = probs.shape();
    let mut grad = Tensor::zeros(n, c, h, w);
    let hw = h * w;
    for (b, t) in targets.iter().enumerate() {
        let g = grad.sample_mut(b);
        g.fill(off);
        for (px, &l) in t.labels().iter().enumerate() {
            g[l as usize * hw + px] = on;
        }
    }
    Ok((loss, grad))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = logits.clone();
    for b in 0..n {
        let s = out.sample_mut(b);
        for px in 0..hw {
            let max = (0..c).map(|k| s[k * hw + px]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for k in 0..c {
                let e = (s[k * hw + px] - max).exp();
                s[k * hw + px] = e;
                total += e;
            }
            let inv = 1.0 / total;
            for k in 0..c {
                s[k * hw + px] *= inv;
            }
        }
    }
    out
}

/// Back-propagates `grad_probs` through the softmax that produced `probs`.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(n, c, h, w);
    for b in 0..n {
        let (p, g, o) = (probs.sample(b), grad_probs.sample(b), out.sample_mut(b));
        for px in 0..hw {
            let dot: f32 = (0..c).map(|k| p[k * hw + px] * g[k * hw + px]).sum();
            for k in 0..c {
                let i = k * hw + px;
                o[i] = p[i] * (g[i] - dot);
            }
        }
    }
    out
}

/// Loss on `softmax(logits)` and its gradient with respect to the logits.
pub fn soft_jaccard_logits(logits: &Tensor, targets: &[LabelMask], eps: f64) -> Result<(f64, Tensor)> {
    let probs = softmax(logits);
    let (loss, grad) = soft_jaccard_grad(&probs, targets, eps)?;
    Ok((loss, softmax_backward(&probs, &grad)))
}
