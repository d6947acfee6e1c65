//! One-vs-rest confusion counts and micro-averaged metrics.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgdata::LabelMask;
use crate::tensor::Tensor;

/// Binary counts for one class against all others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Add for ClassCounts {
    type Output = ClassCounts;

    fn add(self, o: ClassCounts) -> ClassCounts {
        ClassCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Per-class counts; the micro totals are their sums. Merging is
/// component-wise addition, so totals from disjoint images can be combined
/// in any order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTotals {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionTotals {
    pub fn empty(classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn micro(&self) -> ClassCounts {
        self.classes.iter().copied().fold(ClassCounts::default(), Add::add)
    }

    pub fn tp(&self) -> u64 {
        self.micro().tp
    }

    pub fn fp(&self) -> u64 {
        self.micro().fp
    }

    pub fn fn_(&self) -> u64 {
        self.micro().fn_
    }

    pub fn tn(&self) -> u64 {
        self.micro().tn
    }

    /// Pixels covered (each pixel contributes once per class).
    pub fn pixels(&self) -> u64 {
        let m = self.micro();
        match self.classes.len() {
            0 => 0,
            c => (m.tp + m.fp + m.fn_ + m.tn) / c as u64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionTotals) {
        assert_eq!(self.classes.len(), other.classes.len(), "class counts differ");
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            *a = *a + *b;
        }
    }
}

impl AddAssign<&ConfusionTotals> for ConfusionTotals {
    fn add_assign(&mut self, other: &ConfusionTotals) {
        self.merge(other);
    }
}

/// One-vs-rest counts of `pred` against `truth` for labels in `0..classes`.
pub fn confusion(pred: &LabelMask, truth: &LabelMask, classes: usize) -> Result<ConfusionTotals> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut matrix = vec![0u64; classes * classes];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (p, t) = (p as usize, t as usize);
        if p >= classes || t >= classes {
            return Err(Error::Validation(format!(
                "label {} outside 0..{}",
                p.max(t),
                classes - 1
            )));
        }
        matrix[t * classes + p] += 1;
    }
    let n = pred.len() as u64;
    let classes = (0..classes)
        .map(|c| {
            let tp = matrix[c * classes + c];
            let predicted: u64 = (0..classes).map(|t| matrix[t * classes + c]).sum();
            let actual: u64 = matrix[c * classes..(c + 1) * classes].iter().sum();
            let (fp, fn_) = (predicted - tp, actual - tp);
            ClassCounts {
                tp,
                fp,
                fn_,
                tn: n - tp - fp - fn_,
            }
        })
        .collect();
    Ok(ConfusionTotals { classes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
}

/// `num / den`, or 1 when nothing was there to count.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn iou(c: &ClassCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// Micro-averaged metrics from merged totals.
pub fn metrics(totals: &ConfusionTotals) -> MetricsReport {
    let m = totals.micro();
    MetricsReport {
        accuracy: ratio(m.tp + m.tn, m.tp + m.tn + m.fp + m.fn_),
        precision: ratio(m.tp, m.tp + m.fp),
        recall: ratio(m.tp, m.tp + m.fn_),
        f1: ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_),
        // 5PR / (4P + R) written over counts
        f2: ratio(5 * m.tp, 5 * m.tp + 4 * m.fn_ + m.fp),
        miou: iou(&m),
        per_class_iou: totals.classes.iter().map(iou).collect(),
    }
}

/// Per-pixel argmax over channels, one mask per batch item; ties go to the
/// lower class index.
pub fn argmax_mask(map: &Tensor) -> Vec<LabelMask> {
    let [n, c, h, w] = map.shape();
    let hw = h * w;
    (0..n)
        .map(|b| {
            let s = map.sample(b);
            let labels = (0..hw)
                .map(|px| {
                    let mut best = 0;
                    for k in 1..c {
                        if s[k * hw + px] > s[best * hw + px] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::with_classes(w, h, labels, c.max(1)).expect("argmax stays below channel count")
        })
        .collect()
}
