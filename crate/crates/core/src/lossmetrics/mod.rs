//! Soft Jaccard loss, one-vs-rest confusion totals, micro-averaged metrics
//! and the Otsu baseline.

mod confusion;
mod jaccard;
mod otsu;

pub use confusion::{argmax_mask, confusion, metrics, ClassCounts, ConfusionTotals, MetricsReport};
pub use jaccard::{
    soft_jaccard_grad, soft_jaccard_logits, soft_jaccard_loss, softmax, softmax_backward,
    JACCARD_EPS,
};
pub use otsu::{between_class_score, otsu_level, otsu_level_from_histogram, otsu_threshold};

use std::fmt::Write as _;

use crate::NUM_CLASSES;

/// One line of a metrics table: what was evaluated and the resulting report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub split: String,
    pub images: usize,
    pub totals: ConfusionTotals,
    pub report: MetricsReport,
}

impl MetricsRow {
    pub fn new(model: impl Into<String>, split: impl Into<String>, images: usize, totals: ConfusionTotals) -> Self {
        let report = metrics(&totals);
        Self {
            model: model.into(),
            split: split.into(),
            images,
            totals,
            report,
        }
    }

    fn fields(&self) -> Vec<String> {
        let m = self.totals.micro();
        let r = &self.report;
        let mut out = vec![
            self.model.clone(),
            self.split.clone(),
            self.images.to_string(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tn.to_string(),
        ];
        out.extend([r.accuracy, r.precision, r.recall, r.f1, r.f2, r.miou].map(|v| format!("{v:.6}")));
        out.extend((0..NUM_CLASSES).map(|c| {
            r.per_class_iou
                .get(c)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default()
        }));
        out
    }
}

pub fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "model", "split", "images", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1",
        "f2", "miou",
    ]
    .map(String::from)
    .to_vec();
    h.extend((0..NUM_CLASSES).map(|c| format!("iou_{c}")));
    h
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(metrics_header()).expect("in-memory write");
    for r in rows {
        w.write_record(r.fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

pub fn metrics_text(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{} [{}] images={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4} f2={:.4} miou={:.4}",
            r.model, r.split, r.images, m.accuracy, m.precision, m.recall, m.f1, m.f2, m.miou
        );
    }
    out
}
