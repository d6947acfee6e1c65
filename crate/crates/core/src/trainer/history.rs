//! Per-epoch loss records and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    fn selection_loss(&self) -> f64 {
        if self.val_loss.is_nan() {
            self.train_loss
        } else {
            self.val_loss
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss so far.
    pub best_epoch: Option<usize>,
}

impl History {
    /// Appends a record; returns whether it is the new best.
    pub fn push(&mut self, record: EpochRecord) -> bool {
        if let Some(last) = self.records.last() {
            assert!(record.epoch > last.epoch, "epoch indices must increase");
        }
        let best = self
            .best_epoch
            .and_then(|e| self.records.iter().find(|r| r.epoch == e))
            .map(EpochRecord::selection_loss);
        let improved = best.is_none_or(|b| record.selection_loss() < b);
        if improved {
            self.best_epoch = Some(record.epoch);
        }
        self.records.push(record);
        improved
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn min_train_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.train_loss).reduce(f64::min)
    }
}

pub const HISTORY_HEADER: [&str; 4] = ["epoch", "train_loss", "val_loss", "seconds"];

pub fn history_csv(history: &History) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER).expect("in-memory write");
    for r in &history.records {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.seconds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

pub fn parse_history_csv(text: &str) -> Result<History> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Validation(format!("history header: {e}")))?;
    if header.iter().ne(HISTORY_HEADER) {
        return Err(Error::Validation(format!("unexpected history header {header:?}")));
    }
    let mut history = History::default();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Validation(format!("history row {}: {e}", n + 1)))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let bad = |i: usize| Error::Validation(format!("history row {}: bad `{}`", n + 1, field(i)));
        let record = EpochRecord {
            epoch: field(0).parse().map_err(|_| bad(0))?,
            train_loss: field(1).parse().map_err(|_| bad(1))?,
            val_loss: field(2).parse().map_err(|_| bad(2))?,
            seconds: field(3).parse().map_err(|_| bad(3))?,
        };
        if history.last().is_some_and(|l| record.epoch <= l.epoch) {
            return Err(Error::Validation("history epochs must increase".into()));
        }
        history.push(record);
    }
    Ok(history)
}

pub fn write_history(history: &History, path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<History> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history_csv(&text)
}
