//! Whole runs on an on-disk dataset: train, evaluate, ablate.

use std::path::{Path, PathBuf};

use crate::augment::{AugmentConfig, Preset};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imgdata::{load_dataset, Sample, Split};
use crate::lossmetrics::{metrics_csv, MetricsRow};
use crate::model::{load_weights, save_weights, Model};
use crate::trainer::{evaluate, train, History, TrainData};

pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best";
pub const LAST_CHECKPOINT: &str = "last";

/// Everything a finished training run produced.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub history: History,
    /// Test metrics of the checkpoint with the best validation loss; absent
    /// when the dataset has no test split.
    pub test: Option<MetricsRow>,
    pub model: Model,
}

/// Loads one split of the configured dataset, failing with
/// [`Error::Missing`] when the directory or its manifest is absent.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let dir = cfg.data_dir();
    if !dir.is_dir() {
        return Err(Error::Missing(format!("data directory {}", dir.display())));
    }
    load_dataset(&dir, split)
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Trains on the train/val splits, evaluates the best checkpoint on the test
/// split and leaves the frozen config, history, checkpoints and metrics in
/// `cfg.output_dir`.
pub fn train_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = TrainData {
        train: load_split(cfg, Split::Train)?,
        val: load_split(cfg, Split::Val)?,
    };
    let test = load_split(cfg, Split::Test)?;
    let dir = cfg.output_dir.clone();
    cfg.write_frozen(&dir)?;

    let spec = cfg.model.spec()?;
    let mut model = Model::build(&spec, cfg.train.seed)?;
    let aug = AugmentConfig {
        output_size: spec.input_size,
        ..cfg.augment.clone()
    };
    let history = train(&mut model, &data, &cfg.train, &aug, Some(&dir))?;
    save_weights(&model, &dir.join(LAST_CHECKPOINT))?;

    let best = dir.join(BEST_CHECKPOINT);
    let selected = if history.best_epoch.is_some() && best.exists() {
        load_weights(&best, Some(&spec))?
    } else {
        model.clone()
    };
    let row = if test.is_empty() {
        None
    } else {
        let mut row = evaluate(&selected, &test, Split::Test.as_str())?;
        row.model = cfg.model.preset.clone();
        write_metrics(std::slice::from_ref(&row), &dir.join(METRICS_FILE))?;
        Some(row)
    };
    Ok(RunOutcome {
        run_dir: dir,
        history,
        test: row,
        model: selected,
    })
}

/// One row of an ablation summary.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub final_train_loss: f64,
    pub min_train_loss: f64,
    pub test: MetricsRow,
}

pub fn ablation_row(variant: &str, outcome: &RunOutcome) -> Result<AblationRow> {
    let mut test = outcome
        .test
        .clone()
        .ok_or_else(|| Error::Validation("ablations need a test split".into()))?;
    test.model = variant.to_string();
    Ok(AblationRow {
        variant: variant.to_string(),
        final_train_loss: outcome.history.last().map_or(f64::NAN, |r| r.train_loss),
        min_train_loss: outcome.history.min_train_loss().unwrap_or(f64::NAN),
        test,
    })
}

/// Retrains the same configuration once per augmentation preset, each in
/// `output_dir/aug_<preset>`.
pub fn ablate_augmentation(cfg: &RunConfig, presets: &[Preset]) -> Result<Vec<AblationRow>> {
    presets
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.augment = AugmentConfig {
                preset: p,
                ..AugmentConfig::from_preset(p)
            };
            c.train.aug = p;
            c.output_dir = cfg.output_dir.join(format!("aug_{p}"));
            ablation_row(&p.to_string(), &train_run(&c)?)
        })
        .collect()
}

/// Retrains the same configuration once per model preset, each in
/// `output_dir/model_<preset>`.
pub fn ablate_backbone(cfg: &RunConfig, models: &[String]) -> Result<Vec<AblationRow>> {
    models
        .iter()
        .map(|m| {
            let mut c = cfg.clone();
            c.model.preset = m.clone();
            c.output_dir = cfg.output_dir.join(format!("model_{m}"));
            ablation_row(m, &train_run(&c)?)
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "final_train_loss", "min_train_loss", "test_miou", "test_accuracy", "test_f1"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.final_train_loss.to_string(),
            r.min_train_loss.to_string(),
            r.test.report.miou.to_string(),
            r.test.report.accuracy.to_string(),
            r.test.report.f1.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<18}  {:>12}  {:>12}  {:>8}  {:>8}\n",
        "variant", "final_loss", "min_loss", "miou", "accuracy"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18}  {:>12.5}  {:>12.5}  {:>8.4}  {:>8.4}\n",
            r.variant, r.final_train_loss, r.min_train_loss, r.test.report.miou, r.test.report.accuracy
        ));
    }
    out
}
