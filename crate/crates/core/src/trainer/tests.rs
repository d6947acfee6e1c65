use super::*;
use crate::imgdata::{synth_sample, SynthConfig};
use crate::lossmetrics::metrics;
use crate::model::{BackboneSpec, BlockFamily, DecoderSpec, ModelSpec};

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec {
            family: BlockFamily::ResnetBasic,
            stage_blocks: [1, 1, 1, 1],
            cardinality: 1,
            base_width: 64,
            planes: 8,
            in_channels: 1,
            stem_channels: 8,
        },
        decoder: DecoderSpec {
            pyramid_channels: 16,
            segmentation_channels: 8,
            norm_groups: 4,
            ..DecoderSpec::default()
        },
        num_classes: crate::NUM_CLASSES,
        input_size: 64,
    }
}

fn data(n_train: u64, n_val: u64) -> TrainData {
    let cfg = SynthConfig::default();
    TrainData {
        train: (0..n_train).map(|i| synth_sample(&cfg, i).unwrap()).collect(),
        val: (n_train..n_train + n_val).map(|i| synth_sample(&cfg, i).unwrap()).collect(),
    }
}

fn quick(epochs: usize, lr: f64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size,
        aug: Preset::Minimal,
        ..TrainConfig::default()
    }
}

/// A model whose head is non-zero, so that outputs depend on the features.
fn perturbed(seed: u64) -> Model {
    let mut model = Model::build(&tiny_spec(), seed).unwrap();
    model.visit_mut("", &mut |name, p| {
        if name.starts_with("head") {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f32 - 5.0) * 0.05;
            }
        }
    });
    model
}

fn weights(model: &Model, prefix: &str) -> Vec<f32> {
    let mut out = Vec::new();
    model.visit("", &mut |name, p| {
        if p.trainable && name.starts_with(prefix) {
            out.extend_from_slice(&p.value);
        }
    });
    out
}

#[test]
fn momentum_accumulates() {
    let mut w = [0.0f32];
    let mut v = [0.0f32];
    sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
    assert!((w[0] + 0.1).abs() < 1e-7);
    sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
    assert!((w[0] + 0.29).abs() < 1e-6);
    assert!((v[0] + 0.19).abs() < 1e-6);
}

#[test]
fn plain_sgd_without_momentum() {
    let mut w = [1.0f32, 2.0];
    let mut v = [0.0f32; 2];
    sgd_step(&mut w, &[0.5, -1.0], &mut v, 0.2, 0.0).unwrap();
    assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - 2.2).abs() < 1e-6);
}

#[test]
fn zero_rate_only_decays_velocity() {
    let mut w = [1.0f32];
    let mut v = [0.5f32];
    sgd_step(&mut w, &[123.0], &mut v, 0.0, 0.9).unwrap();
    assert!((v[0] - 0.45).abs() < 1e-7);
    assert!((w[0] - 1.45).abs() < 1e-6);
}

#[test]
fn sgd_rejects_mismatched_lengths() {
    let mut w = [0.0f32; 2];
    let mut v = [0.0f32; 1];
    assert!(matches!(
        sgd_step(&mut w, &[0.0; 2], &mut v, 0.1, 0.9),
        Err(Error::Shape(_))
    ));
}

fn record(epoch: usize, train_loss: f64, val_loss: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss,
        val_loss,
        seconds: 0.125,
    }
}

#[test]
fn empty_history_is_header_only() {
    let text = history_csv(&History::default());
    assert_eq!(text.trim_end(), "epoch,train_loss,val_loss,seconds");
    assert!(parse_history_csv(&text).unwrap().is_empty());
}

#[test]
fn history_csv_round_trips() {
    let mut h = History::default();
    h.push(record(0, 0.9, 0.8));
    h.push(record(1, 0.1 + 0.2, 0.7000000000000001));
    h.push(record(2, 1.0 / 3.0, 0.75));
    let text = history_csv(&h);
    assert_eq!(text.lines().count(), 4);
    let back = parse_history_csv(&text).unwrap();
    assert_eq!(back, h);
    assert_eq!(back.best_epoch, Some(1));
}

#[test]
fn missing_validation_falls_back_to_train_loss() {
    let mut h = History::default();
    assert!(h.push(record(0, 0.5, f64::NAN)));
    assert!(!h.push(record(1, 0.6, f64::NAN)));
    assert!(h.push(record(2, 0.4, f64::NAN)));
    let back = parse_history_csv(&history_csv(&h)).unwrap();
    assert!(back.records[0].val_loss.is_nan());
    assert_eq!(back.best_epoch, Some(2));
}

#[test]
fn malformed_history_is_rejected() {
    assert!(parse_history_csv("a,b\n1,2\n").is_err());
    assert!(parse_history_csv("epoch,train_loss,val_loss,seconds\n0,x,1,1\n").is_err());
    assert!(parse_history_csv("epoch,train_loss,val_loss,seconds\n1,0,0,0\n1,0,0,0\n").is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(quick(1, -1.0, 8).validate().is_err());
    assert!(quick(1, 0.1, 0).validate().is_err());
    let bad = TrainConfig {
        momentum: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(toml::from_str::<TrainConfig>("learning_rate = 0.1\nwarmup = 3\n").is_err());
    let cfg: TrainConfig = toml::from_str("epochs = 4\naug = \"none\"\n").unwrap();
    assert_eq!((cfg.epochs, cfg.aug, cfg.batch_size), (4, Preset::None, 8));
}

#[test]
fn input_is_centred_and_replicated() {
    let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
    let x = to_input(&[&img], 3).unwrap();
    assert_eq!(x.shape(), [1, 3, 1, 2]);
    assert_eq!(x.sample(0), &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    assert!(to_input(&[], 1).is_err());
}

#[test]
fn frozen_training_leaves_model_and_loss_unchanged() {
    let d = data(4, 2);
    let mut model = perturbed(5);
    let before = crate::model::checkpoint::checkpoint_bytes(&model);
    let cfg = TrainConfig {
        aug: Preset::None,
        ..quick(3, 0.0, 1)
    };
    let h = train(&mut model, &d, &cfg, &AugmentConfig::none(), None).unwrap();
    assert_eq!(crate::model::checkpoint::checkpoint_bytes(&model), before);
    let first = h.first().unwrap();
    for r in &h.records {
        assert!((r.train_loss - first.train_loss).abs() < 1e-12);
        assert_eq!(r.val_loss, first.val_loss);
    }
}

#[test]
fn training_is_deterministic_and_bounded() {
    let d = data(6, 2);
    let run = || {
        let mut model = perturbed(1);
        let cfg = quick(2, 1e-2, 3);
        let h = train(&mut model, &d, &cfg, &AugmentConfig::minimal(), None).unwrap();
        (h, weights(&model, ""))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(wa, wb);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.train_loss, x.val_loss), (y.train_loss, y.val_loss));
        assert!((0.0..=1.0).contains(&x.train_loss) && (0.0..=1.0).contains(&x.val_loss));
    }
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn one_step_moves_the_head() {
    let d = data(2, 0);
    let mut model = Model::build(&tiny_spec(), 2).unwrap();
    let head = weights(&model, "head");
    let encoder = weights(&model, "encoder");
    let h = train(&mut model, &d, &quick(1, 1e-3, 2), &AugmentConfig::none(), None).unwrap();
    assert_ne!(weights(&model, "head"), head);
    // the zero head blocks the first gradient; the second reaches the encoder
    assert_eq!(weights(&model, "encoder"), encoder);
    train(&mut model, &d, &quick(1, 1e-3, 2), &AugmentConfig::none(), None).unwrap();
    assert_ne!(weights(&model, "encoder"), encoder);
    assert!(h.last().unwrap().val_loss.is_nan());
}

#[test]
fn run_directory_receives_history_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(2, 1);
    let mut model = Model::build(&tiny_spec(), 3).unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick(2, 1e-3, 2)
    };
    let h = train(&mut model, &d, &cfg, &AugmentConfig::none(), Some(dir.path())).unwrap();
    assert_eq!(read_history(&dir.path().join("history.csv")).unwrap(), h);
    assert!(dir.path().join("ckpt_1").exists());
    assert!(!dir.path().join("ckpt_0").exists());
    assert!(dir.path().join("best").exists());
}

#[test]
fn zero_epochs_give_empty_history() {
    let d = data(1, 0);
    let mut model = Model::build(&tiny_spec(), 0).unwrap();
    let h = train(&mut model, &d, &quick(0, 1e-3, 1), &AugmentConfig::none(), None).unwrap();
    assert!(h.is_empty());
    let empty = TrainData {
        train: Vec::new(),
        val: Vec::new(),
    };
    assert!(train(&mut model, &empty, &quick(1, 1e-3, 1), &AugmentConfig::none(), None).is_err());
}

#[test]
fn diverging_loss_is_numerical_error() {
    assert!(matches!(check_finite(f64::NAN, 0, 0), Err(Error::Numerical(_))));
    assert!(check_finite(0.5, 0, 0).is_ok());
}

#[test]
fn oracle_and_background_rows() {
    let d = data(3, 0);
    let oracle = evaluate(&Oracle, &d.train, "test").unwrap();
    let r = &oracle.report;
    assert_eq!(
        (r.accuracy, r.precision, r.recall, r.f1, r.f2, r.miou),
        (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    );
    let bg = evaluate(&Background, &d.train, "test").unwrap();
    let pixels: u64 = d.train.iter().map(|s| s.mask.len() as u64).sum();
    let background: u64 = d
        .train
        .iter()
        .map(|s| s.mask.labels().iter().filter(|&&l| l == 0).count() as u64)
        .sum();
    assert_eq!(bg.totals.classes[0].tp, background);
    assert_eq!(bg.totals.tp(), background);
    let acc = background as f64 / pixels as f64;
    assert!((bg.report.miou - acc / (2.0 - acc)).abs() < 1e-12);
    assert!(evaluate(&Oracle, &[], "test").is_err());
}

#[test]
fn evaluation_merges_before_dividing() {
    // a perfect 1-pixel image and a fully wrong 9-pixel image
    let small = Sample::new(
        "a",
        GrayImage::filled(1, 1, 0),
        LabelMask::new(1, 1, vec![0]).unwrap(),
    )
    .unwrap();
    let large = Sample::new(
        "b",
        GrayImage::filled(3, 3, 0),
        LabelMask::new(3, 3, vec![1; 9]).unwrap(),
    )
    .unwrap();
    let row = evaluate(&Background, &[small.clone(), large.clone()], "test").unwrap();
    let per_image: Vec<f64> = [small, large]
        .iter()
        .map(|s| evaluate(&Background, std::slice::from_ref(s), "test").unwrap().report.miou)
        .collect();
    let mean = per_image.iter().sum::<f64>() / 2.0;
    assert_eq!(per_image, vec![1.0, 0.0]);
    // micro over 10 pixels: 1 of 10 correct -> iou = 1 / 19
    assert!((row.report.miou - 1.0 / 19.0).abs() < 1e-12);
    assert!((row.report.miou - mean).abs() > 0.4);
    assert_eq!(row.report, metrics(&row.totals));
}

#[test]
fn model_predictions_keep_input_resolution() {
    let model = perturbed(4);
    let d = data(2, 0);
    let masks = model.segment(&d.train).unwrap();
    for (m, s) in masks.iter().zip(&d.train) {
        assert_eq!((m.width(), m.height()), (s.width(), s.height()));
        assert!(m.labels().iter().all(|&l| (l as usize) < crate::NUM_CLASSES));
    }
    let single = predict(&model, &d.train[0].image).unwrap();
    assert_eq!(single, masks[0]);
}

#[test]
fn otsu_skips_constant_images() {
    let cfg = SynthConfig::high_contrast();
    let mut samples: Vec<Sample> = (0..3).map(|i| synth_sample(&cfg, i).unwrap()).collect();
    samples.push(Sample::new("flat", GrayImage::filled(8, 8, 40), LabelMask::zeros(8, 8)).unwrap());
    let (row, skipped) = evaluate_otsu(&samples, "test").unwrap();
    assert_eq!(skipped, vec!["flat".to_string()]);
    assert_eq!(row.images, 3);
    assert_eq!(row.totals.num_classes(), 2);
}

#[test]
fn overlay_tints_labelled_pixels() {
    let img = GrayImage::new(2, 1, vec![100, 100]).unwrap();
    let mask = LabelMask::new(2, 1, vec![0, 1]).unwrap();
    let out = overlay(&img, &mask).unwrap();
    assert_eq!(out.dimensions(), (2, 1));
    assert_eq!(out.get_pixel(0, 0).0, [100, 100, 100]);
    assert_eq!(out.get_pixel(1, 0).0, [165, 62, 87]);
    assert!(overlay(&img, &LabelMask::zeros(1, 1)).is_err());
}
