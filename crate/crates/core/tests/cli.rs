use std::path::Path;
use std::process::{Command, Output};

use tipseg::imgdata::{read_mask, read_splits, IMAGE_SUFFIX};
use tipseg::model::{save_stub, CheckpointKind};

fn tipseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tipseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("TIPSEG_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn gen_small(dir: &Path, data: &str) {
    let out = tipseg(
        &["gen-data", "--out", data, "--n-train", "8", "--n-val", "2", "--n-test", "2"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path, body: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        format!(
            "[model]\npreset = \"resnext_tiny\"\n[train]\nbatch_size = 4\ncheckpoint_every = 1\n{body}"
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn gen_data_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    let data = dir.path().join("data");
    let split = read_splits(&data).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (8, 2, 2));
    let images = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(IMAGE_SUFFIX))
        .count();
    assert_eq!(images, 12);
}

#[test]
fn bad_config_key_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[synth]\nfinger_count = 5\n").unwrap();
    let out = tipseg(&["gen-data", "--config", "bad.toml", "--out", "data"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tipseg(&["stats", "--bogus"], dir.path())), 2);
}

#[test]
fn stats_defaults_and_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = tipseg(&["stats"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 4 * 4);
    assert!(text.contains("resnet34,encoder,21278400,"));
    assert!(text.contains("resnext101_32x48d,head,1161,"));

    let out = tipseg(&["stats", "--models", "resnet34", "--out", "stats.csv"], dir.path());
    assert_eq!(code(&out), 0);
    let rows: Vec<String> = stdout(&out).lines().skip(1).map(str::to_string).collect();
    assert!(rows.iter().all(|r| r.starts_with("resnet34,")));
    assert_eq!(rows.len(), 4);
    assert!(dir.path().join("stats.csv").exists());
    assert_eq!(code(&tipseg(&["stats", "--models", "vgg16"], dir.path())), 2);
}

#[test]
fn eval_of_oracle_stub_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    save_stub(CheckpointKind::Oracle, &dir.path().join("oracle.ckpt")).unwrap();
    let out = tipseg(
        &["eval", "--ckpt", "oracle.ckpt", "--split", "test", "--data", "data", "--out", "m.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    for name in ["accuracy", "precision", "recall", "f1", "f2", "miou"] {
        let i = header.iter().position(|h| *h == name).unwrap();
        assert_eq!(row[i].parse::<f64>().unwrap(), 1.0, "{name}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("m.csv")).unwrap(), text);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tipseg(&["eval", "--ckpt", "absent", "--data", "."], dir.path())), 3);
    save_stub(CheckpointKind::Background, &dir.path().join("bg")).unwrap();
    assert_eq!(code(&tipseg(&["eval", "--ckpt", "bg", "--data", "nowhere"], dir.path())), 3);
    assert_eq!(code(&tipseg(&["train", "--data", "nowhere", "--epochs", "1"], dir.path())), 3);
}

#[test]
fn baseline_matches_eval_schema_and_skips_flat_images() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    save_stub(CheckpointKind::Background, &dir.path().join("bg")).unwrap();
    let flat = tipseg::imgdata::Sample::new(
        "flat",
        tipseg::imgdata::GrayImage::filled(16, 16, 90),
        tipseg::imgdata::LabelMask::zeros(16, 16),
    )
    .unwrap();
    let data = dir.path().join("data");
    tipseg::imgdata::save_sample(&flat, &data).unwrap();
    let mut split = read_splits(&data).unwrap();
    split.test.push("flat".into());
    tipseg::imgdata::write_splits(&split, &data).unwrap();

    let base = tipseg(&["baseline", "--split", "test", "--data", "data"], dir.path());
    assert_eq!(code(&base), 0, "{}", String::from_utf8_lossy(&base.stderr));
    assert!(String::from_utf8_lossy(&base.stderr).contains("skipped 1"));
    let eval = tipseg(&["eval", "--ckpt", "bg", "--data", "data"], dir.path());
    assert_eq!(code(&eval), 0);
    let head = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    assert_eq!(head(&base), head(&eval));
    assert!(stdout(&base).lines().nth(1).unwrap().starts_with("otsu,test,2,"));
}

#[test]
fn train_zero_epochs_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    let cfg = tiny_config(dir.path(), "");
    let out = tipseg(
        &["train", "--config", &cfg, "--data", "data", "--epochs", "0", "--out", "run0"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run0");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(run.join("config.toml").exists());
    assert!(run.join("metrics.csv").exists());

    let image = dir.path().join("data").join(format!("s000000{IMAGE_SUFFIX}"));
    let image = image.display().to_string();
    let args = ["predict", "--ckpt", "run0/last", "--image", &image, "--out", "p.png", "--overlay", "o.png"];
    assert_eq!(code(&tipseg(&args, dir.path())), 0);
    let first = std::fs::read(dir.path().join("p.png")).unwrap();
    let mask = read_mask(&dir.path().join("p.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (256, 256));
    assert!(mask.labels().iter().all(|&l| l <= 8));
    let ov = image::open(dir.path().join("o.png")).unwrap();
    assert_eq!((ov.width(), ov.height()), (256, 256));
    assert_eq!(code(&tipseg(&args, dir.path())), 0);
    assert_eq!(std::fs::read(dir.path().join("p.png")).unwrap(), first);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    let cfg = tiny_config(dir.path(), "learning_rate = 0.01\n");
    for aug in ["none", "full"] {
        let run = format!("run_{aug}");
        let out = tipseg(
            &["train", "--config", &cfg, "--data", "data", "--epochs", "2", "--aug", aug, "--out", &run],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let run = dir.path().join(run);
        for f in ["config.toml", "history.csv", "metrics.csv", "ckpt_0", "ckpt_1", "best", "last"] {
            assert!(run.join(f).exists(), "{f}");
        }
        let frozen = tipseg::config::RunConfig::load(&run.join("config.toml")).unwrap();
        assert_eq!(frozen.train.epochs, 2);
        assert_eq!(frozen.augment.preset.to_string(), aug);
        let history = tipseg::trainer::read_history(&run.join("history.csv")).unwrap();
        assert_eq!(history.len(), 2);
    }
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "data");
    save_stub(CheckpointKind::Oracle, &dir.path().join("oracle")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tipseg"))
        .args(["eval", "--ckpt", "oracle", "--split", "val"])
        .current_dir(dir.path())
        .env("TIPSEG_DATA_DIR", dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().nth(1).unwrap().starts_with("oracle,val,2,"));
}
