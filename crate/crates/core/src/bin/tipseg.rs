use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tipseg::augment::Preset;
use tipseg::config::RunConfig;
use tipseg::imgdata::{read_image, synth_dataset, write_mask, LabelMask, Split, SynthConfig};
use tipseg::lossmetrics::{metrics_csv, metrics_text, MetricsRow};
use tipseg::model::{read_checkpoint, stats_table, Checkpoint, ModelSpec};
use tipseg::run::{
    ablate_augmentation, ablate_backbone, ablation_csv, ablation_text, load_split, train_run, write_metrics,
};
use tipseg::trainer::{evaluate, evaluate_otsu, overlay, predict, segmenter_from_checkpoint};
use tipseg::{Error, Result};

#[derive(Parser)]
#[command(name = "tipseg", version, about = "Fingertip segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config and TIPSEG_DATA_DIR)
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.dataset.dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a split manifest
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured data directory)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Use the high-contrast generator settings instead of [synth]
        #[arg(long)]
        high_contrast: bool,
    },
    /// Train a model and evaluate its best checkpoint on the test split
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        aug: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Model preset
        #[arg(long)]
        model: Option<String>,
        /// Run directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Metrics CSV destination
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Mask destination (defaults to `<image>.pred.png`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a colour overlay here
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Analytic parameter and MAC counts
    Stats {
        #[arg(long, value_delimiter = ',', default_value = "resnet34,resnet50,resnet101,resnext101_32x48d")]
        models: Vec<String>,
        /// CSV destination
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Otsu hand-vs-background baseline
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain across augmentation presets or backbones
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "aug")]
        kind: AblationKind,
        /// Model presets for the backbone ablation
        #[arg(long, value_delimiter = ',', default_value = "resnet34,resnet50,resnet101")]
        models: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Parent directory of the per-variant run directories
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Aug,
    Backbone,
}

fn print_rows(rows: &[MetricsRow], out: Option<&Path>) -> Result<()> {
    print!("{}", metrics_csv(rows));
    eprint!("{}", metrics_text(rows));
    if let Some(path) = out {
        write_metrics(rows, path)?;
    }
    Ok(())
}

fn default_mask_path(image: &Path) -> PathBuf {
    let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.split('.').next().unwrap_or("image");
    image.with_file_name(format!("{stem}.pred.png"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            out,
            n_train,
            n_val,
            n_test,
            high_contrast,
        } => {
            let cfg = common.load()?;
            let synth = if high_contrast {
                SynthConfig {
                    seed: cfg.synth.seed,
                    ..SynthConfig::high_contrast()
                }
            } else {
                cfg.synth.clone()
            };
            let dir = out.unwrap_or_else(|| cfg.data_dir());
            let split = synth_dataset(
                &synth,
                n_train.unwrap_or(cfg.dataset.n_train),
                n_val.unwrap_or(cfg.dataset.n_val),
                n_test.unwrap_or(cfg.dataset.n_test),
                &dir,
            )?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                split.train.len(),
                split.val.len(),
                split.test.len(),
                dir.display()
            );
        }
        Command::Train {
            common,
            aug,
            epochs,
            model,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = aug {
                cfg.augment = tipseg::augment::AugmentConfig::from_preset(p);
                cfg.train.aug = p;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(m) = model {
                cfg.model.preset = m;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = train_run(&cfg)?;
            let h = &outcome.history;
            match (h.first(), h.last()) {
                (Some(f), Some(l)) => println!(
                    "trained {} epochs: train loss {:.5} -> {:.5}, best epoch {:?}",
                    h.len(),
                    f.train_loss,
                    l.train_loss,
                    h.best_epoch
                ),
                _ => println!("trained 0 epochs"),
            }
            if let Some(row) = &outcome.test {
                eprint!("{}", metrics_text(std::slice::from_ref(row)));
            }
            println!("run directory {}", outcome.run_dir.display());
        }
        Command::Eval {
            common,
            ckpt,
            split,
            out,
        } => {
            let seg = segmenter_from_checkpoint(read_checkpoint(&ckpt)?);
            let cfg = common.load()?;
            let samples = load_split(&cfg, split)?;
            let row = evaluate(seg.as_ref(), &samples, split.as_str())?;
            print_rows(&[row], out.as_deref())?;
        }
        Command::Predict {
            ckpt,
            image,
            out,
            overlay: overlay_path,
        } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let img = read_image(&image)?;
            let mask = match ckpt {
                Checkpoint::Model(m) => predict(&m, &img)?,
                Checkpoint::Background => LabelMask::zeros(img.width(), img.height()),
                Checkpoint::Oracle => {
                    return Err(Error::Config("oracle checkpoints need ground truth; use eval".into()))
                }
            };
            let out = out.unwrap_or_else(|| default_mask_path(&image));
            write_mask(&mask, &out)?;
            println!("mask {}", out.display());
            if let Some(path) = overlay_path {
                overlay(&img, &mask)?.save(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                println!("overlay {}", path.display());
            }
        }
        Command::Stats { models, out } => {
            let specs = models
                .iter()
                .map(|m| Ok((m.clone(), ModelSpec::preset(m)?)))
                .collect::<Result<Vec<_>>>()?;
            let table = stats_table(&specs);
            print!("{}", table.to_csv());
            eprint!("{}", table.to_text());
            if let Some(path) = out {
                std::fs::write(&path, table.to_csv()).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Baseline { common, split, out } => {
            let cfg = common.load()?;
            let samples = load_split(&cfg, split)?;
            let (row, skipped) = evaluate_otsu(&samples, split.as_str())?;
            if !skipped.is_empty() {
                eprintln!("skipped {} degenerate images", skipped.len());
            }
            print_rows(&[row], out.as_deref())?;
        }
        Command::Ablate {
            common,
            kind,
            models,
            epochs,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let rows = match kind {
                AblationKind::Aug => ablate_augmentation(&cfg, &Preset::ALL)?,
                AblationKind::Backbone => ablate_backbone(&cfg, &models)?,
            };
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            let path = cfg.output_dir.join("ablation.csv");
            std::fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::Io { path, source: e })?;
            print!("{}", ablation_csv(&rows));
            eprint!("{}", ablation_text(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
