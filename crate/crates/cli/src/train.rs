//! `tssan train`: epochs of training with per-epoch validation and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use tssan_core::checkpoint::{load_checkpoint, save_checkpoint};
use tssan_core::train::Trainer;
use tssan_core::Error;

use crate::config::{check_compatible, load_dataset, Overrides, RunConfig};
use crate::Diverged;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for config.toml, metrics.log, timing.log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its model and schedule replace the configured ones.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn run(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&a.overrides);
    let train_path = cfg.data.train.clone().context("no training manifest: pass --train or set data.train")?;
    let val_path = cfg.data.val.clone().context("no validation manifest: pass --val or set data.val")?;
    let train = load_dataset(&train_path)?;
    let val = load_dataset(&val_path)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = load_checkpoint(p).with_context(|| format!("resuming from {}", p.display()))?;
            if let Some(e) = a.overrides.epochs {
                t.config.train.epochs = e;
            }
            cfg.model = t.config.model.clone();
            cfg.tsn = t.config.tsn.clone();
            cfg.train = t.config.train.clone();
            t
        }
        None => {
            if cfg.data.infer_shapes {
                cfg.infer_shapes(&train)?;
            }
            Trainer::new(cfg.experiment())?
        }
    };
    check_compatible(&cfg.model, &train, "training data")?;
    check_compatible(&cfg.model, &val, "validation data")?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;

    // The metrics log is rebuilt from the checkpoint history so a resumed run
    // ends with the same file as an uninterrupted one.
    let metrics_path = a.out.join("metrics.log");
    let mut metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    for r in &trainer.history {
        writeln!(metrics, "{}", r.log_line())?;
    }
    let timing_path = a.out.join("timing.log");
    let mut timing = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&timing_path)
        .with_context(|| format!("opening {}", timing_path.display()))?;

    let mut best = trainer.history.iter().map(|r| r.top1).fold(f64::NEG_INFINITY, f64::max);
    while trainer.epoch < trainer.config.train.epochs {
        let record = trainer.run_epoch(&train, &val).map_err(|e| match e {
            Error::Divergence { .. } => anyhow::Error::new(Diverged(e)),
            other => anyhow::Error::new(other),
        })?;
        writeln!(metrics, "{}", record.log_line())?;
        metrics.flush()?;
        writeln!(timing, "{}", record.timing_line())?;
        println!("{}", record.log_line());
        save_checkpoint(&trainer, &a.out.join("last.ckpt"))?;
        if record.top1 > best {
            best = record.top1;
            save_checkpoint(&trainer, &a.out.join("best.ckpt"))?;
        }
    }
    Ok(())
}
