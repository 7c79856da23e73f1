//! `tssan eval`: top-1 and top-5 accuracy of a checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use tssan_core::checkpoint::load_checkpoint;
use tssan_core::train::{accuracy, predict_dataset};

use crate::config::{check_compatible, load_dataset};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the samples to score.
    #[arg(long)]
    data: PathBuf,
    /// Clips per forward pass; defaults to the training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

pub fn run(a: EvalArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.data)?;
    check_compatible(&trainer.model.config, &data, "evaluation data")?;
    let batch = a.batch_size.unwrap_or(trainer.config.train.batch_size);
    let probs = predict_dataset(&trainer.model, &trainer.config.tsn, &data, batch)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let acc = accuracy(&probs, &labels);
    println!("top1={} top5={}", acc.top1, acc.top5);
    Ok(())
}
