//! Run configuration: a TOML file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tssan_core::consensus::{Consensus, TsnConfig};
use tssan_core::dataset::{load_manifest, Dataset};
use tssan_core::encoder::EncoderKind;
use tssan_core::model::{Variant, VariantConfig};
use tssan_core::train::{ExperimentConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Take persons, joints, coordinates and label count from the training data.
    pub infer_shapes: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            infer_shapes: true,
        }
    }
}

/// Everything a training run reads: data paths plus the experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: VariantConfig,
    pub tsn: TsnConfig,
    pub train: TrainConfig,
}

/// Flags that override individual configuration keys.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Training manifest.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation manifest, evaluated after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Network topology: v1, v2 or v3.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Per-frame encoder: ff or cnn.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Temporal segments per clip.
    #[arg(long)]
    pub segments: Option<usize>,
    /// Segment fusion: avg or max.
    #[arg(long)]
    pub consensus: Option<Consensus>,
    /// Frames sampled from each segment; also sizes the position table.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Self-attention layers per block.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-joint width of the feed-forward encoder.
    #[arg(long)]
    pub ff_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Stale epochs before the learning rate is halved.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Seed for initialization, shuffling, augmentation and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if o.train.is_some() {
            self.data.train.clone_from(&o.train);
        }
        if o.val.is_some() {
            self.data.val.clone_from(&o.val);
        }
        set(&mut self.model.variant, &o.variant);
        set(&mut self.model.encoder, &o.encoder);
        set(&mut self.tsn.segments, &o.segments);
        set(&mut self.tsn.consensus, &o.consensus);
        if let Some(f) = o.frames {
            self.tsn.frames_per_segment = f;
            self.model.max_frames = self.model.max_frames.max(f);
        }
        set(&mut self.model.layers, &o.layers);
        set(&mut self.model.heads, &o.heads);
        set(&mut self.model.ff_width, &o.ff_width);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.train.lr, &o.lr);
        set(&mut self.train.weight_decay, &o.weight_decay);
        set(&mut self.train.plateau_patience, &o.patience);
        set(&mut self.train.seed, &o.seed);
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            tsn: self.tsn.clone(),
            train: self.train.clone(),
        }
    }

    /// Copies clip extents and the label count from `data` into the model.
    pub fn infer_shapes(&mut self, data: &Dataset) -> Result<()> {
        let Some(first) = data.samples.first() else {
            bail!("training data is empty");
        };
        let c = &first.clip;
        self.model.persons = c.persons();
        self.model.joints = c.joints();
        self.model.coords = c.coords();
        self.model.num_labels = data.num_labels;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the effective configuration")
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    Dataset::load(&manifest).with_context(|| format!("loading samples of {}", path.display()))
}

/// Rejects data whose clip extents or labels the model cannot take.
pub fn check_compatible(model: &VariantConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.num_labels > model.num_labels {
        bail!(
            "{what} has {} labels but the model predicts {}",
            data.num_labels,
            model.num_labels
        );
    }
    for s in &data.samples {
        let c = &s.clip;
        let got = (c.persons(), c.joints(), c.coords());
        let want = (model.persons, model.joints, model.coords);
        if got != want {
            bail!(
                "{what}: sample {} has (persons, joints, coords) = {got:?}, the model expects {want:?}",
                s.source_id
            );
        }
    }
    Ok(())
}
