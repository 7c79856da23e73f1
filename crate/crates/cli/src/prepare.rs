//! `tssan prepare`: normalized sample files plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tssan_core::dataset::{
    load_sample, make_synthetic_dataset, manifest_path, save_manifest, save_sample, validate_sample, DatasetKind,
    DatasetManifest, LabeledSample, ManifestEntry, SyntheticConfig,
};
use tssan_core::skeleton::{repeat_pad_frames, select_top_people, RawDetections, SkeletonClip, MAX_PERSONS};

/// Kinetics-style clips are padded to this many frames unless overridden.
const KINETICS_FRAMES: usize = 300;

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "input"])))]
pub struct PrepareArgs {
    /// Generate the separable synthetic benchmark.
    #[arg(long)]
    synthetic: bool,
    /// Directory of raw `*.txt` sample files to normalize.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Layout of --input data: ntu or kinetics.
    #[arg(long, default_value = "ntu")]
    kind: DatasetKind,
    /// Label count of --input data; defaults to the largest label plus one.
    #[arg(long)]
    num_labels: Option<usize>,
    /// Repeat clips from their start to this many frames (kinetics default 300).
    #[arg(long)]
    pad_frames: Option<usize>,
    /// Split tag of --input data.
    #[arg(long, default_value = "train")]
    split: String,
    /// Synthetic labels.
    #[arg(long, default_value_t = 4)]
    labels: usize,
    /// Synthetic training samples per label.
    #[arg(long, default_value_t = 50)]
    per_label: usize,
    /// Synthetic validation samples per label; 0 writes no validation split.
    #[arg(long, default_value_t = 0)]
    val_per_label: usize,
    /// Synthetic frames per clip.
    #[arg(long, default_value_t = 48)]
    frames: usize,
    /// Synthetic joints per person.
    #[arg(long, default_value_t = 4)]
    joints: usize,
    /// Synthetic person slots.
    #[arg(long, default_value_t = 2)]
    persons: usize,
    /// Synthetic noise scale.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: PrepareArgs) -> Result<()> {
    if a.synthetic {
        synthetic(&a)
    } else {
        let input = a.input.clone().expect("clap requires --synthetic or --input");
        from_directory(&a, &input)
    }
}

fn print_summary(split: &str, num_labels: usize, entries: &[ManifestEntry]) {
    let mut counts = vec![0usize; num_labels];
    for e in entries {
        counts[e.label] += 1;
    }
    let per_label: Vec<String> = counts.iter().enumerate().map(|(l, n)| format!("{l}:{n}")).collect();
    println!("{split}: {} samples ({})", entries.len(), per_label.join(" "));
}

fn synthetic(a: &PrepareArgs) -> Result<()> {
    let mut cfg = SyntheticConfig {
        num_labels: a.labels,
        samples_per_label: a.per_label,
        frames: a.frames,
        joints: a.joints,
        persons: a.persons,
        noise: a.noise,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let train = make_synthetic_dataset(&cfg, &a.out, "train", &mut rng)?;
    print_summary("train", cfg.num_labels, &train.entries);
    if a.val_per_label > 0 {
        cfg.samples_per_label = a.val_per_label;
        let val = make_synthetic_dataset(&cfg, &a.out, "val", &mut rng)?;
        print_summary("val", cfg.num_labels, &val.entries);
    }
    Ok(())
}

/// Ranks persons by confidence for kinetics data; otherwise keeps the clip.
fn normalize(clip: SkeletonClip, kind: DatasetKind, pad: Option<usize>) -> Result<SkeletonClip> {
    let clip = if kind == DatasetKind::Kinetics {
        let (f, s, j, c) = (clip.frames(), clip.persons(), clip.joints(), clip.coords());
        let tracks = (0..s)
            .map(|p| {
                (0..f)
                    .flat_map(|t| (0..j).flat_map(move |jj| (0..c).map(move |cc| (t, jj, cc))))
                    .map(|(t, jj, cc)| clip.at(t, p, jj, cc))
                    .collect()
            })
            .collect();
        let raw = RawDetections {
            frames: f,
            joints: j,
            coords: c,
            tracks,
        };
        select_top_people(&raw, MAX_PERSONS)?
    } else {
        clip
    };
    Ok(match pad {
        Some(n) => repeat_pad_frames(&clip, n)?,
        None => clip,
    })
}

fn from_directory(a: &PrepareArgs, input: &Path) -> Result<()> {
    if a.kind == DatasetKind::Synthetic {
        bail!("--input reads ntu or kinetics data; use --synthetic to generate synthetic data");
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading input directory {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .txt sample files in {}", input.display());
    }
    let pad = a
        .pad_frames
        .or((a.kind == DatasetKind::Kinetics).then_some(KINETICS_FRAMES));
    let mut samples = Vec::with_capacity(files.len());
    for path in &files {
        let s = load_sample(path)?;
        let clip = normalize(s.clip, a.kind, pad).with_context(|| format!("normalizing {}", path.display()))?;
        samples.push(LabeledSample { clip, ..s });
    }
    let num_labels = match a.num_labels {
        Some(n) => n,
        None => samples.iter().map(|s| s.label).max().unwrap_or(0) + 1,
    };
    for s in &samples {
        validate_sample(s, a.kind, num_labels)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let path = a.out.join(format!("{}_{i:05}.txt", a.split));
        save_sample(s, &path)?;
        entries.push(ManifestEntry { path, label: s.label });
    }
    let manifest = DatasetManifest {
        kind: a.kind,
        num_labels,
        split: a.split.clone(),
        entries,
    };
    save_manifest(&manifest, &manifest_path(&a.out, &a.split))?;
    print_summary(&a.split, num_labels, &manifest.entries);
    Ok(())
}
