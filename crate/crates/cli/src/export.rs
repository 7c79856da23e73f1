//! `tssan export-attention`: attention maps of one sample as CSV and PGM.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tssan_core::checkpoint::load_checkpoint;
use tssan_core::consensus::{build_batch, ts_forward_batch};
use tssan_core::dataset::load_sample;
use tssan_tensor::Tape;

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample file to run in evaluation mode.
    #[arg(long)]
    sample: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Export every layer instead of only the last.
    #[arg(long, conflicts_with = "layer")]
    all_layers: bool,
    /// 0-based layer to export; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    /// 0-based head to export; defaults to all heads.
    #[arg(long)]
    head: Option<usize>,
    /// 0-based temporal segment.
    #[arg(long, default_value_t = 0)]
    segment: usize,
    /// 0-based person, for branches that attend per person.
    #[arg(long, default_value_t = 0)]
    person: usize,
    /// Heatmap pixels per attention entry.
    #[arg(long, default_value_t = 1)]
    scale: usize,
}

pub fn run(a: ExportArgs) -> Result<()> {
    if a.scale == 0 {
        bail!("--scale must be positive");
    }
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = &trainer.model;
    let tsn = &trainer.config.tsn;
    let sample = load_sample(&a.sample)?;
    let clip = &sample.clip;
    let want = (model.config.persons, model.config.joints, model.config.coords);
    if (clip.persons(), clip.joints(), clip.coords()) != want {
        bail!(
            "sample has (persons, joints, coords) = {:?}, the model expects {want:?}",
            (clip.persons(), clip.joints(), clip.coords())
        );
    }
    if sample.label >= model.config.num_labels {
        bail!("sample label {} is out of range for {} labels", sample.label, model.config.num_labels);
    }
    if a.segment >= tsn.segments {
        bail!("--segment {} is out of range for {} segments", a.segment, tsn.segments);
    }
    // Evaluation draws no random numbers.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_batch(&[clip], tsn, false, &mut rng)?;
    let mut tape = Tape::new();
    let out = ts_forward_batch(model, &mut tape, batch, tsn, false, &mut rng)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let max_persons = out.traces.iter().map(|t| t.per_item).max().unwrap_or(1);
    if a.person >= max_persons {
        bail!("--person {} is out of range for {max_persons} attended persons", a.person);
    }
    let mut written = 0;
    for trace in &out.traces {
        let per_item = trace.per_item;
        let layers = trace.probs.len();
        let chosen: Vec<usize> = match (a.all_layers, a.layer) {
            (true, _) => (0..layers).collect(),
            (false, Some(l)) if l < layers => vec![l],
            (false, Some(l)) => bail!("--layer {l} is out of range for {layers} layers"),
            (false, None) => vec![layers - 1],
        };
        // Branches over all persons at once have one sequence per segment.
        let seq = a.segment * per_item + if per_item > 1 { a.person } else { 0 };
        for l in chosen {
            let p = tape.value(trace.probs[l]);
            let (heads, f) = (p.shape()[1], p.shape()[2]);
            let heads_out: Vec<usize> = match a.head {
                Some(h) if h < heads => vec![h],
                Some(h) => bail!("--head {h} is out of range for {heads} heads"),
                None => (0..heads).collect(),
            };
            for h in heads_out {
                let off = (seq * heads + h) * f * f;
                let m = &p.data()[off..off + f * f];
                let person = if per_item > 1 { format!("_p{}", a.person) } else { String::new() };
                let stem = format!("{}_seg{}{person}_layer{l}_head{h}", trace.branch, a.segment);
                write_csv(&a.out.join(format!("{stem}.csv")), m, f)?;
                write_pgm(&a.out.join(format!("{stem}.pgm")), m, f, a.scale)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} attention maps to {}", a.out.display());
    Ok(())
}

fn write_csv(path: &Path, m: &[f64], f: usize) -> Result<()> {
    let mut s = String::new();
    for row in m.chunks(f) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", cells.join(","))?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Plain-text grayscale heatmap; the largest entry is white.
fn write_pgm(path: &Path, m: &[f64], f: usize, scale: usize) -> Result<()> {
    let max = m.iter().cloned().fold(0.0, f64::max);
    let side = f * scale;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for y in 0..side {
        let row: Vec<String> = (0..side)
            .map(|x| {
                let v = m[(y / scale) * f + x / scale];
                let b = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
                (b as u8).to_string()
            })
            .collect();
        writeln!(s, "{}", row.join(" "))?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
