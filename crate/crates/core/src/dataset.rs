//! Sample files, manifests and the synthetic benchmark generator.
//!
//! A sample file starts with the header `F S J C label` followed by `F·S·J`
//! lines of `C` reals, ordered frame → person → joint. A manifest lists
//! `key=value` header lines (`kind`, `num_labels`, `split`) and then one
//! `path<TAB>label` entry per line, paths relative to the manifest.
//! Both formats accept `#` comments and blank lines.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{SkeletonClip, MAX_PERSONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// 25 joints with xyz coordinates.
    Ntu,
    /// 18 joints with (x, y, confidence).
    Kinetics,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ntu => "ntu",
            Self::Kinetics => "kinetics",
            Self::Synthetic => "synthetic",
        }
    }

    /// Fixed `(joints, coords)` for real datasets.
    pub fn layout(self) -> Option<(usize, usize)> {
        match self {
            Self::Ntu => Some((25, 3)),
            Self::Kinetics => Some((18, 3)),
            Self::Synthetic => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntu" => Ok(Self::Ntu),
            "kinetics" => Ok(Self::Kinetics),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub clip: SkeletonClip,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub num_labels: usize,
    pub split: String,
    /// Entries with paths resolved against the manifest directory.
    pub entries: Vec<ManifestEntry>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with comments stripped, paired with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_field<T: FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {tok:?}")))
}

/// Parses a sample file. The whole file is validated before a sample is returned.
pub fn load_sample(path: &Path) -> Result<LabeledSample> {
    let text = read_text(path)?;
    parse_sample(&text, path)
}

pub fn parse_sample(text: &str, path: &Path) -> Result<LabeledSample> {
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header `F S J C label`"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(parse_err(path, hl, "header must be `F S J C label`"));
    }
    let names = ["frame count", "person count", "joint count", "coordinate count", "label"];
    let mut dims = [0usize; 5];
    for (k, tok) in fields.iter().enumerate() {
        dims[k] = parse_field(path, hl, tok, names[k])?;
    }
    let [frames, persons, joints, coords, label] = dims;
    if frames == 0 || persons == 0 || joints == 0 || coords == 0 {
        return Err(parse_err(path, hl, "extents must be positive"));
    }
    let rows = frames * persons * joints;
    let mut values = Vec::with_capacity(rows * coords);
    let mut last_line = hl;
    for _ in 0..rows {
        let (ln, line) = lines.next().ok_or_else(|| {
            parse_err(path, last_line + 1, format!("truncated: expected {rows} coordinate rows"))
        })?;
        last_line = ln;
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = parse_field(path, ln, tok, "coordinate")?;
            if !v.is_finite() {
                return Err(parse_err(path, ln, format!("non-finite coordinate {tok}")));
            }
            values.push(v);
        }
        if values.len() - before != coords {
            return Err(parse_err(
                path,
                ln,
                format!("expected {coords} values, found {}", values.len() - before),
            ));
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(path, ln, "unexpected data after the last coordinate row"));
    }
    let clip = SkeletonClip::from_positions(frames, persons, joints, coords, values)
        .map_err(|e| parse_err(path, hl, e.to_string()))?;
    Ok(LabeledSample {
        clip,
        label,
        source_id: path.display().to_string(),
    })
}

/// Serializes a sample; values use the shortest representation that parses back exactly.
pub fn format_sample(sample: &LabeledSample) -> String {
    let c = &sample.clip;
    let mut out = format!(
        "{} {} {} {} {}\n",
        c.frames(),
        c.persons(),
        c.joints(),
        c.coords(),
        sample.label
    );
    for row in c.positions().chunks(c.coords()) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn save_sample(sample: &LabeledSample, path: &Path) -> Result<()> {
    fs::write(path, format_sample(sample)).map_err(|e| Error::io(path, e))
}

/// Checks a sample against the manifest's kind and label count.
pub fn validate_sample(sample: &LabeledSample, kind: DatasetKind, num_labels: usize) -> Result<()> {
    let c = &sample.clip;
    if sample.label >= num_labels {
        return Err(Error::Validation(format!(
            "{}: label {} outside [0, {num_labels})",
            sample.source_id, sample.label
        )));
    }
    if c.persons() > MAX_PERSONS {
        return Err(Error::Validation(format!(
            "{}: {} persons exceeds the maximum of {MAX_PERSONS}",
            sample.source_id,
            c.persons()
        )));
    }
    if let Some((j, cc)) = kind.layout() {
        if c.joints() != j || c.coords() != cc {
            return Err(Error::Validation(format!(
                "{}: {} data needs J={j} C={cc}, found J={} C={}",
                sample.source_id,
                kind.as_str(),
                c.joints(),
                c.coords()
            )));
        }
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut kind = None;
    let mut num_labels = None;
    let mut split = None;
    let mut entries = Vec::new();
    for (ln, line) in content_lines(&text) {
        if let Some((p, label)) = line.split_once('\t') {
            let label: usize = parse_field(path, ln, label.trim(), "label")?;
            let rel = PathBuf::from(p.trim());
            entries.push((ln, ManifestEntry { path: base.join(rel), label }));
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(path, ln, "expected `key=value` or `path<TAB>label`"));
        };
        if !entries.is_empty() {
            return Err(parse_err(path, ln, "header keys must precede sample entries"));
        }
        let value = value.trim();
        match key.trim() {
            "kind" => kind = Some(value.parse().map_err(|e: Error| parse_err(path, ln, e.to_string()))?),
            "num_labels" => num_labels = Some(parse_field(path, ln, value, "label count")?),
            "split" => split = Some(value.to_string()),
            other => return Err(parse_err(path, ln, format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| parse_err(path, 1, format!("missing header key {k:?}"));
    let kind = kind.ok_or_else(|| missing("kind"))?;
    let num_labels: usize = num_labels.ok_or_else(|| missing("num_labels"))?;
    let split = split.ok_or_else(|| missing("split"))?;
    if num_labels == 0 {
        return Err(Error::Validation("num_labels must be positive".into()));
    }
    for (ln, e) in &entries {
        if e.label >= num_labels {
            return Err(Error::Validation(format!(
                "{}:{ln}: label {} outside [0, {num_labels})",
                path.display(),
                e.label
            )));
        }
        if !e.path.is_file() {
            return Err(Error::Validation(format!(
                "{}:{ln}: sample file {} does not exist",
                path.display(),
                e.path.display()
            )));
        }
    }
    Ok(DatasetManifest {
        kind,
        num_labels,
        split,
        entries: entries.into_iter().map(|(_, e)| e).collect(),
    })
}

/// Writes a manifest whose entry paths are stored relative to its directory when possible.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = format!(
        "kind={}\nnum_labels={}\nsplit={}\n",
        manifest.kind.as_str(),
        manifest.num_labels,
        manifest.split
    );
    for e in &manifest.entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(out, "{}\t{}", p.display(), e.label).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A manifest with every sample parsed and validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub num_labels: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let s = load_sample(&e.path)?;
            if s.label != e.label {
                return Err(Error::Validation(format!(
                    "{}: file label {} disagrees with manifest label {}",
                    s.source_id, s.label, e.label
                )));
            }
            validate_sample(&s, manifest.kind, manifest.num_labels)?;
            samples.push(s);
        }
        Ok(Self {
            kind: manifest.kind,
            num_labels: manifest.num_labels,
            samples,
        })
    }

    pub fn from_samples(kind: DatasetKind, num_labels: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        for s in &samples {
            validate_sample(s, kind, num_labels)?;
        }
        Ok(Self {
            kind,
            num_labels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts indexed by label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Parameters of the synthetic benchmark.
///
/// Every label owns a joint trajectory with its own direction and frequency.
/// `noise` scales all per-sample variation, so zero noise makes every sample
/// of a label follow the same trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_labels: usize,
    pub samples_per_label: usize,
    pub frames: usize,
    pub joints: usize,
    pub persons: usize,
    pub coords: usize,
    pub noise: f64,
    /// Chance that a second person performs the same action alongside the first.
    pub second_person_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_labels: 4,
            samples_per_label: 50,
            frames: 48,
            joints: 4,
            persons: 2,
            coords: 3,
            noise: 0.1,
            second_person_prob: 0.5,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            self.num_labels,
            self.samples_per_label,
            self.frames,
            self.joints,
            self.persons,
            self.coords,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic dataset extents must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("synthetic clips need at least 2 frames".into()));
        }
        if self.persons > MAX_PERSONS {
            return Err(Error::Config(format!("at most {MAX_PERSONS} persons")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.second_person_prob) {
            return Err(Error::Config("second_person_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the synthetic samples in memory, grouped by label.
pub fn synthetic_samples<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let (f, s_max, j_n, c_n) = (cfg.frames, cfg.persons, cfg.joints, cfg.coords);
    let mut out = Vec::with_capacity(cfg.num_labels * cfg.samples_per_label);
    for label in 0..cfg.num_labels {
        let theta = PI * label as f64 / cfg.num_labels as f64;
        let dir = [theta.cos(), theta.sin(), 0.5 * (2.0 * theta).cos()];
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let dir = dir.map(|d| d / norm);
        let freq = 1.0 + (label % 3) as f64;
        for i in 0..cfg.samples_per_label {
            let amp = 1.0 + cfg.noise * gauss(rng);
            let phase = cfg.noise * PI * gauss(rng);
            let present: Vec<bool> = (0..s_max)
                .map(|s| s == 0 || rng.random_bool(cfg.second_person_prob))
                .collect();
            let base: Vec<f64> = (0..s_max * j_n * c_n)
                .map(|k| {
                    let (s, j, c) = (k / (j_n * c_n), (k / c_n) % j_n, k % c_n);
                    let anchor = match c {
                        0 => 0.3 * j as f64 + s as f64,
                        1 => 0.1 * (j % 2) as f64,
                        _ => 0.0,
                    };
                    anchor + cfg.noise * gauss(rng)
                })
                .collect();
            let mut positions = vec![0.0; f * s_max * j_n * c_n];
            for t in 0..f {
                let u = t as f64 / (f - 1) as f64;
                for s in (0..s_max).filter(|&s| present[s]) {
                    for j in 0..j_n {
                        let reach = 1.0 + 0.2 * j as f64 / j_n as f64;
                        let wave = (2.0 * PI * freq * u + 0.4 * j as f64 + phase).sin();
                        for c in 0..c_n {
                            let k = (s * j_n + j) * c_n + c;
                            positions[t * s_max * j_n * c_n + k] = base[k]
                                + amp * reach * wave * dir[c % 3]
                                + 0.5 * cfg.noise * gauss(rng);
                        }
                    }
                }
            }
            let valid = present.clone();
            let clip = SkeletonClip::new(f, s_max, j_n, c_n, positions, valid)?;
            out.push(LabeledSample {
                clip,
                label,
                source_id: format!("synthetic-{label}-{i}"),
            });
        }
    }
    Ok(out)
}

/// Generates the synthetic benchmark and persists it under `out_dir` as
/// `<split>_<index>.txt` sample files plus `<split>.manifest`.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    out_dir: &Path,
    split: &str,
    rng: &mut R,
) -> Result<DatasetManifest> {
    let samples = synthetic_samples(cfg, rng)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let path = out_dir.join(format!("{split}_{i:05}.txt"));
        save_sample(s, &path)?;
        entries.push(ManifestEntry { path, label: s.label });
    }
    let manifest = DatasetManifest {
        kind: DatasetKind::Synthetic,
        num_labels: cfg.num_labels,
        split: split.to_string(),
        entries,
    };
    save_manifest(&manifest, &manifest_path(out_dir, split))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest"))
}
