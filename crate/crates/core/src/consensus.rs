//! Temporal segments: split a clip into `K` spans, run one shared network on
//! a fixed-length sample of each span and fuse the per-span probabilities.
//!
//! Fusion works in the log domain. Average consensus is
//! `log(mean_k p_k) = logsumexp_k(log p_k) − ln K`; max consensus takes the
//! element-wise max of `log p_k` and renormalizes with a log-softmax.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tssan_tensor::{GroupReduce, Tape, TensorError, Var};

use crate::error::{Error, Result};
use crate::model::{combine_heads, BranchTrace, ClipBatch, Model};
use crate::skeleton::{
    center_crop, compute_motion, random_crop, resample_sequence, MotionClip, SkeletonClip,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for Consensus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avg" | "average" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown consensus {other:?}, expected avg or max")),
        }
    }
}

/// How training clips are cut from a segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSampling {
    /// Random crop with ratio in `[0.5, 1]`, then resample.
    #[default]
    RandomWindow,
    /// The evaluation center crop, then resample.
    Uniform,
}

/// Where the training loss is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Negative log of the fused probability of the true label.
    #[default]
    Fused,
    /// Mean cross-entropy of every segment's logits.
    PerSegment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsnConfig {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub consensus: Consensus,
    pub train_sampling: TrainSampling,
    pub eval_crop_ratio: f64,
    pub loss: LossTarget,
}

impl Default for TsnConfig {
    fn default() -> Self {
        Self {
            segments: 3,
            frames_per_segment: 32,
            consensus: Consensus::Avg,
            train_sampling: TrainSampling::RandomWindow,
            eval_crop_ratio: 0.9,
            loss: LossTarget::Fused,
        }
    }
}

impl TsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("at least one segment is required".into()));
        }
        if self.frames_per_segment < 2 {
            return Err(Error::Config("segments must be sampled to at least 2 frames".into()));
        }
        if !(self.eval_crop_ratio > 0.0 && self.eval_crop_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "eval crop ratio {} outside (0, 1]",
                self.eval_crop_ratio
            )));
        }
        Ok(())
    }
}

/// Splits frames into `k` contiguous spans; the first `F mod k` spans get one
/// extra frame.
pub fn segment_spans(frames: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || frames < k {
        return Err(Error::Input(format!("cannot split {frames} frames into {k} segments")));
    }
    let (base, extra) = (frames / k, frames % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let span = (start, start + len);
            start += len;
            span
        })
        .collect())
}

pub fn segment_video(clip: &SkeletonClip, k: usize) -> Result<Vec<SkeletonClip>> {
    segment_spans(clip.frames(), k)?
        .into_iter()
        .map(|(a, b)| clip.window(a, b - a))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingMode {
    RandomWindow,
    Uniform { ratio: f64 },
}

/// Crops a segment and resamples it to exactly `n` frames.
pub fn sample_segment_frames(
    sub: &SkeletonClip,
    n: usize,
    mode: SamplingMode,
    rng: &mut dyn RngCore,
) -> Result<SkeletonClip> {
    let cropped = match mode {
        SamplingMode::RandomWindow => random_crop(sub, rng)?,
        SamplingMode::Uniform { ratio } => center_crop(sub, ratio)?,
    };
    if cropped.frames() == 1 {
        // A single frame carries no trajectory to interpolate; hold it.
        let f = cropped.frame(0).to_vec();
        let data = f.repeat(n);
        return SkeletonClip::new(
            n,
            cropped.persons(),
            cropped.joints(),
            cropped.coords(),
            data,
            cropped.valid_mask().to_vec(),
        );
    }
    resample_sequence(&cropped, n)
}

impl TsnConfig {
    fn mode(&self, training: bool) -> SamplingMode {
        match (training, self.train_sampling) {
            (true, TrainSampling::RandomWindow) => SamplingMode::RandomWindow,
            _ => SamplingMode::Uniform {
                ratio: self.eval_crop_ratio,
            },
        }
    }
}

/// Samples every segment of every clip; items are clip-major, segment-minor.
/// Motion is derived from each sampled segment.
pub fn build_batch(
    clips: &[&SkeletonClip],
    tsn: &TsnConfig,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<ClipBatch> {
    let mode = tsn.mode(training);
    let mut items: Vec<(SkeletonClip, MotionClip)> = Vec::with_capacity(clips.len() * tsn.segments);
    for clip in clips {
        for seg in segment_video(clip, tsn.segments)? {
            let sampled = sample_segment_frames(&seg, tsn.frames_per_segment, mode, rng)?;
            let motion = compute_motion(&sampled)?;
            items.push((sampled, motion));
        }
    }
    ClipBatch::new(&items)
}

/// Fuses `B·K × L` segment logits into `B × L` log-probabilities.
pub fn fuse(tape: &mut Tape, logits: Var, k: usize, consensus: Consensus) -> Result<Var, TensorError> {
    let logp = tape.log_softmax(logits);
    match consensus {
        Consensus::Avg => {
            let lse = tape.reduce_groups(logp, k, GroupReduce::LogSumExp)?;
            Ok(tape.add_scalar(lse, -(k as f64).ln()))
        }
        Consensus::Max => {
            let m = tape.reduce_groups(logp, k, GroupReduce::Max)?;
            Ok(tape.log_softmax(m))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TsOutput {
    /// Per head, `B × L` fused log-probabilities.
    pub fused: Vec<Var>,
    /// Per head, `B·K × L` segment logits.
    pub segment_logits: Vec<Var>,
    pub traces: Vec<BranchTrace>,
    pub batch: ClipBatch,
}

/// Runs the shared network over all segments of `clips` and fuses per head.
pub fn ts_forward(
    model: &Model,
    tape: &mut Tape,
    clips: &[&SkeletonClip],
    tsn: &TsnConfig,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<TsOutput> {
    tsn.validate()?;
    let batch = build_batch(clips, tsn, training, rng)?;
    ts_forward_batch(model, tape, batch, tsn, training, rng)
}

/// [`ts_forward`] on an already sampled batch of `B·K` segment clips.
pub fn ts_forward_batch(
    model: &Model,
    tape: &mut Tape,
    batch: ClipBatch,
    tsn: &TsnConfig,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<TsOutput> {
    if !batch.items.is_multiple_of(tsn.segments) {
        return Err(Error::Input(format!(
            "{} segment clips do not split into groups of {}",
            batch.items, tsn.segments
        )));
    }
    let out = model.forward(tape, &batch, training, rng)?;
    let fused = out
        .logits
        .iter()
        .map(|&l| fuse(tape, l, tsn.segments, tsn.consensus))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TsOutput {
        fused,
        segment_logits: out.logits,
        traces: out.traces,
        batch,
    })
}

/// Summed loss over heads for the true `labels`.
pub fn ts_loss(tape: &mut Tape, out: &TsOutput, labels: &[usize], target: LossTarget, segments: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(out.fused.len());
    match target {
        LossTarget::Fused => {
            for &f in &out.fused {
                terms.push(tape.nll(f, labels)?);
            }
        }
        LossTarget::PerSegment => {
            let repeated: Vec<usize> = labels
                .iter()
                .flat_map(|&y| std::iter::repeat_n(y, segments))
                .collect();
            for &l in &out.segment_logits {
                terms.push(tape.cross_entropy(l, &repeated)?);
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Fused class probabilities of every clip, combined over heads as the
/// model configuration selects.
pub fn fused_probabilities(tape: &Tape, model: &Model, out: &TsOutput) -> Vec<Vec<f64>> {
    let per_head: Vec<Vec<Vec<f64>>> = out
        .fused
        .iter()
        .map(|&v| {
            let t = tape.value(v);
            let l = t.shape()[1];
            t.data().chunks(l).map(|r| r.iter().map(|x| x.exp()).collect()).collect()
        })
        .collect();
    let clips = per_head[0].len();
    (0..clips)
        .map(|i| {
            let heads: Vec<Vec<f64>> = per_head.iter().map(|h| h[i].clone()).collect();
            combine_heads(&heads, model.config.inference_head)
        })
        .collect()
}
