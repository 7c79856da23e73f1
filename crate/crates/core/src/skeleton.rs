//! Skeleton clips, motion derivation and frame-axis augmentation.

use rand::Rng;
use tssan_tensor::Tensor;

use crate::error::{Error, Result};

/// Upper bound on persons kept per clip for both dataset kinds.
pub const MAX_PERSONS: usize = 2;

/// Joint coordinates for up to `persons` people over `frames` frames.
///
/// Values are stored frame → person → joint → coordinate. Padded persons are
/// all zero and flagged invalid in `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonClip {
    frames: usize,
    persons: usize,
    joints: usize,
    coords: usize,
    positions: Vec<f64>,
    valid: Vec<bool>,
}

/// Frame-to-frame joint differences; same layout as [`SkeletonClip`].
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip(pub SkeletonClip);

impl SkeletonClip {
    pub fn new(
        frames: usize,
        persons: usize,
        joints: usize,
        coords: usize,
        positions: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if frames == 0 || persons == 0 || joints == 0 || coords == 0 {
            return Err(Error::Input(format!(
                "clip extents must be positive, got F={frames} S={persons} J={joints} C={coords}"
            )));
        }
        if positions.len() != frames * persons * joints * coords {
            return Err(Error::Input(format!(
                "expected {} values for F={frames} S={persons} J={joints} C={coords}, got {}",
                frames * persons * joints * coords,
                positions.len()
            )));
        }
        if valid.len() != persons {
            return Err(Error::Input(format!(
                "person mask has {} entries for {persons} persons",
                valid.len()
            )));
        }
        if let Some(v) = positions.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate {v}")));
        }
        let clip = Self {
            frames,
            persons,
            joints,
            coords,
            positions,
            valid,
        };
        for s in 0..persons {
            if !clip.valid[s] && clip.person_has_data(s) {
                return Err(Error::Input(format!(
                    "person {s} is marked padded but has nonzero coordinates"
                )));
            }
        }
        Ok(clip)
    }

    /// Builds a clip and marks every person with any nonzero coordinate valid.
    pub fn from_positions(
        frames: usize,
        persons: usize,
        joints: usize,
        coords: usize,
        positions: Vec<f64>,
    ) -> Result<Self> {
        let mut clip = Self::new(
            frames,
            persons,
            joints,
            coords,
            vec![0.0; positions.len()],
            vec![false; persons],
        )?;
        clip.positions = positions;
        if let Some(v) = clip.positions.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate {v}")));
        }
        clip.refresh_mask();
        Ok(clip)
    }

    pub fn zeros(frames: usize, persons: usize, joints: usize, coords: usize) -> Result<Self> {
        Self::new(
            frames,
            persons,
            joints,
            coords,
            vec![0.0; frames * persons * joints * coords],
            vec![false; persons],
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    /// Total joints across persons, `S · J`.
    pub fn total_joints(&self) -> usize {
        self.persons * self.joints
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    fn frame_len(&self) -> usize {
        self.persons * self.joints * self.coords
    }

    fn person_len(&self) -> usize {
        self.joints * self.coords
    }

    pub fn at(&self, t: usize, s: usize, j: usize, c: usize) -> f64 {
        self.positions[((t * self.persons + s) * self.joints + j) * self.coords + c]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.positions[t * n..(t + 1) * n]
    }

    fn person_has_data(&self, s: usize) -> bool {
        (0..self.frames).any(|t| {
            let off = t * self.frame_len() + s * self.person_len();
            self.positions[off..off + self.person_len()]
                .iter()
                .any(|&v| v != 0.0)
        })
    }

    fn refresh_mask(&mut self) {
        self.valid = (0..self.persons).map(|s| self.person_has_data(s)).collect();
    }

    fn with_frames(&self, frames: usize, positions: Vec<f64>) -> Self {
        Self {
            frames,
            persons: self.persons,
            joints: self.joints,
            coords: self.coords,
            positions,
            valid: self.valid.clone(),
        }
    }

    /// Contiguous frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Input(format!(
                "window [{start}, {}) outside {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(self.with_frames(len, self.positions[start * n..(start + len) * n].to_vec()))
    }

    /// Reorders persons so that output slot `i` holds input person `order[i]`.
    pub fn permute_persons(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.persons];
        if order.len() != self.persons || order.iter().any(|&p| p >= self.persons || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input(format!("{order:?} is not a permutation of {} persons", self.persons)));
        }
        let pl = self.person_len();
        let mut out = Vec::with_capacity(self.positions.len());
        for frame in self.positions.chunks(self.frame_len()) {
            for &p in order {
                out.extend_from_slice(&frame[p * pl..(p + 1) * pl]);
            }
        }
        let mut clip = self.with_frames(self.frames, out);
        clip.valid = order.iter().map(|&p| self.valid[p]).collect();
        Ok(clip)
    }

    /// The clip as a tensor `F × (S·J) × C`, persons laid out along the joint axis.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.frames, self.total_joints(), self.coords],
            self.positions.clone(),
        )
        .expect("clip extents are positive")
    }
}

impl MotionClip {
    pub fn clip(&self) -> &SkeletonClip {
        &self.0
    }
}

/// Forward difference along frames; the final frame is zero.
pub fn compute_motion(clip: &SkeletonClip) -> Result<MotionClip> {
    if clip.frames < 2 {
        return Err(Error::Input(format!(
            "motion needs at least 2 frames, got {}",
            clip.frames
        )));
    }
    let n = clip.frame_len();
    let mut out = vec![0.0; clip.positions.len()];
    for t in 0..clip.frames - 1 {
        for i in 0..n {
            out[t * n + i] = clip.positions[(t + 1) * n + i] - clip.positions[t * n + i];
        }
    }
    Ok(MotionClip(clip.with_frames(clip.frames, out)))
}

/// Endpoint-aligned linear interpolation along frames to `target` frames.
///
/// Output frame `i` samples source position `i·(F−1)/(target−1)`.
pub fn resample_sequence(clip: &SkeletonClip, target: usize) -> Result<SkeletonClip> {
    if clip.frames < 2 || target < 2 {
        return Err(Error::Input(format!(
            "resampling needs at least 2 source and target frames, got {} → {target}",
            clip.frames
        )));
    }
    if target == clip.frames {
        return Ok(clip.clone());
    }
    let n = clip.frame_len();
    let span = clip.frames - 1;
    let denom = target - 1;
    let mut out = Vec::with_capacity(target * n);
    for i in 0..target {
        // Integer arithmetic keeps the source index exact.
        let num = i * span;
        let lo = num / denom;
        let rem = num % denom;
        let a = &clip.positions[lo * n..(lo + 1) * n];
        if rem == 0 {
            out.extend_from_slice(a);
            continue;
        }
        let frac = rem as f64 / denom as f64;
        let b = &clip.positions[(lo + 1) * n..(lo + 2) * n];
        out.extend(a.iter().zip(b).map(|(&a, &b)| {
            let v = a * (1.0 - frac) + b * frac;
            v.clamp(a.min(b), a.max(b))
        }));
    }
    Ok(clip.with_frames(target, out))
}

/// `round(ratio · frames)` with halves rounded up, clamped to `[1, frames]`.
pub fn crop_length(frames: usize, ratio: f64) -> usize {
    ((ratio * frames as f64 + 0.5).floor() as usize).clamp(1, frames)
}

/// A window of `round(r·F)` frames with `r ~ U[0.5, 1]` at a uniform start.
pub fn random_crop<R: Rng + ?Sized>(clip: &SkeletonClip, rng: &mut R) -> Result<SkeletonClip> {
    let ratio = rng.random_range(0.5..=1.0);
    random_crop_with_ratio(clip, ratio, rng)
}

/// [`random_crop`] with a fixed ratio; only the start is drawn.
pub fn random_crop_with_ratio<R: Rng + ?Sized>(
    clip: &SkeletonClip,
    ratio: f64,
    rng: &mut R,
) -> Result<SkeletonClip> {
    let len = crop_length(clip.frames, ratio);
    let start = rng.random_range(0..=clip.frames - len);
    clip.window(start, len)
}

/// The central `round(ratio·F)` frames; the start index rounds down.
pub fn center_crop(clip: &SkeletonClip, ratio: f64) -> Result<SkeletonClip> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Input(format!("crop ratio {ratio} outside (0, 1]")));
    }
    let len = crop_length(clip.frames, ratio);
    clip.window((clip.frames - len) / 2, len)
}

/// Repeats the sequence from its start until it has `target` frames.
/// Longer clips are truncated to their first `target` frames.
pub fn repeat_pad_frames(clip: &SkeletonClip, target: usize) -> Result<SkeletonClip> {
    if target == 0 {
        return Err(Error::Input("target frame count must be positive".into()));
    }
    let n = clip.frame_len();
    let mut out = Vec::with_capacity(target * n);
    for t in 0..target {
        out.extend_from_slice(clip.frame(t % clip.frames));
    }
    Ok(clip.with_frames(target, out))
}

/// Unranked person tracks as produced by a pose estimator.
///
/// Each track holds `frames × joints × coords` values; the last coordinate is
/// the detection confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDetections {
    pub frames: usize,
    pub joints: usize,
    pub coords: usize,
    pub tracks: Vec<Vec<f64>>,
}

/// Keeps the `max_persons` tracks with the highest mean confidence, padding
/// with zero persons. Ties keep the lower track index.
pub fn select_top_people(raw: &RawDetections, max_persons: usize) -> Result<SkeletonClip> {
    let RawDetections {
        frames,
        joints,
        coords,
        ref tracks,
    } = *raw;
    if max_persons == 0 || coords == 0 {
        return Err(Error::Input("need at least one person slot and one coordinate".into()));
    }
    let track_len = frames * joints * coords;
    if let Some((i, t)) = tracks.iter().enumerate().find(|(_, t)| t.len() != track_len) {
        return Err(Error::Input(format!(
            "track {i} has {} values, expected {track_len}",
            t.len()
        )));
    }
    let mean_conf = |t: &[f64]| -> f64 {
        t.iter().skip(coords - 1).step_by(coords).sum::<f64>() / (frames * joints) as f64
    };
    let mut ranked: Vec<(usize, f64)> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| (i, mean_conf(t)))
        .collect();
    // Stable sort keeps lower indices first among equal confidences.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(max_persons);

    let pl = joints * coords;
    let mut positions = vec![0.0; frames * max_persons * pl];
    let mut valid = vec![false; max_persons];
    for (slot, &(i, _)) in ranked.iter().enumerate() {
        valid[slot] = true;
        for t in 0..frames {
            let dst = (t * max_persons + slot) * pl;
            positions[dst..dst + pl].copy_from_slice(&tracks[i][t * pl..(t + 1) * pl]);
        }
    }
    let mut clip = SkeletonClip::from_positions(frames, max_persons, joints, coords, positions)?;
    // A selected track that is entirely zero is indistinguishable from padding.
    for (slot, v) in valid.iter().enumerate() {
        clip.valid[slot] &= *v;
    }
    Ok(clip)
}
