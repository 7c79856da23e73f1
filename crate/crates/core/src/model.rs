//! The three network topologies and their classifier heads.
//!
//! * `V1` fuses position and motion along the joint axis before a single
//!   encoder and attention block.
//! * `V2` encodes each person's position and motion separately, joins them
//!   along the feature axis, runs one shared attention block per person and
//!   takes the element-wise max of the block outputs.
//! * `V3` takes the element-wise max over persons of the encoded features,
//!   runs one attention block per modality and trains three heads: position,
//!   motion and their concatenation.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tssan_tensor::{GroupReduce, ParamStore, Tape, Tensor, TensorError, Var};

use crate::encoder::{Encoder, EncoderDims, EncoderKind, CNN_WIDTH};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::san::{SanBlock, SanConfig};
use crate::skeleton::{MotionClip, SkeletonClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
    V3,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            other => Err(format!("unknown variant {other:?}, expected v1, v2 or v3")),
        }
    }
}

/// Which head(s) produce the prediction of a three-head model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    /// The classifier over both modalities.
    #[default]
    Concat,
    /// Mean of the three heads' probabilities.
    MeanOfHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    pub encoder: EncoderKind,
    /// Person slots per clip.
    pub persons: usize,
    /// Joints per person.
    pub joints: usize,
    pub coords: usize,
    pub num_labels: usize,
    pub layers: usize,
    pub heads: usize,
    /// Per-joint width of the feed-forward encoder.
    pub ff_width: usize,
    /// Longest sequence the position table accepts.
    pub max_frames: usize,
    pub attn_dropout: f64,
    pub encoder_dropout: f64,
    pub classifier_dropout: f64,
    pub inference_head: HeadSelection,
    /// Excludes padded persons from the person-wise max when at least one
    /// person is present.
    pub mask_padded_persons: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::V2,
            encoder: EncoderKind::Cnn,
            persons: 2,
            joints: 25,
            coords: 3,
            num_labels: 60,
            layers: 4,
            heads: 8,
            ff_width: 64,
            max_frames: 32,
            attn_dropout: 0.2,
            encoder_dropout: 0.5,
            classifier_dropout: 0.5,
            inference_head: HeadSelection::Concat,
            mask_padded_persons: false,
        }
    }
}

impl VariantConfig {
    /// Joint-axis extent seen by an encoder.
    pub fn encoder_joints(&self) -> usize {
        match self.variant {
            Variant::V1 => 2 * self.persons * self.joints,
            Variant::V2 | Variant::V3 => self.joints,
        }
    }

    /// Per-frame width produced by one encoder.
    pub fn encoder_width(&self) -> usize {
        match self.encoder {
            EncoderKind::Cnn => CNN_WIDTH,
            EncoderKind::Ff => self.encoder_joints() * self.ff_width,
        }
    }

    /// Model width of the attention block(s).
    pub fn san_width(&self) -> usize {
        match self.variant {
            Variant::V2 => 2 * self.encoder_width(),
            Variant::V1 | Variant::V3 => self.encoder_width(),
        }
    }

    pub fn san_config(&self) -> SanConfig {
        SanConfig {
            attn_dropout: self.attn_dropout,
            ..SanConfig::new(self.layers, self.heads, self.san_width(), self.max_frames)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.persons,
            self.joints,
            self.coords,
            self.num_labels,
            self.ff_width,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("model extents must be positive".into()));
        }
        for (name, r) in [
            ("encoder_dropout", self.encoder_dropout),
            ("classifier_dropout", self.classifier_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        self.san_config().validate()
    }

    fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            joints: self.encoder_joints(),
            coords: self.coords,
            ff_width: self.ff_width,
            dropout: self.encoder_dropout,
        }
    }
}

/// Rectifier, dropout and a linear map to label scores.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, labels: usize, dropout: f64, rng: &mut dyn RngCore) -> Self {
        Self {
            linear: Linear::new(store, name, inputs, labels, rng),
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var, TensorError> {
        let h = tape.relu(x);
        let h = tape.dropout(h, self.dropout, training, rng)?;
        self.linear.forward(tape, store, h)
    }
}

/// Fixed-length clips with their motion, stacked for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub items: usize,
    pub frames: usize,
    pub persons: usize,
    pub joints: usize,
    pub coords: usize,
    positions: Vec<f64>,
    motion: Vec<f64>,
    valid: Vec<bool>,
}

impl ClipBatch {
    /// Stacks clips that share one shape.
    pub fn new(clips: &[(SkeletonClip, MotionClip)]) -> Result<Self> {
        let (first, _) = clips
            .first()
            .ok_or_else(|| Error::Input("a batch needs at least one clip".into()))?;
        let mut batch = Self {
            items: 0,
            frames: first.frames(),
            persons: first.persons(),
            joints: first.joints(),
            coords: first.coords(),
            positions: Vec::new(),
            motion: Vec::new(),
            valid: Vec::new(),
        };
        for (clip, motion) in clips {
            batch.push(clip, motion)?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, clip: &SkeletonClip, motion: &MotionClip) -> Result<()> {
        let shape = |c: &SkeletonClip| [c.frames(), c.persons(), c.joints(), c.coords()];
        let want = [self.frames, self.persons, self.joints, self.coords];
        if shape(clip) != want || shape(motion.clip()) != want {
            return Err(Error::Input(format!(
                "clip shape {:?} / motion shape {:?} differ from batch shape {want:?}",
                shape(clip),
                shape(motion.clip())
            )));
        }
        self.positions.extend_from_slice(clip.positions());
        self.motion.extend_from_slice(motion.clip().positions());
        self.valid.extend_from_slice(clip.valid_mask());
        self.items += 1;
        Ok(())
    }

    fn frame_len(&self) -> usize {
        self.persons * self.joints * self.coords
    }

    /// Position and motion joined along the joint axis:
    /// `items × F × 2·S·J × C`.
    pub fn fused(&self) -> Tensor {
        let n = self.frame_len();
        let mut out = Vec::with_capacity(2 * self.positions.len());
        for (p, m) in self.positions.chunks(n).zip(self.motion.chunks(n)) {
            out.extend_from_slice(p);
            out.extend_from_slice(m);
        }
        Tensor::new(
            [self.items, self.frames, 2 * self.persons * self.joints, self.coords],
            out,
        )
        .expect("batch extents are positive")
    }

    fn split_persons(&self, data: &[f64]) -> Tensor {
        let pl = self.joints * self.coords;
        let mut out = Vec::with_capacity(data.len());
        for item in data.chunks(self.frames * self.frame_len()) {
            for s in 0..self.persons {
                for frame in item.chunks(self.frame_len()) {
                    out.extend_from_slice(&frame[s * pl..(s + 1) * pl]);
                }
            }
        }
        Tensor::new(
            [self.items * self.persons, self.frames, self.joints, self.coords],
            out,
        )
        .expect("batch extents are positive")
    }

    /// Per-person positions, `items·S × F × J × C`, item-major.
    pub fn person_positions(&self) -> Tensor {
        self.split_persons(&self.positions)
    }

    /// Per-person motion, `items·S × F × J × C`, item-major.
    pub fn person_motion(&self) -> Tensor {
        self.split_persons(&self.motion)
    }

    /// Whether person `s` of item `i` is excluded from a masked max.
    fn masked_out(&self, i: usize, s: usize) -> bool {
        let row = &self.valid[i * self.persons..(i + 1) * self.persons];
        !row[s] && row.iter().any(|&v| v)
    }
}

/// Offset that removes a padded person from a max over persons.
const MASK_OFFSET: f64 = -1e30;

/// Logits of every head plus the attention probabilities of every block.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// One `items × L` matrix per head; three-head models list position,
    /// motion, then concatenation.
    pub logits: Vec<Var>,
    pub traces: Vec<BranchTrace>,
}

/// Attention probabilities of one block over its stacked sequences.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub branch: &'static str,
    /// Stacked sequences per batch item.
    pub per_item: usize,
    /// Per layer, `sequences × heads × F × F`.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
enum Parts {
    Early {
        encoder: Encoder,
        san: SanBlock,
        head: ClassifierHead,
    },
    PersonMax {
        position: Encoder,
        motion: Encoder,
        san: SanBlock,
        head: ClassifierHead,
    },
    ModalityBranches {
        position: Encoder,
        motion: Encoder,
        position_san: SanBlock,
        motion_san: SanBlock,
        position_head: ClassifierHead,
        motion_head: ClassifierHead,
        concat_head: ClassifierHead,
    },
}

/// A network instance: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: VariantConfig,
    pub store: ParamStore,
    parts: Parts,
}

impl Model {
    pub fn new(config: VariantConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let dims = config.encoder_dims();
        let san = config.san_config();
        let (h, labels, drop) = (san.width, config.num_labels, config.classifier_dropout);
        let parts = match config.variant {
            Variant::V1 => Parts::Early {
                encoder: Encoder::new(config.encoder, s, "encoder", dims, rng),
                san: SanBlock::new(s, "san", san, rng)?,
                head: ClassifierHead::new(s, "head", h, labels, drop, rng),
            },
            Variant::V2 => Parts::PersonMax {
                position: Encoder::new(config.encoder, s, "position_encoder", dims, rng),
                motion: Encoder::new(config.encoder, s, "motion_encoder", dims, rng),
                san: SanBlock::new(s, "san", san, rng)?,
                head: ClassifierHead::new(s, "head", h, labels, drop, rng),
            },
            Variant::V3 => Parts::ModalityBranches {
                position: Encoder::new(config.encoder, s, "position_encoder", dims, rng),
                motion: Encoder::new(config.encoder, s, "motion_encoder", dims, rng),
                position_san: SanBlock::new(s, "position_san", san.clone(), rng)?,
                motion_san: SanBlock::new(s, "motion_san", san, rng)?,
                position_head: ClassifierHead::new(s, "position_head", h, labels, drop, rng),
                motion_head: ClassifierHead::new(s, "motion_head", h, labels, drop, rng),
                concat_head: ClassifierHead::new(s, "concat_head", 2 * h, labels, drop, rng),
            },
        };
        Ok(Self { config, store, parts })
    }

    pub fn num_heads(&self) -> usize {
        match self.config.variant {
            Variant::V3 => 3,
            Variant::V1 | Variant::V2 => 1,
        }
    }

    /// Number of distinct attention blocks in the parameter store.
    pub fn num_attention_blocks(&self) -> usize {
        match self.parts {
            Parts::ModalityBranches { .. } => 2,
            _ => 1,
        }
    }

    fn check_batch(&self, batch: &ClipBatch) -> Result<()> {
        let c = &self.config;
        if batch.persons != c.persons || batch.joints != c.joints || batch.coords != c.coords {
            return Err(Error::Input(format!(
                "batch has S={} J={} C={}, model expects S={} J={} C={}",
                batch.persons, batch.joints, batch.coords, c.persons, c.joints, c.coords
            )));
        }
        Ok(())
    }

    /// Runs the network on every clip of `batch`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &ClipBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        self.check_batch(batch)?;
        match &self.parts {
            Parts::Early { encoder, san, head } => {
                self.forward_v1(encoder, san, head, tape, batch, training, rng)
            }
            Parts::PersonMax {
                position,
                motion,
                san,
                head,
            } => self.forward_v2([position, motion], san, head, tape, batch, training, rng),
            Parts::ModalityBranches {
                position,
                motion,
                position_san,
                motion_san,
                position_head,
                motion_head,
                concat_head,
            } => self.forward_v3(
                [position, motion],
                [position_san, motion_san],
                [position_head, motion_head, concat_head],
                tape,
                batch,
                training,
                rng,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_v1(
        &self,
        encoder: &Encoder,
        san: &SanBlock,
        head: &ClassifierHead,
        tape: &mut Tape,
        batch: &ClipBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let x = tape.constant(batch.fused());
        let feats = encoder.forward(tape, &self.store, x, training, rng)?;
        let block = san.forward(tape, &self.store, feats, batch.frames, training, rng)?;
        let logits = head.forward(tape, &self.store, block.output, training, rng)?;
        Ok(ModelOutput {
            logits: vec![logits],
            traces: vec![BranchTrace {
                branch: "fused",
                per_item: 1,
                probs: block.probs,
            }],
        })
    }

    /// Constant offsets that drop padded persons from a max over rows whose
    /// person index is `person_of(row)` within item `item_of(row)`.
    fn person_mask(&self, batch: &ClipBatch, rows: usize, width: usize, locate: impl Fn(usize) -> (usize, usize)) -> Option<Tensor> {
        if !self.config.mask_padded_persons {
            return None;
        }
        let mut data = vec![0.0; rows * width];
        let mut any = false;
        for r in 0..rows {
            let (i, s) = locate(r);
            if batch.masked_out(i, s) {
                any = true;
                data[r * width..(r + 1) * width].fill(MASK_OFFSET);
            }
        }
        any.then(|| Tensor::new([rows, width], data).expect("positive extents"))
    }

    fn max_over_persons(&self, tape: &mut Tape, x: Var, mask: Option<Tensor>, persons: usize) -> Result<Var> {
        let x = match mask {
            Some(m) => {
                let m = tape.constant(m);
                tape.add(x, m)?
            }
            None => x,
        };
        Ok(tape.reduce_groups(x, persons, GroupReduce::Max)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_v2(
        &self,
        encoders: [&Encoder; 2],
        san: &SanBlock,
        head: &ClassifierHead,
        tape: &mut Tape,
        batch: &ClipBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let s = batch.persons;
        let pos = tape.constant(batch.person_positions());
        let mot = tape.constant(batch.person_motion());
        let fp = encoders[0].forward(tape, &self.store, pos, training, rng)?;
        let fm = encoders[1].forward(tape, &self.store, mot, training, rng)?;
        let feats = tape.concat_last(&[fp, fm])?;
        let block = san.forward(tape, &self.store, feats, batch.frames, training, rng)?;
        let rows = batch.items * s;
        let mask = self.person_mask(batch, rows, san.config.width, |r| (r / s, r % s));
        let merged = self.max_over_persons(tape, block.output, mask, s)?;
        let logits = head.forward(tape, &self.store, merged, training, rng)?;
        Ok(ModelOutput {
            logits: vec![logits],
            traces: vec![BranchTrace {
                branch: "person",
                per_item: s,
                probs: block.probs,
            }],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_v3(
        &self,
        encoders: [&Encoder; 2],
        blocks: [&SanBlock; 2],
        heads: [&ClassifierHead; 3],
        tape: &mut Tape,
        batch: &ClipBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let (n, s, f) = (batch.items, batch.persons, batch.frames);
        let inputs = [batch.person_positions(), batch.person_motion()];
        let mut outputs = Vec::with_capacity(2);
        let mut traces = Vec::with_capacity(2);
        for ((encoder, block), (input, branch)) in encoders
            .into_iter()
            .zip(blocks)
            .zip(inputs.into_iter().zip(["position", "motion"]))
        {
            let x = tape.constant(input);
            let feats = encoder.forward(tape, &self.store, x, training, rng)?;
            let w = encoder.output_width();
            // Rows (item, person, frame) → (item, frame, person) so the
            // person-wise max reduces consecutive rows.
            let feats = tape.reshape(feats, &[n, s, f, w])?;
            let feats = tape.permute(feats, &[0, 2, 1, 3])?;
            let feats = tape.reshape(feats, &[n * f * s, w])?;
            let mask = self.person_mask(batch, n * f * s, w, |r| (r / (f * s), r % s));
            let merged = self.max_over_persons(tape, feats, mask, s)?;
            let out = block.forward(tape, &self.store, merged, f, training, rng)?;
            outputs.push(out.output);
            traces.push(BranchTrace {
                branch,
                per_item: 1,
                probs: out.probs,
            });
        }
        let both = tape.concat_last(&outputs)?;
        let logits = vec![
            heads[0].forward(tape, &self.store, outputs[0], training, rng)?,
            heads[1].forward(tape, &self.store, outputs[1], training, rng)?,
            heads[2].forward(tape, &self.store, both, training, rng)?,
        ];
        Ok(ModelOutput { logits, traces })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of one logit vector and its arg-max label.
pub fn predict(logits: &[f64]) -> (usize, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
    (argmax(&probs), probs)
}

/// Prediction from the probabilities of several heads under `selection`.
/// `per_head` lists probability vectors in head order (position, motion,
/// concatenation for three-head models).
pub fn combine_heads(per_head: &[Vec<f64>], selection: HeadSelection) -> Vec<f64> {
    match (per_head.len(), selection) {
        (3, HeadSelection::MeanOfHeads) => (0..per_head[0].len())
            .map(|j| per_head.iter().map(|p| p[j]).sum::<f64>() / 3.0)
            .collect(),
        _ => per_head.last().cloned().unwrap_or_default(),
    }
}
