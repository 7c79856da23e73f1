//! Self-attention block over per-frame features.
//!
//! The block adds a learned position table to the input, runs `N` post-norm
//! self-attention layers, concatenates every layer's output, averages over
//! frames and projects back to the model width with a rectifier. Inputs are
//! stacks of independent sequences: `G·F × H` rows, sequence-major.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tssan_tensor::{GroupReduce, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};

/// Standard deviation of the position table initialization.
pub const POSITION_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub attn_dropout: f64,
    /// Rows of the position table; longer sequences are rejected.
    pub max_frames: usize,
}

impl SanConfig {
    /// Feed-forward width `2·width` and dropout 0.2.
    pub fn new(layers: usize, heads: usize, width: usize, max_frames: usize) -> Self {
        Self {
            layers,
            heads,
            width,
            ffn_width: 2 * width,
            attn_dropout: 0.2,
            max_frames,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if [self.layers, self.heads, self.width, self.ffn_width, self.max_frames].contains(&0) {
            return Err(Error::Config("attention block sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.attn_dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SanLayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct SanBlock {
    pub config: SanConfig,
    /// `max_frames × width` learned position table.
    pub position: ParamId,
    pub layers: Vec<SanLayerParams>,
    /// `width·layers → width` projection of the frame-averaged concatenation.
    pub proj: Linear,
}

/// Output of one block over `G` stacked sequences.
#[derive(Clone, Debug)]
pub struct SanOutput {
    /// `G × H` block outputs.
    pub output: Var,
    /// Per layer, `G × heads × F × F` attention probabilities.
    pub probs: Vec<Var>,
}

impl SanBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: SanConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let h = config.width;
        let position = store.add(
            format!("{name}.position"),
            Tensor::randn([config.max_frames, h], POSITION_INIT_STD, rng),
        );
        let layers = (0..config.layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                SanLayerParams {
                    query: Linear::new(store, &format!("{n}.query"), h, h, rng),
                    key: Linear::new(store, &format!("{n}.key"), h, h, rng),
                    value: Linear::new(store, &format!("{n}.value"), h, h, rng),
                    output: Linear::new(store, &format!("{n}.output"), h, h, rng),
                    attn_norm: Norm::new(store, &format!("{n}.attn_norm"), h),
                    ffn_in: Linear::new(store, &format!("{n}.ffn_in"), h, config.ffn_width, rng),
                    ffn_out: Linear::new(store, &format!("{n}.ffn_out"), config.ffn_width, h, rng),
                    ffn_norm: Norm::new(store, &format!("{n}.ffn_norm"), h),
                }
            })
            .collect();
        let proj = Linear::new(store, &format!("{name}.proj"), h * config.layers, h, rng);
        Ok(Self {
            config,
            position,
            layers,
            proj,
        })
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::Config(format!(
                "sequence of {frames} frames exceeds the position table ({} rows)",
                self.config.max_frames
            )));
        }
        Ok(())
    }

    /// `y[t] = x[t] + p[t]` for every stacked sequence of `frames` rows.
    pub fn position_embed(&self, tape: &mut Tape, store: &ParamStore, x: Var, frames: usize) -> Result<Var> {
        self.check_frames(frames)?;
        let p = tape.param(store, self.position);
        let p = tape.slice_first(p, 0, frames)?;
        Ok(tape.add_bias(x, p)?)
    }

    /// Projected multi-head attention; returns the `rows × H` output and the
    /// `G × heads × F × F` probabilities.
    pub fn multi_head_attention(
        &self,
        layer: &SanLayerParams,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        frames: usize,
    ) -> Result<(Var, Var), TensorError> {
        let q = layer.query.forward(tape, store, y)?;
        let k = layer.key.forward(tape, store, y)?;
        let v = layer.value.forward(tape, store, y)?;
        let (heads, probs) = tape.attention(q, k, v, frames, self.config.heads)?;
        Ok((layer.output.forward(tape, store, heads)?, probs))
    }

    /// One post-norm layer: attention and feed-forward sublayers, each with
    /// dropout, a residual connection and layer normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        layer: &SanLayerParams,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        frames: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Var), TensorError> {
        let rate = self.config.attn_dropout;
        let (attn, probs) = self.multi_head_attention(layer, tape, store, y, frames)?;
        let attn = tape.dropout(attn, rate, training, rng)?;
        let a = tape.add(y, attn)?;
        let a = layer.attn_norm.forward(tape, store, a)?;
        let f = layer.ffn_in.forward(tape, store, a)?;
        let f = tape.relu(f);
        let f = layer.ffn_out.forward(tape, store, f)?;
        let f = tape.dropout(f, rate, training, rng)?;
        let out = tape.add(a, f)?;
        Ok((layer.ffn_norm.forward(tape, store, out)?, probs))
    }

    /// Runs the block over `x: G·frames × H`, returning `G × H` outputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        frames: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<SanOutput> {
        let h = self.config.width;
        match *tape.shape(x) {
            [rows, w] if w == h && rows % frames.max(1) == 0 => {}
            ref s => {
                return Err(TensorError::Dimension {
                    op: "attention block input",
                    lhs: s.to_vec(),
                    rhs: vec![frames, h],
                }
                .into())
            }
        }
        let mut z = self.position_embed(tape, store, x, frames)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut probs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, p) = self.layer_forward(layer, tape, store, z, frames, training, rng)?;
            outputs.push(next);
            probs.push(p);
            z = next;
        }
        let c = tape.concat_last(&outputs)?;
        let c = tape.reduce_groups(c, frames, GroupReduce::Mean)?;
        let o = self.proj.forward(tape, store, c)?;
        Ok(SanOutput {
            output: tape.relu(o),
            probs,
        })
    }
}

/// Attention probabilities of one sequence: `layers × heads` matrices of
/// `F × F`, row = query frame, column = key frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub frames: usize,
    /// Per layer, a `heads × F × F` tensor.
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    /// Extracts sequence `index` from per-layer `G × heads × F × F` tensors.
    pub fn from_stacked(per_layer: &[&Tensor], index: usize) -> Result<Self> {
        let first = per_layer
            .first()
            .ok_or_else(|| Error::Input("attention trace needs at least one layer".into()))?;
        let [g, heads, frames, _] = match *first.shape() {
            [g, h, f, f2] if f == f2 => [g, h, f, f2],
            ref s => return Err(Error::Input(format!("unexpected probability shape {s:?}"))),
        };
        if index >= g {
            return Err(Error::Input(format!("sequence {index} outside {g} stacked sequences")));
        }
        let n = heads * frames * frames;
        let layers = per_layer
            .iter()
            .map(|t| {
                if t.shape() != first.shape() {
                    return Err(Error::Input("layers disagree on probability shape".into()));
                }
                Ok(Tensor::new([heads, frames, frames], t.data()[index * n..(index + 1) * n].to_vec())?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads, frames, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// The `F × F` matrix of `head` at `layer`, row-major.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.frames * self.frames;
        &self.layers[layer].data()[head * n..(head + 1) * n]
    }
}
