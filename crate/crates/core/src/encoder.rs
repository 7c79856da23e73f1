//! Per-frame feature encoders for joint tensors.
//!
//! Both encoders take a batch `M × F × J × C` (items, frames, joints,
//! coordinates) and return `M·F × H` feature rows, item-major.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tssan_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::layers::{glorot, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Shared per-joint affine map followed by a rectifier.
    Ff,
    /// Four convolution layers ending in an `8 × 64` map per frame.
    Cnn,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ff" => Ok(Self::Ff),
            "cnn" => Ok(Self::Cnn),
            other => Err(format!("unknown encoder {other:?}, expected ff or cnn")),
        }
    }
}

/// Feature width of the convolutional encoder: 8 pooled columns × 64 channels.
pub const CNN_WIDTH: usize = 8 * 64;

/// Width of the joint-major axis fed to the last two convolutions.
const CNN_INNER: usize = 32;

#[derive(Clone, Debug)]
pub struct FfEncoder {
    pub proj: Linear,
    pub joints: usize,
}

/// Kernel and bias ids for one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, shape: [usize; 4], rng: &mut dyn RngCore) -> Self {
        let [cout, cin, kh, kw] = shape;
        let w = glorot(&shape, cin * kh * kw, cout * kh * kw, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, Some(b))?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct CnnEncoder {
    /// 1×1, coordinates → 64.
    pub l1: ConvLayer,
    /// 3×1 over frames, 64 → 32.
    pub l2: ConvLayer,
    /// 3×3, joints → 32, then 1×2 pooling.
    pub l3: ConvLayer,
    /// 3×3, 32 → 64, then 1×2 pooling.
    pub l4: ConvLayer,
    pub joints: usize,
    pub dropout: f64,
}

/// Input extents and hyperparameters shared by both encoder kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub joints: usize,
    pub coords: usize,
    /// Per-joint output width of the feed-forward encoder.
    pub ff_width: usize,
    /// Rate applied after the last convolution in training.
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Ff(FfEncoder),
    Cnn(CnnEncoder),
}

impl Encoder {
    pub fn new(
        kind: EncoderKind,
        store: &mut ParamStore,
        name: &str,
        dims: EncoderDims,
        rng: &mut dyn RngCore,
    ) -> Self {
        let EncoderDims {
            joints,
            coords,
            ff_width,
            dropout,
        } = dims;
        match kind {
            EncoderKind::Ff => Self::Ff(FfEncoder {
                proj: Linear::new(store, &format!("{name}.proj"), coords, ff_width, rng),
                joints,
            }),
            EncoderKind::Cnn => Self::Cnn(CnnEncoder {
                l1: ConvLayer::new(store, &format!("{name}.conv1"), [64, coords, 1, 1], rng),
                l2: ConvLayer::new(store, &format!("{name}.conv2"), [CNN_INNER, 64, 3, 1], rng),
                l3: ConvLayer::new(store, &format!("{name}.conv3"), [32, joints, 3, 3], rng),
                l4: ConvLayer::new(store, &format!("{name}.conv4"), [64, 32, 3, 3], rng),
                joints,
                dropout,
            }),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Self::Ff(_) => EncoderKind::Ff,
            Self::Cnn(_) => EncoderKind::Cnn,
        }
    }

    /// Per-frame feature width `H`.
    pub fn output_width(&self) -> usize {
        match self {
            Self::Ff(e) => e.joints * e.proj.outputs,
            Self::Cnn(_) => CNN_WIDTH,
        }
    }

    /// Encodes `x: M × F × J × C` into `M·F × H` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var, TensorError> {
        let [m, f, j, c] = match *tape.shape(x) {
            [m, f, j, c] => [m, f, j, c],
            ref s => {
                return Err(TensorError::Dimension {
                    op: "encoder input",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        match self {
            Self::Ff(e) => {
                if j != e.joints || c != e.proj.inputs {
                    return Err(TensorError::Dimension {
                        op: "ff encoder",
                        lhs: vec![m, f, j, c],
                        rhs: vec![e.joints, e.proj.inputs],
                    });
                }
                let rows = tape.reshape(x, &[m * f * j, c])?;
                let y = e.proj.forward(tape, store, rows)?;
                let y = tape.relu(y);
                tape.reshape(y, &[m * f, j * e.proj.outputs])
            }
            Self::Cnn(e) => {
                if j != e.joints {
                    return Err(TensorError::Dimension {
                        op: "cnn encoder",
                        lhs: vec![m, f, j, c],
                        rhs: vec![e.joints],
                    });
                }
                // Coordinates become channels over the (frame, joint) plane.
                let h = tape.permute(x, &[0, 3, 1, 2])?;
                let h = e.l1.forward(tape, store, h)?;
                let h = e.l2.forward(tape, store, h)?;
                // Joints become channels over the (frame, feature) plane.
                let h = tape.permute(h, &[0, 3, 2, 1])?;
                let h = e.l3.forward(tape, store, h)?;
                let h = tape.maxpool2d_w2(h)?;
                let h = e.l4.forward(tape, store, h)?;
                let h = tape.maxpool2d_w2(h)?;
                // M × 64 × F × 8 → M × F × 8 × 64, one 512-wide row per frame.
                let h = tape.permute(h, &[0, 2, 3, 1])?;
                let h = tape.reshape(h, &[m * f, CNN_WIDTH])?;
                tape.dropout(h, e.dropout, training, rng)
            }
        }
    }
}
