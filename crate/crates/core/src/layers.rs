//! Parameterized building blocks shared by encoders, attention blocks and heads.

use rand::RngCore;
use tssan_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Uniform Glorot initialization: bound `√(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), bound, rng)
}

/// Affine map `x·W + b` on the last axis, `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(&[inputs, outputs], inputs, outputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Applies the map to a `rows × inputs` matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization with learned gain and shift, initialized to 1 and 0.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([width])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.shift);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
