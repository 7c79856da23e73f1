//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value, its inputs and whatever
//! intermediates the backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse and accumulates gradients into every input that requires one.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::kernels::{self, ConvGeom, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::strides;
use crate::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPoolW2 { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    SliceLast { x: Var, start: usize },
    SliceFirst { x: Var, start: usize },
    ConcatLast { inputs: Vec<Var> },
    MeanRows { x: Var },
    MaxOf { inputs: Vec<Var>, winner: Vec<usize> },
    LogSumExpOf { inputs: Vec<Var> },
    Pick { x: Var, index: usize },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Nll { logp: Var, labels: Vec<usize> },
    ReduceGroups { x: Var, group: usize, mode: GroupReduce, winner: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, probs: Var, seq_len: usize, heads: usize },
}

/// Reduction applied over consecutive row groups by [`Tape::reduce_groups`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupReduce {
    Max,
    Mean,
    LogSumExp,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Repeated binds of the same id return the
    /// same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err(op, s, &[])),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rows(self.data(a), k),
            MatRef::rows(self.data(b), n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rows(self.data(a), k),
            MatRef::transposed(self.data(b), k),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.matrix_dims(a, "transpose")?;
        self.permute(a, &[1, 0])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), op(a, b), rg))
    }

    /// Adds `b` to `x`, repeating `b` over the leading entries of `x`. `b`
    /// must cover a whole number of rows of the last axis, e.g. a bias of
    /// length `n` or a `F×n` table added to every `F`-row block.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, n) = self.value(x).rows_cols();
        let blen = self.value(b).len();
        if !blen.is_multiple_of(n) || !self.value(x).len().is_multiple_of(blen) {
            return Err(dim_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let out: Vec<f64> = self
            .data(x)
            .chunks(blen)
            .flat_map(|block| block.iter().zip(bias).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.unary(x, out, Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.data(x).iter().map(|&v| v * s).collect();
        self.unary(x, out, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        self.unary(x, out, Op::AddScalar { x })
    }

    fn unary(&mut self, x: Var, out: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.value(x).rows_cols();
        let mut out = vec![0.0; self.value(x).len()];
        for (row, o) in self.data(x).chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(row, o);
        }
        self.unary(x, out, Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.value(x).rows_cols();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(n) {
            let lse = kernels::log_sum_exp(row.iter().copied());
            out.extend(row.iter().map(|v| v - lse));
        }
        self.unary(x, out, Op::LogSoftmax { x })
    }

    /// Normalizes each row over the last axis then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, n) = self.value(x).rows_cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`; identity when
    /// `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} not in [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.unary(x, out, Op::Dropout { x, mask }))
    }

    // ---- convolution ----------------------------------------------------

    /// Stride-1 zero same-padded cross-correlation of `x: Cin×H×W` (or a
    /// batch `N×Cin×H×W`) with `w: Cout×Cin×kh×kw`; kernel extents must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (batch, cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (None, c, h, w),
            [n, c, h, w] => (Some(n), c, h, w),
            ref s => return Err(dim_err("conv2d", s, self.shape(w))),
        };
        let (cout, cin2, kh, kw) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(dim_err("conv2d", self.shape(x), s)),
        };
        if cin != cin2 {
            return Err(dim_err("conv2d", self.shape(x), self.shape(w)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Contract(format!(
                "conv2d kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeom { cin, cout, h, w: wd, kh, kw };
        let n = batch.unwrap_or(1);
        let in_len = cin * h * wd;
        let mut out = Vec::with_capacity(n * cout * h * wd);
        for item in self.data(x).chunks(in_len) {
            out.extend(kernels::conv2d_forward(geom, item, self.data(w), b.map(|b| self.data(b))));
        }
        let shape = match batch {
            Some(n) => vec![n, cout, h, wd],
            None => vec![cout, h, wd],
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Max pooling with a 1×2 window over the last axis of `x: C×H×W` (or a
    /// batch `N×C×H×W`).
    pub fn maxpool2d_w2(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if !(3..=4).contains(&shape.len()) {
            return Err(dim_err("maxpool2d", &shape, &[]));
        }
        let w = *shape.last().unwrap();
        if !w.is_multiple_of(2) {
            return Err(dim_err("maxpool2d (odd width)", &shape, &[1, 2]));
        }
        let (out, argmax) = kernels::maxpool_w2(self.data(x), w);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w / 2;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MaxPoolW2 { x, argmax }, rg))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.data(x), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, axes: axes.to_vec() },
            rg,
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (_, n) = self.value(x).rows_cols();
        if len == 0 || start + len > n {
            return Err(dim_err("slice_last", self.shape(x), &[start, len]));
        }
        let out: Vec<f64> = self.data(x).chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start }, rg))
    }

    /// Entries `[start, start+len)` of the first axis.
    pub fn slice_first(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(dim_err("slice_first", &shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SliceFirst { x, start }, rg))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows_cols().0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat_last", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast { inputs: inputs.to_vec() }, rg))
    }

    /// Mean over the first axis of `x: r×c`, giving `1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows { x }, rg))
    }

    // ---- reductions across tensors --------------------------------------

    /// Elementwise maximum over equally shaped tensors; ties go to the
    /// earliest input.
    pub fn max_of(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = self.check_same(inputs, "max_of")?;
        let mut out = self.data(first).to_vec();
        let mut winner = vec![0usize; out.len()];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (i, &val) in self.data(v).iter().enumerate() {
                if val > out[i] {
                    out[i] = val;
                    winner[i] = k;
                }
            }
        }
        let shape = self.shape(first).to_vec();
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxOf { inputs: inputs.to_vec(), winner },
            rg,
        ))
    }

    /// Elementwise `ln Σ_k exp(x_k)` over equally shaped tensors.
    pub fn log_sum_exp_of(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = self.check_same(inputs, "log_sum_exp_of")?;
        let n = self.value(first).len();
        let out = (0..n)
            .map(|i| kernels::log_sum_exp(inputs.iter().map(|&v| self.data(v)[i])))
            .collect();
        let shape = self.shape(first).to_vec();
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSumExpOf { inputs: inputs.to_vec() }, rg))
    }

    fn check_same(&self, inputs: &[Var], op: &'static str) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract(format!("{op} of zero tensors")))?;
        for &v in inputs {
            if self.shape(v) != self.shape(first) {
                return Err(dim_err(op, self.shape(first), self.shape(v)));
            }
        }
        Ok(first)
    }

    /// Scalar holding the element at flat `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        if index >= self.value(x).len() {
            return Err(TensorError::Index { index, len: self.value(x).len() });
        }
        let v = self.data(x)[index];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum { x }, rg)
    }

    /// Mean over the batch of `-ln softmax(logits)[label]` for `logits: B×L`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (b, l) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(dim_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(TensorError::Index { index: bad, len: l });
        }
        let mut probs = vec![0.0; b * l];
        let mut loss = 0.0;
        for (i, row) in self.data(logits).chunks(l).enumerate() {
            kernels::softmax_row(row, &mut probs[i * l..(i + 1) * l]);
            loss -= row[labels[i]] - kernels::log_sum_exp(row.iter().copied());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Mean over the batch of `-logp[b, label_b]` for log-probabilities `B×L`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (b, l) = self.matrix_dims(logp, "nll")?;
        if labels.len() != b {
            return Err(dim_err("nll", self.shape(logp), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(TensorError::Index { index: bad, len: l });
        }
        let data = self.data(logp);
        let loss = -labels.iter().enumerate().map(|(i, &y)| data[i * l + y]).sum::<f64>() / b as f64;
        let rg = self.rg(&[logp]);
        Ok(self.push(Tensor::scalar(loss), Op::Nll { logp, labels: labels.to_vec() }, rg))
    }

    /// Reduces every run of `group` consecutive rows (rows of the last axis)
    /// to one row. `x` viewed as `R×C` becomes `(R/group)×C`. Max ties go to
    /// the earliest row.
    pub fn reduce_groups(&mut self, x: Var, group: usize, mode: GroupReduce) -> Result<Var, TensorError> {
        let (rows, c) = self.value(x).rows_cols();
        if group == 0 || rows % group != 0 {
            return Err(dim_err("reduce_groups", self.shape(x), &[group]));
        }
        let data = self.data(x);
        let out_rows = rows / group;
        let mut out = vec![0.0; out_rows * c];
        let mut winner = Vec::new();
        match mode {
            GroupReduce::Max => {
                winner = vec![0; out_rows * c];
                for r in 0..out_rows {
                    let base = r * group * c;
                    out[r * c..(r + 1) * c].copy_from_slice(&data[base..base + c]);
                    for k in 1..group {
                        for j in 0..c {
                            let v = data[base + k * c + j];
                            if v > out[r * c + j] {
                                out[r * c + j] = v;
                                winner[r * c + j] = k;
                            }
                        }
                    }
                }
            }
            GroupReduce::Mean => {
                for r in 0..out_rows {
                    for k in 0..group {
                        let src = &data[(r * group + k) * c..(r * group + k + 1) * c];
                        add_into(&mut out[r * c..(r + 1) * c], src);
                    }
                }
                out.iter_mut().for_each(|v| *v /= group as f64);
            }
            GroupReduce::LogSumExp => {
                for r in 0..out_rows {
                    for j in 0..c {
                        let col = (0..group).map(|k| data[(r * group + k) * c + j]);
                        out[r * c + j] = kernels::log_sum_exp(col);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![out_rows, c], out),
            Op::ReduceGroups { x, group, mode, winner },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over independent sequences.
    ///
    /// `q`, `k`, `v` are `R×H` with `R` a multiple of `seq_len`; each run of
    /// `seq_len` rows is one sequence and only attends within itself. Head `j`
    /// uses columns `[j·d, (j+1)·d)` with `d = H/heads`, and computes
    /// `softmax(Q_j K_jᵀ / √d) V_j`. Head outputs are concatenated back to
    /// width `H`. Returns the output and a gradient-free
    /// `sequences × heads × seq_len × seq_len` tensor of attention
    /// probabilities (row = query, column = key).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<(Var, Var), TensorError> {
        let (rows, h) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(dim_err("attention", self.shape(q), self.shape(k)));
        }
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || h % heads != 0 {
            return Err(dim_err("attention", self.shape(q), &[seq_len, heads]));
        }
        let d = h / heads;
        let seqs = rows / seq_len;
        let scale = 1.0 / (d as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rows * h];
        let mut probs = vec![0.0; seqs * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for s in 0..seqs {
            for hd in 0..heads {
                let col = hd * d;
                for i in 0..seq_len {
                    let qrow = &qs[(s * seq_len + i) * h + col..][..d];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = &ks[(s * seq_len + j) * h + col..][..d];
                        *sc = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let p = &mut probs[((s * heads + hd) * seq_len + i) * seq_len..][..seq_len];
                    kernels::softmax_row(&scores, p);
                    let orow = &mut out[(s * seq_len + i) * h + col..][..d];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vs[(s * seq_len + j) * h + col..][..d];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let probs = self.constant(Tensor::from_parts(vec![seqs, heads, seq_len, seq_len], probs));
        let rg = self.rg(&[q, k, v]);
        let out = self.push(
            Tensor::from_parts(vec![rows, h], out),
            Op::Attention { q, k, v, probs, seq_len, heads },
            rg,
        );
        Ok((out, probs))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that requires
    /// one. Any gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of `v` after [`Tape::backward`], if `v` requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients of every bound parameter reached by the last backward pass,
    /// in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| Some((id, self.grads.get(v.0)?.as_deref()?)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC·Bᵀ
                    kernels::gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(self.data(b), n), 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = Aᵀ·dC
                    kernels::gemm(k, m, n, MatRef::transposed(self.data(a), k), MatRef::rows(g, n), 1.0, gb);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC·B
                    kernels::gemm(m, n, k, MatRef::rows(g, n), MatRef::rows(self.data(b), k), 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = dCᵀ·A
                    kernels::gemm(n, m, k, MatRef::transposed(g, n), MatRef::rows(self.data(a), k), 1.0, gb);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::AddBias { x, b } => {
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let n = gb.len();
                    for block in g.chunks(n) {
                        add_into(gb, block);
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += s * gi;
                    }
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
            }
            &Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for ((o, gi), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gi.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gi[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for ((o, gi), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = gi.iter().sum();
                        for j in 0..n {
                            o[j] += gi[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.value(*gamma).len();
                let gam = self.data(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for (r, ((o, gr), hr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            o[j] += inv / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let xs = self.data(x);
                let ws = self.data(w);
                let mut gx = self.take_acc(grads, x);
                let mut gw = self.take_acc(grads, w);
                let mut gb = b.and_then(|b| self.take_acc(grads, b));
                let in_len = geom.cin * geom.h * geom.w;
                let out_len = geom.cout * geom.h * geom.w;
                for (i, (item, gout)) in xs.chunks(in_len).zip(g.chunks(out_len)).enumerate() {
                    kernels::conv2d_backward(
                        geom,
                        item,
                        ws,
                        gout,
                        gx.as_deref_mut().map(|v| &mut v[i * in_len..(i + 1) * in_len]),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                restore(grads, x, gx);
                restore(grads, w, gw);
                if let Some(b) = b {
                    restore(grads, b, gb);
                }
            }
            Op::MaxPoolW2 { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inverse);
                    add_into(gx, &back);
                }
            }
            &Op::SliceLast { x, start } => {
                let n = *self.shape(x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for (o, gi) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut o[start..start + len], gi);
                    }
                }
            }
            &Op::SliceFirst { x, start } => {
                let inner: usize = self.shape(x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, x) {
                    add_into(&mut gx[start * inner..start * inner + g.len()], g);
                }
            }
            Op::ConcatLast { inputs } => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &v in inputs {
                    let w = *self.shape(v).last().unwrap();
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, gi) in gv.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(o, &gi[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::MeanRows { x } => {
                let c = g.len();
                let r = self.shape(x)[0] as f64;
                if let Some(gx) = self.acc(grads, x) {
                    for row in gx.chunks_mut(c) {
                        for (o, gi) in row.iter_mut().zip(g) {
                            *o += gi / r;
                        }
                    }
                }
            }
            Op::MaxOf { inputs, winner } => {
                for (k, &v) in inputs.iter().enumerate() {
                    if let Some(gv) = self.acc(grads, v) {
                        for ((o, gi), &wk) in gv.iter_mut().zip(g).zip(winner) {
                            if wk == k {
                                *o += gi;
                            }
                        }
                    }
                }
            }
            Op::LogSumExpOf { inputs } => {
                for &v in inputs {
                    let xs = self.data(v);
                    if let Some(gv) = self.acc(grads, v) {
                        for (i, o) in gv.iter_mut().enumerate() {
                            *o += g[i] * (xs[i] - out[i]).exp();
                        }
                    }
                }
            }
            &Op::Pick { x, index } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx[index] += g[0];
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let l = probs.len() / b;
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = g[0] / b as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..l {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * l + j] += s * (probs[i * l + j] - onehot);
                        }
                    }
                }
            }
            Op::Nll { logp, labels } => {
                let l = *self.shape(*logp).last().unwrap();
                let b = labels.len() as f64;
                if let Some(gl) = self.acc(grads, *logp) {
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * l + y] -= g[0] / b;
                    }
                }
            }
            Op::ReduceGroups { x, group, mode, winner } => {
                let c = *node.value.shape().last().unwrap();
                let group = *group;
                let xs = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..g.len() / c {
                        for k in 0..group {
                            let base = (r * group + k) * c;
                            for j in 0..c {
                                let gi = g[r * c + j];
                                gx[base + j] += match mode {
                                    GroupReduce::Max if winner[r * c + j] == k => gi,
                                    GroupReduce::Max => 0.0,
                                    GroupReduce::Mean => gi / group as f64,
                                    GroupReduce::LogSumExp => gi * (xs[base + j] - out[r * c + j]).exp(),
                                };
                            }
                        }
                    }
                }
            }
            &Op::Attention { q, k, v, probs, seq_len, heads } => {
                self.attention_backward(g, [q, k, v], self.data(probs), seq_len, heads, grads);
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        [q, k, v]: [Var; 3],
        probs: &[f64],
        seq_len: usize,
        heads: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let h = *self.shape(q).last().unwrap();
        let rows = self.value(q).len() / h;
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut gq = self.take_acc(grads, q);
        let mut gk = self.take_acc(grads, k);
        let mut gv = self.take_acc(grads, v);
        let mut dp = vec![0.0; seq_len];
        for s in 0..rows / seq_len {
            for hd in 0..heads {
                let col = hd * d;
                let row = |i: usize| (s * seq_len + i) * h + col;
                for i in 0..seq_len {
                    let p = &probs[((s * heads + hd) * seq_len + i) * seq_len..][..seq_len];
                    let go = &g[row(i)..][..d];
                    // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..seq_len {
                        let vrow = &vs[row(j)..][..d];
                        dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        if let Some(gv) = gv.as_deref_mut() {
                            for (o, gi) in gv[row(j)..][..d].iter_mut().zip(go) {
                                *o += p[j] * gi;
                            }
                        }
                    }
                    let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    for j in 0..seq_len {
                        // dS_ij = p_ij (dP_ij − Σ_l p_il dP_il), scaled into the scores
                        let ds = scale * p[j] * (dp[j] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        if let Some(gq) = gq.as_deref_mut() {
                            for (o, kk) in gq[row(i)..][..d].iter_mut().zip(&ks[row(j)..][..d]) {
                                *o += ds * kk;
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            for (o, qq) in gk[row(j)..][..d].iter_mut().zip(&qs[row(i)..][..d]) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            restore(grads, var, buf);
        }
    }

    /// Moves the gradient buffer of `v` out (zeros if absent) so several
    /// inputs can be written at once; pair with [`restore`].
    fn take_acc(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` needs no gradient.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Puts a buffer from [`Tape::take_acc`] back, summing if an aliased input
/// already restored one.
fn restore(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    let Some(buf) = buf else { return };
    match grads[v.0].as_mut() {
        Some(existing) => add_into(existing, &buf),
        None => grads[v.0] = Some(buf),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
