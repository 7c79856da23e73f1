//! Straight-line reference implementations used as test oracles.
//!
//! Everything here is written with explicit loops over plain vectors and
//! reads parameters by name, so it shares no code with the tape kernels.

#![allow(clippy::needless_range_loop, dead_code)]

use tssan_core::skeleton::SkeletonClip;
use tssan_tensor::ParamStore;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("no parameter named {name}"));
    store.value(id).data()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x·W + b` with `W` stored `in × out` under `<name>.weight`.
pub fn linear(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let out = b.len();
    assert_eq!(w.len(), x.cols * out);
    let mut y = Mat::zeros(x.rows, out);
    for r in 0..x.rows {
        for o in 0..out {
            let mut acc = b[o];
            for i in 0..x.cols {
                acc += x.at(r, i) * w[i * out + o];
            }
            y.set(r, o, acc);
        }
    }
    y
}

pub fn relu(x: &Mat) -> Mat {
    Mat::new(x.rows, x.cols, x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn layer_norm_rows(x: &Mat, gain: &[f64], shift: &[f64]) -> Mat {
    let mut y = Mat::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let mean: f64 = x.row(r).iter().sum::<f64>() / n;
        let var: f64 = x.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + 1e-5).sqrt();
        for c in 0..x.cols {
            y.set(r, c, gain[c] * (x.at(r, c) - mean) / denom + shift[c]);
        }
    }
    y
}

pub fn layer_norm(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    layer_norm_rows(
        x,
        param(store, &format!("{name}.gain")),
        param(store, &format!("{name}.shift")),
    )
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Multi-head attention on one sequence given already projected Q, K, V.
/// Returns the concatenated head outputs and `heads` probability matrices.
pub fn attention_heads(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let f = q.rows;
    let d = q.cols / heads;
    let mut out = Mat::zeros(f, q.cols);
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut p = Mat::zeros(f, f);
        for i in 0..f {
            let mut scores = vec![0.0; f];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.at(i, h * d + c) * k.at(j, h * d + c);
                }
                *s = dot / (d as f64).sqrt();
            }
            let row = softmax(&scores);
            for j in 0..f {
                p.set(i, j, row[j]);
            }
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..f {
                    acc += row[j] * v.at(j, h * d + c);
                }
                out.set(i, h * d + c, acc);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Projected attention of one layer: returns output-projected heads and probabilities.
pub fn attention_layer(y: &Mat, store: &ParamStore, layer: &str, heads: usize) -> (Mat, Vec<Mat>) {
    let q = linear(y, store, &format!("{layer}.query"));
    let k = linear(y, store, &format!("{layer}.key"));
    let v = linear(y, store, &format!("{layer}.value"));
    let (h, probs) = attention_heads(&q, &k, &v, heads);
    (linear(&h, store, &format!("{layer}.output")), probs)
}

/// One post-norm layer in evaluation mode.
pub fn san_layer(y: &Mat, store: &ParamStore, layer: &str, heads: usize) -> (Mat, Vec<Mat>) {
    let (attn, probs) = attention_layer(y, store, layer, heads);
    let a = layer_norm(&add(y, &attn), store, &format!("{layer}.attn_norm"));
    let f = relu(&linear(&a, store, &format!("{layer}.ffn_in")));
    let f = linear(&f, store, &format!("{layer}.ffn_out"));
    (layer_norm(&add(&a, &f), store, &format!("{layer}.ffn_norm")), probs)
}

/// Full block on one `F × H` sequence in evaluation mode.
pub fn san_block(x: &Mat, store: &ParamStore, block: &str, layers: usize, heads: usize) -> (Vec<f64>, Vec<Vec<Mat>>) {
    let p = param(store, &format!("{block}.position"));
    let mut y = x.clone();
    for t in 0..x.rows {
        for c in 0..x.cols {
            y.set(t, c, x.at(t, c) + p[t * x.cols + c]);
        }
    }
    let mut concat = Mat::zeros(x.rows, x.cols * layers);
    let mut traces = Vec::new();
    for i in 0..layers {
        let (z, probs) = san_layer(&y, store, &format!("{block}.layer{i}"), heads);
        for t in 0..x.rows {
            for c in 0..x.cols {
                concat.set(t, i * x.cols + c, z.at(t, c));
            }
        }
        traces.push(probs);
        y = z;
    }
    let mut mean = Mat::zeros(1, concat.cols);
    for c in 0..concat.cols {
        let s: f64 = (0..concat.rows).map(|t| concat.at(t, c)).sum();
        mean.set(0, c, s / concat.rows as f64);
    }
    let o = relu(&linear(&mean, store, &format!("{block}.proj")));
    (o.data, traces)
}

/// Six-loop same-padded cross-correlation; `x` is `cin × h × w`.
#[allow(clippy::too_many_arguments)]
pub fn conv_naive(x: &[f64], cin: usize, h: usize, w: usize, kernel: &[f64], bias: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let cout = bias.len();
    assert_eq!(kernel.len(), cout * cin * kh * kw);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (y, x_) = (i as isize + a as isize - ph, j as isize + b as isize - pw);
                            if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                                continue;
                            }
                            acc += kernel[((o * cin + c) * kh + a) * kw + b]
                                * x[(c * h + y as usize) * w + x_ as usize];
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

pub fn pool_naive(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w / 2];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w / 2 {
                let a = x[(ch * h + i) * w + 2 * j];
                let b = x[(ch * h + i) * w + 2 * j + 1];
                out[(ch * h + i) * (w / 2) + j] = if b > a { b } else { a };
            }
        }
    }
    out
}

fn relu_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn conv_layer(x: &[f64], cin: usize, h: usize, w: usize, store: &ParamStore, name: &str) -> Vec<f64> {
    let k = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let kh = if name.ends_with("conv1") { 1 } else { 3 };
    let kw = if name.ends_with("conv1") || name.ends_with("conv2") { 1 } else { 3 };
    relu_vec(conv_naive(x, cin, h, w, k, b, kh, kw))
}

/// Convolutional encoder on one `F × J × C` input (eval mode), `F × 512` out.
pub fn cnn_encoder(x: &[f64], f: usize, j: usize, c: usize, store: &ParamStore, name: &str) -> Mat {
    // Coordinates as channels over (frame, joint).
    let mut chw = vec![0.0; c * f * j];
    for t in 0..f {
        for jj in 0..j {
            for cc in 0..c {
                chw[(cc * f + t) * j + jj] = x[(t * j + jj) * c + cc];
            }
        }
    }
    let h1 = conv_layer(&chw, c, f, j, store, &format!("{name}.conv1"));
    let h2 = conv_layer(&h1, 64, f, j, store, &format!("{name}.conv2"));
    // 32 × F × J → J × F × 32.
    let mut t2 = vec![0.0; j * f * 32];
    for ch in 0..32 {
        for t in 0..f {
            for jj in 0..j {
                t2[(jj * f + t) * 32 + ch] = h2[(ch * f + t) * j + jj];
            }
        }
    }
    let h3 = conv_layer(&t2, j, f, 32, store, &format!("{name}.conv3"));
    let p3 = pool_naive(&h3, 32, f, 32);
    let h4 = conv_layer(&p3, 32, f, 16, store, &format!("{name}.conv4"));
    let p4 = pool_naive(&h4, 64, f, 16);
    let mut out = Mat::zeros(f, 512);
    for t in 0..f {
        for col in 0..8 {
            for ch in 0..64 {
                out.set(t, col * 64 + ch, p4[(ch * f + t) * 8 + col]);
            }
        }
    }
    out
}

/// Feed-forward encoder on one `F × J × C` input, `F × J·C′` out.
pub fn ff_encoder(x: &[f64], f: usize, j: usize, c: usize, store: &ParamStore, name: &str) -> Mat {
    let w = param(store, &format!("{name}.proj.weight"));
    let b = param(store, &format!("{name}.proj.bias"));
    let width = b.len();
    let mut out = Mat::zeros(f, j * width);
    for t in 0..f {
        for jj in 0..j {
            for o in 0..width {
                let mut acc = b[o];
                for cc in 0..c {
                    acc += x[(t * j + jj) * c + cc] * w[cc * width + o];
                }
                out.set(t, jj * width + o, if acc > 0.0 { acc } else { 0.0 });
            }
        }
    }
    out
}

pub fn encode(kind: &str, x: &[f64], f: usize, j: usize, c: usize, store: &ParamStore, name: &str) -> Mat {
    match kind {
        "cnn" => cnn_encoder(x, f, j, c, store, name),
        _ => ff_encoder(x, f, j, c, store, name),
    }
}

/// Frame differences with a zero final frame, as a flat copy of the clip layout.
pub fn motion(clip: &SkeletonClip) -> Vec<f64> {
    let (f, s, j, c) = (clip.frames(), clip.persons(), clip.joints(), clip.coords());
    let mut out = vec![0.0; f * s * j * c];
    for t in 0..f - 1 {
        for ss in 0..s {
            for jj in 0..j {
                for cc in 0..c {
                    out[((t * s + ss) * j + jj) * c + cc] = clip.at(t + 1, ss, jj, cc) - clip.at(t, ss, jj, cc);
                }
            }
        }
    }
    out
}

/// Person `s` of a flat `F × S × J × C` array as `F × J × C`.
pub fn person(data: &[f64], f: usize, s_n: usize, j: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(f * j * c);
    for t in 0..f {
        let off = ((t * s_n + s) * j) * c;
        out.extend_from_slice(&data[off..off + j * c]);
    }
    out
}

pub fn classifier(x: &[f64], store: &ParamStore, name: &str) -> Vec<f64> {
    let m = relu(&Mat::new(1, x.len(), x.to_vec()));
    linear(&m, store, name).data
}

/// Early-fusion network on one clip.
pub fn v1(clip: &SkeletonClip, store: &ParamStore, encoder: &str, layers: usize, heads: usize) -> Vec<f64> {
    let (f, s, j, c) = (clip.frames(), clip.persons(), clip.joints(), clip.coords());
    let m = motion(clip);
    let mut fused = Vec::with_capacity(2 * f * s * j * c);
    for t in 0..f {
        let n = s * j * c;
        fused.extend_from_slice(&clip.positions()[t * n..(t + 1) * n]);
        fused.extend_from_slice(&m[t * n..(t + 1) * n]);
    }
    let feats = encode(encoder, &fused, f, 2 * s * j, c, store, "encoder");
    let (o, _) = san_block(&feats, store, "san", layers, heads);
    classifier(&o, store, "head")
}

/// Per-person network with a shared block and a max over block outputs.
pub fn v2(clip: &SkeletonClip, store: &ParamStore, encoder: &str, layers: usize, heads: usize) -> Vec<f64> {
    let (f, s_n, j, c) = (clip.frames(), clip.persons(), clip.joints(), clip.coords());
    let m = motion(clip);
    let mut merged: Option<Vec<f64>> = None;
    for s in 0..s_n {
        let ep = encode(encoder, &person(clip.positions(), f, s_n, j, c, s), f, j, c, store, "position_encoder");
        let em = encode(encoder, &person(&m, f, s_n, j, c, s), f, j, c, store, "motion_encoder");
        let mut x = Mat::zeros(f, ep.cols + em.cols);
        for t in 0..f {
            for k in 0..ep.cols {
                x.set(t, k, ep.at(t, k));
                x.set(t, ep.cols + k, em.at(t, k));
            }
        }
        let (o, _) = san_block(&x, store, "san", layers, heads);
        merged = Some(match merged {
            None => o,
            Some(prev) => prev.iter().zip(&o).map(|(a, b)| if b > a { *b } else { *a }).collect(),
        });
    }
    classifier(&merged.unwrap(), store, "head")
}

/// Per-modality network: position, motion and concatenated heads.
pub fn v3(clip: &SkeletonClip, store: &ParamStore, encoder: &str, layers: usize, heads: usize) -> [Vec<f64>; 3] {
    let (f, s_n, j, c) = (clip.frames(), clip.persons(), clip.joints(), clip.coords());
    let m = motion(clip);
    let mut outs = Vec::new();
    for (data, name) in [(clip.positions().to_vec(), "position"), (m, "motion")] {
        let mut merged: Option<Mat> = None;
        for s in 0..s_n {
            let e = encode(encoder, &person(&data, f, s_n, j, c, s), f, j, c, store, &format!("{name}_encoder"));
            merged = Some(match merged {
                None => e,
                Some(prev) => Mat::new(
                    e.rows,
                    e.cols,
                    prev.data.iter().zip(&e.data).map(|(a, b)| if b > a { *b } else { *a }).collect(),
                ),
            });
        }
        let (o, _) = san_block(&merged.unwrap(), store, &format!("{name}_san"), layers, heads);
        outs.push(o);
    }
    let both: Vec<f64> = outs[0].iter().chain(&outs[1]).copied().collect();
    [
        classifier(&outs[0], store, "position_head"),
        classifier(&outs[1], store, "motion_head"),
        classifier(&both, store, "concat_head"),
    ]
}

/// Worst relative error between tape gradients and central differences
/// (step 1e-5) over every scalar of every parameter, with the name of the
/// worst parameter. `loss` builds a scalar on a fresh tape from a store;
/// `floor` bounds the denominator for gradients that are exactly zero.
pub fn param_grad_error(
    store: &ParamStore,
    floor: f64,
    loss: impl Fn(&ParamStore, &mut tssan_tensor::Tape) -> tssan_tensor::Var,
) -> (f64, String) {
    use tssan_tensor::gradcheck::{central_difference, max_relative_error};
    use tssan_tensor::{Tape, Tensor};

    let mut tape = Tape::new();
    let l = loss(store, &mut tape);
    tape.backward(l).unwrap();
    let grads: std::collections::HashMap<_, Vec<f64>> =
        tape.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
    let mut worst = (0.0, String::new());
    let mut probe = store.clone();
    for id in store.ids() {
        let shape = store.value(id).shape().to_vec();
        let point = store.value(id).data().to_vec();
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; point.len()]);
        let numeric = central_difference(
            |p| {
                probe.set_value(id, Tensor::new(shape.clone(), p.to_vec()).unwrap()).unwrap();
                let mut t = Tape::new();
                let l = loss(&probe, &mut t);
                t.value(l).item()
            },
            &point,
            1e-5,
        );
        probe.set_value(id, Tensor::new(shape.clone(), point).unwrap()).unwrap();
        let err = max_relative_error(&analytic, &numeric, floor);
        if err > worst.0 {
            worst = (err, store.get(id).name.clone());
        }
    }
    worst
}

/// `sum(out ⊙ R)` for a fixed pseudo-random `R`, as a scalar on the tape.
pub fn contract(tape: &mut tssan_tensor::Tape, out: tssan_tensor::Var, seed: u64) -> tssan_tensor::Var {
    use rand::{Rng, SeedableRng};
    let shape = tape.shape(out).to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let r = tssan_tensor::Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p)
}

/// Replaces every bias with small random values so no rectifier sits exactly
/// at its kink, which would make finite differences meaningless.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.ends_with(".bias") {
            let shape = store.value(id).shape().to_vec();
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            store.set_value(id, tssan_tensor::Tensor::new(shape, v).unwrap()).unwrap();
        }
    }
}
