//! Raw slice kernels shared by the forward and backward passes.

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = beta·c + a·b` where `a` is `m×k`, `b` is `k×n` and `c` is row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(k == 0 || n == 0 || b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1, same-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pads(&self) -> (isize, isize) {
        ((self.kh / 2) as isize, (self.kw / 2) as isize)
    }
}

pub(crate) fn conv2d_forward(g: ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvGeom { cin, cout, h, w: wd, kh, kw } = g;
    let (ph, pw) = g.pads();
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..kh {
                for dx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + dy) * kw + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let oy = dy as isize - ph;
                    let ox = dx as isize - pw;
                    let (y0, y1) = valid_range(oy, h);
                    let (x0, x1) = valid_range(ox, wd);
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let orow = &mut o[y * wd..(y + 1) * wd];
                        let irow = &xin[sy * wd..(sy + 1) * wd];
                        for xx in x0..x1 {
                            orow[xx] += wv * irow[(xx as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let ConvGeom { cin, cout, h, w: wd, kh, kw } = g;
    let (ph, pw) = g.pads();
    let plane = h * wd;
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += gout[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    for co in 0..cout {
        let go = &gout[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let widx = ((co * cin + ci) * kh + dy) * kw + dx;
                    let oy = dy as isize - ph;
                    let ox = dx as isize - pw;
                    let (y0, y1) = valid_range(oy, h);
                    let (x0, x1) = valid_range(ox, wd);
                    if let Some(gw) = gw.as_deref_mut() {
                        let xin = &x[ci * plane..(ci + 1) * plane];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                acc += go[y * wd + xx] * xin[sy * wd + (xx as isize + ox) as usize];
                            }
                        }
                        gw[widx] += acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[widx];
                        if wv == 0.0 {
                            continue;
                        }
                        let gin = &mut gx[ci * plane..(ci + 1) * plane];
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                gin[sy * wd + (xx as isize + ox) as usize] += wv * go[y * wd + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `p` in `[0, extent)` whose source `p + offset` is in bounds.
fn valid_range(offset: isize, extent: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Max over adjacent pairs along the last axis. Returns values and the flat
/// source index of each winner (first index on ties).
pub(crate) fn maxpool_w2(x: &[f64], w: usize) -> (Vec<f64>, Vec<usize>) {
    let rows = x.len() / w;
    let half = w / 2;
    let mut out = Vec::with_capacity(rows * half);
    let mut arg = Vec::with_capacity(rows * half);
    for r in 0..rows {
        for j in 0..half {
            let i = r * w + 2 * j;
            let (v, a) = if x[i + 1] > x[i] { (x[i + 1], i + 1) } else { (x[i], i) };
            out.push(v);
            arg.push(a);
        }
    }
    (out, arg)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
