//! Raw forward/backward kernels shared by the tape and the plain
//! evaluation path. Both routes call the same functions, so taped and
//! untaped forwards agree bit for bit.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a batched 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(axis: &str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::dim(
            "conv2d",
            axis,
            format!("padded extent {padded} smaller than kernel {k}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::dim(
            "conv2d",
            axis,
            format!("({size} + 2*{pad} - {k}) not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    /// Validates `x` as `[N, C_in, H, W]` and `w` as `[C_out, C_in, K, K]`.
    pub fn infer(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::dim("conv2d", "input", format!("expected [N,C,H,W], got {x:?}")));
        }
        if w.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                "weight",
                format!("expected [C_out,C_in,K,K], got {w:?}"),
            ));
        }
        if w[1] != x[1] {
            return Err(Error::dim(
                "conv2d",
                "C_in",
                format!("input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        if w[2] != w[3] {
            return Err(Error::dim("conv2d", "K", format!("non-square kernel {w:?}")));
        }
        if w[2] % 2 == 0 {
            return Err(Error::dim("conv2d", "K", format!("kernel size {} is even", w[2])));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let out_h = out_extent("H", x[2], w[2], stride, pad)?;
        let out_w = out_extent("W", x[3], w[2], stride, pad)?;
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            k: w[2],
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out_h, self.out_w]
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + k - pad` lands
/// inside `[0, size)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw) = (g.h * g.w, g.out_h * g.out_w);
    let kk = g.k * g.k;
    let mut y = vec![0.0; g.batch * g.c_out * ohw];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let out = &mut y[(n * g.c_out + co) * ohw..][..ohw];
            if let Some(b) = bias {
                out.fill(b[co]);
            }
            for ci in 0..g.c_in {
                let xin = &x[(n * g.c_in + ci) * hw..][..hw];
                let wk = &w[(co * g.c_in + ci) * kk..][..kk];
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, g.pad, g.stride, g.h, g.out_h);
                    for kw in 0..g.k {
                        let (ow0, ow1) = valid_range(kw, g.pad, g.stride, g.w, g.out_w);
                        let wv = wk[kh * g.k + kw];
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row = &xin[ih * g.w..][..g.w];
                            let orow = &mut out[oh * g.out_w..][..g.out_w];
                            for ow in ow0..ow1 {
                                orow[ow] += wv * row[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (hw, ohw) = (g.h * g.w, g.out_h * g.out_w);
    let kk = g.k * g.k;
    if let Some(db) = db {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                db[co] += dy[(n * g.c_out + co) * ohw..][..ohw].iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let gout = &dy[(n * g.c_out + co) * ohw..][..ohw];
            for ci in 0..g.c_in {
                let xoff = (n * g.c_in + ci) * hw;
                let woff = (co * g.c_in + ci) * kk;
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, g.pad, g.stride, g.h, g.out_h);
                    for kw in 0..g.k {
                        let (ow0, ow1) = valid_range(kw, g.pad, g.stride, g.w, g.out_w);
                        let wv = w[woff + kh * g.k + kw];
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let grow = &gout[oh * g.out_w..][..g.out_w];
                            let base = xoff + ih * g.w;
                            if let Some(dx) = dx.as_deref_mut() {
                                let drow = &mut dx[base..base + g.w];
                                for ow in ow0..ow1 {
                                    drow[ow * g.stride + kw - g.pad] += wv * grow[ow];
                                }
                            }
                            if dw.is_some() {
                                let row = &x[base..base + g.w];
                                for ow in ow0..ow1 {
                                    acc += row[ow * g.stride + kw - g.pad] * grow[ow];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[woff + kh * g.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Checks `x: [N, in]`, `w: [out, in]`, `b: [out]`; returns `(N, in, out)`.
pub fn linear_dims(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if x.len() != 2 {
        return Err(Error::dim("linear", "input", format!("expected [N,in], got {x:?}")));
    }
    if w.len() != 2 {
        return Err(Error::dim("linear", "weight", format!("expected [out,in], got {w:?}")));
    }
    if x[1] != w[1] {
        return Err(Error::dim(
            "linear",
            "in",
            format!("input width {} vs weight width {}", x[1], w[1]),
        ));
    }
    if let Some(b) = b {
        if b != [w[0]] {
            return Err(Error::dim("linear", "bias", format!("expected [{}], got {b:?}", w[0])));
        }
    }
    Ok((x[0], x[1], w[0]))
}

/// `y = x wᵀ + b`.
pub fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for s in 0..n {
        let xr = &x[s * din..][..din];
        let yr = &mut y[s * dout..][..dout];
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = &w[o * din..][..din];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            *yv = dot + b.map_or(0.0, |b| b[o]);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for s in 0..n {
            let dxr = &mut dx[s * din..][..din];
            for o in 0..dout {
                let gy = dy[s * dout + o];
                if gy != 0.0 {
                    let wr = &w[o * din..][..din];
                    dxr.iter_mut().zip(wr).for_each(|(d, wv)| *d += gy * wv);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for s in 0..n {
            let xr = &x[s * din..][..din];
            for o in 0..dout {
                let gy = dy[s * dout + o];
                if gy != 0.0 {
                    let dwr = &mut dw[o * din..][..din];
                    dwr.iter_mut().zip(xr).for_each(|(d, xv)| *d += gy * xv);
                }
            }
        }
    }
    if let Some(db) = db {
        for s in 0..n {
            for o in 0..dout {
                db[o] += dy[s * dout + o];
            }
        }
    }
}

/// Channel count and per-channel spatial size for `[N, C]` or `[N, C, ...]`.
pub fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim("channel_affine", "input", format!("{shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

/// `y = (x - mean) * inv_std * scale + shift`, per channel.
pub fn channel_affine_forward(
    x: &[f64],
    shape: &[usize],
    scale: &[f64],
    shift: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> Vec<f64> {
    let (n, c, inner) = channel_dims(shape).expect("validated shape");
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let a = scale[ch] * inv_std[ch];
            let (m, b) = (mean[ch], shift[ch]);
            for i in off..off + inner {
                y[i] = (x[i] - m) * a + b;
            }
        }
    }
    y
}

pub fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..][..n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
    c
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Row-wise log-softmax of `[N, C]` logits.
pub fn log_softmax(logits: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for s in 0..n {
        let row = &logits[s * c..][..c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[s * c + j] = row[j] - lse;
        }
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Single-sample or batched convolution without gradient tracking.
///
/// `x` may be `[C_in, H, W]` or `[N, C_in, H, W]`; the output keeps the
/// same rank.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let single = x.ndim() == 3;
    let xs: Vec<usize> = if single {
        std::iter::once(1).chain(x.shape().iter().copied()).collect()
    } else {
        x.shape().to_vec()
    };
    let g = ConvGeom::infer(&xs, w.shape(), stride, pad)?;
    let y = conv2d_forward(x.data(), w.data(), None, &g);
    let mut shape = g.out_shape();
    if single {
        shape.remove(0);
    }
    Tensor::new(shape, y)
}
