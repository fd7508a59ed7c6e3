//! Forward and backward kernels over raw buffers. The [`Graph`](super::Graph)
//! wires these together; they are also usable directly for inference paths
//! that never need gradients.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::fom::Roi;

/// Row-major `C = alpha·op(A)·op(B) + beta·C` with `op(A)` of size `m×k`.
///
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides and extents describe regions inside the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias_len: usize, stride: usize, pad: usize) -> Result<Self> {
        let [_, in_c, in_h, in_w] = input.shape();
        let [out_c, w_in_c, kh, kw] = weight.shape();
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if w_in_c != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {} input channels, input has {}", w_in_c, in_c),
            ));
        }
        if bias_len != out_c {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", bias_len, out_c),
            ));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit padded input {}x{}",
                    kh,
                    kw,
                    in_h + 2 * pad,
                    in_w + 2 * pad
                ),
            ));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let batch = x.n();
    let p = g.positions();
    let k = g.patch_len();
    let mut out = Tensor::zeros([batch, g.out_c, g.out_h, g.out_w]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_len = x.item_len();
    let out_len = g.out_c * p;
    for n in 0..batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let yn = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (c, row) in yn.chunks_mut(p).enumerate() {
            row.fill(bias[c]);
        }
        let cols: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(g.out_c, k, p, weight, false, cols, false, yn, 1.0);
    }
    out
}

/// Accumulates `dW`, `db` and (optionally) `dX` for a convolution.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &Tensor,
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let batch = x.n();
    let p = g.positions();
    let k = g.patch_len();
    let in_len = x.item_len();
    let out_len = g.out_c * p;
    if let Some(db) = db {
        for n in 0..batch {
            for (c, row) in dy[n * out_len..(n + 1) * out_len].chunks(p).enumerate() {
                db[c] += row.iter().sum::<f64>();
            }
        }
    }
    if let Some(dw) = dw {
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for n in 0..batch {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let cols: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            gemm(g.out_c, p, k, &dy[n * out_len..(n + 1) * out_len], false, cols, true, dw, 1.0);
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; k * p];
        for n in 0..batch {
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, g.out_c, p, weight, true, dyn_, false, dxn, 1.0);
            } else {
                gemm(k, g.out_c, p, weight, true, dyn_, false, &mut dcol, 0.0);
                col2im(g, &dcol, dxn);
            }
        }
    }
}

/// Source-index table for align-corners-false bilinear resampling along one
/// axis: `(low, high, frac)` per output index.
pub fn resize_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == in_len - 1 { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn resize_bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for (plane_idx, dst) in out.data_mut().chunks_mut(out_h * out_w).enumerate() {
        let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(in_shape: [usize; 4], dy: &[f64], out_h: usize, out_w: usize, dx: &mut [f64]) {
    let [_, _, h, w] = in_shape;
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    for (plane_idx, g) in dy.chunks(out_h * out_w).enumerate() {
        let dst = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

/// Pooling windows along one axis as half-open `[start, end)` ranges.
pub type Windows = Vec<(usize, usize)>;

pub fn fixed_windows(len: usize, k: usize, stride: usize) -> Windows {
    let out = (len - k) / stride + 1;
    (0..out).map(|o| (o * stride, o * stride + k)).collect()
}

pub fn adaptive_windows(len: usize, out: usize) -> Windows {
    (0..out)
        .map(|o| {
            let start = o * len / out;
            let end = ((o + 1) * len).div_ceil(out);
            (start, end)
        })
        .collect()
}

/// Window max; returns the output and, per output cell, the flat input index
/// of the first maximal element in row-major order.
pub fn max_pool_forward(x: &Tensor, ys: &Windows, xs: &Windows) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; numel([n, c, oh, ow])];
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let src = &x.data()[base..base + h * w];
        for (oy, &(y0, y1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1)) in xs.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let v = src[yy * w + xx];
                        if v > best {
                            best = v;
                            best_idx = yy * w + xx;
                        }
                    }
                }
                let o = (plane_idx * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                argmax[o] = base + best_idx;
            }
        }
    }
    (out, argmax)
}

/// Bilinear read of a plane at grid coordinates `(y, x)` where integer
/// coordinates are pixel centres. Reads outside the plane are zero.
///
/// Returns `(value, d/dy, d/dx)`.
#[inline]
pub fn bilinear_zero_pad(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let y0 = y0f as isize;
    let x0 = x0f as isize;
    let read = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1);
    let v10 = read(y0 + 1, x0);
    let v11 = read(y0 + 1, x0 + 1);
    let value = (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11);
    let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (value, dy, dx)
}

#[inline]
fn bilinear_scatter(plane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let y0 = y0f as isize;
    let x0 = x0f as isize;
    let mut put = |yy: isize, xx: isize, wgt: f64| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            plane[yy as usize * w + xx as usize] += g * wgt;
        }
    };
    put(y0, x0, (1.0 - ly) * (1.0 - lx));
    put(y0, x0 + 1, (1.0 - ly) * lx);
    put(y0 + 1, x0, ly * (1.0 - lx));
    put(y0 + 1, x0 + 1, ly * lx);
}

/// Continuous sample positions (feature-map pixels, pixel `i` spans
/// `[i, i+1)`) for bin `(by, bx)` of a RoI, before any offset.
#[inline]
fn bin_samples(roi: &Roi, k: usize, sampling: usize, by: usize, bx: usize) -> impl Iterator<Item = (f64, f64)> {
    let bin_h = roi.height() / k as f64;
    let bin_w = roi.width() / k as f64;
    let y_start = roi.y1 + by as f64 * bin_h;
    let x_start = roi.x1 + bx as f64 * bin_w;
    let s = sampling as f64;
    (0..sampling).flat_map(move |sy| {
        (0..sampling).map(move |sx| {
            (
                y_start + (sy as f64 + 0.5) * bin_h / s,
                x_start + (sx as f64 + 0.5) * bin_w / s,
            )
        })
    })
}

/// Offsets layout: `[R, 2·k·k, 1, 1]`, bin `b = by·k + bx` stores `(dx, dy)`
/// at `2b`, `2b + 1`.
pub fn roi_sample_forward(feature: &Tensor, rois: &[Roi], offsets: Option<&[f64]>, k: usize, sampling: usize) -> Tensor {
    let [_, c, h, w] = feature.shape();
    let mut out = Tensor::zeros([rois.len(), c, k, k]);
    let norm = 1.0 / (sampling * sampling) as f64;
    let out_item = c * k * k;
    for (r, roi) in rois.iter().enumerate() {
        let fbase = roi.batch * c * h * w;
        for by in 0..k {
            for bx in 0..k {
                let b = by * k + bx;
                let (odx, ody) = match offsets {
                    Some(o) => (o[r * 2 * k * k + 2 * b], o[r * 2 * k * k + 2 * b + 1]),
                    None => (0.0, 0.0),
                };
                for (py, px) in bin_samples(roi, k, sampling, by, bx) {
                    let gy = py + ody - 0.5;
                    let gx = px + odx - 0.5;
                    for ch in 0..c {
                        let plane = &feature.data()[fbase + ch * h * w..fbase + (ch + 1) * h * w];
                        let (v, _, _) = bilinear_zero_pad(plane, h, w, gy, gx);
                        out.data_mut()[r * out_item + ch * k * k + b] += v * norm;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn roi_sample_backward(
    feature: &Tensor,
    rois: &[Roi],
    offsets: Option<&[f64]>,
    k: usize,
    sampling: usize,
    dy: &[f64],
    mut dfeature: Option<&mut [f64]>,
    mut doffsets: Option<&mut [f64]>,
) {
    let [_, c, h, w] = feature.shape();
    let norm = 1.0 / (sampling * sampling) as f64;
    let out_item = c * k * k;
    for (r, roi) in rois.iter().enumerate() {
        let fbase = roi.batch * c * h * w;
        for by in 0..k {
            for bx in 0..k {
                let b = by * k + bx;
                let (odx, ody) = match offsets {
                    Some(o) => (o[r * 2 * k * k + 2 * b], o[r * 2 * k * k + 2 * b + 1]),
                    None => (0.0, 0.0),
                };
                let mut g_dx = 0.0;
                let mut g_dy = 0.0;
                for (py, px) in bin_samples(roi, k, sampling, by, bx) {
                    let gy = py + ody - 0.5;
                    let gx = px + odx - 0.5;
                    for ch in 0..c {
                        let g = dy[r * out_item + ch * k * k + b] * norm;
                        if g == 0.0 {
                            continue;
                        }
                        let range = fbase + ch * h * w..fbase + (ch + 1) * h * w;
                        if doffsets.is_some() {
                            let (_, vy, vx) = bilinear_zero_pad(&feature.data()[range.clone()], h, w, gy, gx);
                            g_dy += g * vy;
                            g_dx += g * vx;
                        }
                        if let Some(df) = dfeature.as_deref_mut() {
                            bilinear_scatter(&mut df[range], h, w, gy, gx, g);
                        }
                    }
                }
                if let Some(doff) = doffsets.as_deref_mut() {
                    doff[r * 2 * k * k + 2 * b] += g_dx;
                    doff[r * 2 * k * k + 2 * b + 1] += g_dy;
                }
            }
        }
    }
}

/// Row-wise softmax over the last axis of a `rows × cols` buffer.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}
