//! Channel-major (C, H, W) tensors and the forward/backward kernels the
//! network is built from: 3x3 and 1x1 convolution, ReLU, 2x2 max pooling,
//! and 2x nearest-neighbor upsampling.
//!
//! Everything runs in f64 with fixed reduction orders, so results are
//! bit-identical no matter how work is scheduled around these kernels.

use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_plane(h: usize, w: usize, plane: Vec<f64>) -> Self {
        debug_assert_eq!(plane.len(), h * w);
        Tensor {
            c: 1,
            h,
            w,
            data: plane,
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Valid destination rows for a kernel row shifted by `dy`: dst row y reads
/// src row y + dy.
#[inline]
fn row_range(h: usize, dy: isize) -> (usize, usize) {
    let lo = if dy < 0 { (-dy) as usize } else { 0 };
    let hi = if dy > 0 { h - dy as usize } else { h };
    (lo, hi)
}

/// dst[x] += wl*src[x-1] + wc*src[x] + wr*src[x+1], taps off either edge
/// dropped (zero padding). The shifted-slice zip is the form LLVM
/// vectorizes cleanly.
#[inline]
fn stencil_row(dst: &mut [f64], src: &[f64], wl: f64, wc: f64, wr: f64) {
    let n = dst.len();
    if n == 1 {
        dst[0] += wc * src[0];
        return;
    }
    dst[0] += wc * src[0] + wr * src[1];
    let s0 = &src[..n - 2];
    let s1 = &src[1..n - 1];
    let s2 = &src[2..n];
    for (((d, &a), &b), &c) in dst[1..n - 1].iter_mut().zip(s0).zip(s1).zip(s2) {
        *d += wl * a + wc * b + wr * c;
    }
    dst[n - 1] += wl * src[n - 2] + wc * src[n - 1];
}

/// Three tap correlations of one row pair in a single pass:
/// (sum d[x]*s[x-1], sum d[x]*s[x], sum d[x]*s[x+1]).
#[inline]
fn stencil_corr(d: &[f64], s: &[f64]) -> (f64, f64, f64) {
    let n = d.len();
    if n == 1 {
        return (0.0, d[0] * s[0], 0.0);
    }
    let mut left = 0.0;
    let mut center = d[0] * s[0];
    let mut right = d[0] * s[1];
    let s0 = &s[..n - 2];
    let s1 = &s[1..n - 1];
    let s2 = &s[2..n];
    for (((&dd, &a), &b), &c) in d[1..n - 1].iter().zip(s0).zip(s1).zip(s2) {
        left += dd * a;
        center += dd * b;
        right += dd * c;
    }
    left += d[n - 1] * s[n - 2];
    center += d[n - 1] * s[n - 1];
    (left, center, right)
}

/// 3x3 convolution with zero padding 1 and stride 1.
/// Weights are laid out [out_ch][in_ch][ky][kx], one bias per out channel.
/// Each output row accumulates in an L1-resident buffer and is written
/// exactly once; output channels are independent, so they run in parallel
/// with bit-identical results.
pub fn conv3x3_forward(inp: &Tensor, w: &[f64], b: &[f64], out_ch: usize) -> Tensor {
    let (ci, h, wd) = (inp.c, inp.h, inp.w);
    debug_assert_eq!(w.len(), out_ch * ci * 9);
    let mut out = Tensor::zeros(out_ch, h, wd);
    out.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(oc, dst)| {
            let mut row = vec![0.0f64; wd];
            for y in 0..h {
                row.fill(b[oc]);
                for ic in 0..ci {
                    let src = inp.channel(ic);
                    let wbase = (oc * ci + ic) * 9;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * wd..(sy as usize + 1) * wd];
                        stencil_row(
                            &mut row,
                            srow,
                            w[wbase + ky * 3],
                            w[wbase + ky * 3 + 1],
                            w[wbase + ky * 3 + 2],
                        );
                    }
                }
                dst[y * wd..(y + 1) * wd].copy_from_slice(&row);
            }
        });
    out
}

/// Gradient of a 3x3 convolution with respect to its input: the same
/// stencil with the kernel transposed and flipped, parallel over input
/// channels.
pub fn conv3x3_backward_input(dout: &Tensor, w: &[f64], in_ch: usize) -> Tensor {
    let (co, h, wd) = (dout.c, dout.h, dout.w);
    let mut din = Tensor::zeros(in_ch, h, wd);
    din.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(ic, dst)| {
            let mut row = vec![0.0f64; wd];
            for sy in 0..h {
                row.fill(0.0);
                for oc in 0..co {
                    let dsrc = dout.channel(oc);
                    let wbase = (oc * in_ch + ic) * 9;
                    for ky in 0..3 {
                        // din row sy accumulates from dout row sy - (ky - 1).
                        let y = sy as isize - (ky as isize - 1);
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let drow = &dsrc[y as usize * wd..(y as usize + 1) * wd];
                        stencil_row(
                            &mut row,
                            drow,
                            w[wbase + ky * 3 + 2],
                            w[wbase + ky * 3 + 1],
                            w[wbase + ky * 3],
                        );
                    }
                }
                dst[sy * wd..(sy + 1) * wd].copy_from_slice(&row);
            }
        });
    din
}

/// Gradient of a 3x3 convolution with respect to weights and biases,
/// accumulated into `dw` / `db`; parallel over output channels (each owns
/// a disjoint slice of both).
pub fn conv3x3_backward_params(inp: &Tensor, dout: &Tensor, dw: &mut [f64], db: &mut [f64]) {
    let (ci, h, wd) = (inp.c, inp.h, inp.w);
    let co = dout.c;
    debug_assert_eq!(dw.len(), co * ci * 9);
    dw.par_chunks_mut(ci * 9)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(oc, (dw_oc, db_oc))| {
            let dsrc = dout.channel(oc);
            *db_oc += dsrc.iter().sum::<f64>();
            for ic in 0..ci {
                let src = inp.channel(ic);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (ylo, yhi) = row_range(h, dy);
                    let mut acc = (0.0, 0.0, 0.0);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let (l, c, r) =
                            stencil_corr(&dsrc[y * wd..y * wd + wd], &src[sy * wd..sy * wd + wd]);
                        acc.0 += l;
                        acc.1 += c;
                        acc.2 += r;
                    }
                    dw_oc[ic * 9 + ky * 3] += acc.0;
                    dw_oc[ic * 9 + ky * 3 + 1] += acc.1;
                    dw_oc[ic * 9 + ky * 3 + 2] += acc.2;
                }
            }
        });
}

/// 1x1 convolution. Weights [out_ch][in_ch], one bias per out channel.
pub fn conv1x1_forward(inp: &Tensor, w: &[f64], b: &[f64], out_ch: usize) -> Tensor {
    let (ci, h, wd) = (inp.c, inp.h, inp.w);
    let mut out = Tensor::zeros(out_ch, h, wd);
    for oc in 0..out_ch {
        out.channel_mut(oc).fill(b[oc]);
        for ic in 0..ci {
            let wgt = w[oc * ci + ic];
            let src = inp.channel(ic);
            axpy(out.channel_mut(oc), src, wgt);
        }
    }
    out
}

pub fn conv1x1_backward_input(dout: &Tensor, w: &[f64], in_ch: usize) -> Tensor {
    let co = dout.c;
    let mut din = Tensor::zeros(in_ch, dout.h, dout.w);
    for oc in 0..co {
        let dsrc = dout.channel(oc);
        for ic in 0..in_ch {
            axpy(din.channel_mut(ic), dsrc, w[oc * in_ch + ic]);
        }
    }
    din
}

pub fn conv1x1_backward_params(inp: &Tensor, dout: &Tensor, dw: &mut [f64], db: &mut [f64]) {
    let ci = inp.c;
    for oc in 0..dout.c {
        let dsrc = dout.channel(oc);
        db[oc] += dsrc.iter().sum::<f64>();
        for ic in 0..ci {
            dw[oc * ci + ic] += dot(dsrc, inp.channel(ic));
        }
    }
}

/// In-place ReLU; returns the activation mask for the backward pass.
pub fn relu_forward(t: &mut Tensor) -> Vec<u8> {
    let mut mask = vec![0u8; t.data.len()];
    for (v, m) in t.data.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = 1;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu_backward(dout: &mut Tensor, mask: &[u8]) {
    for (d, &m) in dout.data.iter_mut().zip(mask) {
        if m == 0 {
            *d = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2 (even H and W). Ties go to the first
/// element in (row, col) scan order; returned indices are flat positions in
/// the input channel plane, for the backward scatter.
pub fn maxpool2_forward(inp: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (inp.c, inp.h, inp.w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = inp.channel(ch);
        let dst = out.channel_mut(ch);
        let abase = ch * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let i00 = (2 * y) * w + 2 * x;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = src[best];
                for &i in &candidates[1..] {
                    if src[i] > best_v {
                        best_v = src[i];
                        best = i;
                    }
                }
                dst[y * ow + x] = best_v;
                arg[abase + y * ow + x] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dout: &Tensor, arg: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let c = dout.c;
    let mut din = Tensor::zeros(c, in_h, in_w);
    let n = dout.h * dout.w;
    for ch in 0..c {
        let dsrc = dout.channel(ch);
        let ddst = din.channel_mut(ch);
        for (i, &d) in dsrc.iter().enumerate() {
            ddst[arg[ch * n + i] as usize] += d;
        }
    }
    din
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2_forward(inp: &Tensor) -> Tensor {
    let (c, h, w) = (inp.c, inp.h, inp.w);
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = inp.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..2 * h {
            let sy = y / 2;
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Tensor) -> Tensor {
    let (c, h2, w2) = (dout.c, dout.h, dout.w);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut din = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dsrc = dout.channel(ch);
        let ddst = din.channel_mut(ch);
        for y in 0..h2 {
            let sy = y / 2;
            for x in 0..w2 {
                ddst[sy * w + x / 2] += dsrc[y * w2 + x];
            }
        }
    }
    din
}

/// Stack tensors along the channel axis.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|t| t.c).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for t in parts {
        debug_assert_eq!((t.h, t.w), (h, w));
        data.extend_from_slice(&t.data);
    }
    Tensor { c, h, w, data }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
