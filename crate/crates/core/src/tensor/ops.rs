//! Layer kernels: forward functions plus the matching backward passes.
//!
//! Convolutions lower to im2col + GEMM (32-bit accumulation inside the GEMM
//! micro-kernel). Dense layers, pooling means, softmax and losses
//! accumulate in 64-bit.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{Rng, Tensor};
use crate::{Error, Result};

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`, zero padding split evenly (extra on the far side).
    Same,
    /// No padding; output size `(in - k) / stride + 1`.
    Valid,
}

/// Output size and leading pad for one spatial axis.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("kernel {k} / stride {stride} must be positive")));
    }
    match padding {
        Padding::Valid => {
            if size < k {
                return Err(Error::InvalidArgument(format!("kernel {k} larger than input {size} with valid padding")));
            }
            Ok(((size - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
    /// Padded plane extent actually read by the kernel.
    hp: usize,
    wp: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (oh, pad_h) = conv_out_dim(h, k, stride, padding)?;
        let (ow, pad_w) = conv_out_dim(w, k, stride, padding)?;
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            oh,
            ow,
            pad_h,
            pad_w,
            hp: (oh - 1) * stride + k,
            wp: (ow - 1) * stride + k,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn padded_len(&self) -> usize {
        self.hp * self.wp
    }

    /// Copy one `h×w` plane into a zeroed `hp×wp` buffer at the padding offset.
    fn pad_plane(&self, plane: &[f32], buf: &mut [f32]) {
        buf.fill(0.0);
        for iy in 0..self.h {
            let py = iy + self.pad_h;
            if py >= self.hp {
                break;
            }
            let n = self.w.min(self.wp - self.pad_w);
            let dst = py * self.wp + self.pad_w;
            buf[dst..dst + n].copy_from_slice(&plane[iy * self.w..iy * self.w + n]);
        }
    }

    /// Add the interior of a padded buffer back into an `h×w` plane.
    fn unpad_add(&self, buf: &[f32], plane: &mut [f32]) {
        for iy in 0..self.h {
            let py = iy + self.pad_h;
            if py >= self.hp {
                break;
            }
            let n = self.w.min(self.wp - self.pad_w);
            let src = py * self.wp + self.pad_w;
            for (d, s) in plane[iy * self.w..iy * self.w + n].iter_mut().zip(&buf[src..src + n]) {
                *d += s;
            }
        }
    }

    /// Padded-buffer offset read by output row `oy`, tap `(ky, kx)`.
    #[inline]
    fn tap_row(&self, oy: usize, ky: usize, kx: usize) -> usize {
        (oy * self.stride + ky) * self.wp + kx
    }
}

/// Unfold a whole batch: `cols` is `patch × (n · positions)`, sample-major
/// within each row.
fn im2col(x: &[f32], n: usize, g: &Geom, cols: &mut [f32]) {
    let (p, hw, np) = (g.positions(), g.h * g.w, n * g.positions());
    let mut pad = vec![0.0; g.padded_len()];
    for s in 0..n {
        for ci in 0..g.c {
            let plane = &x[(s * g.c + ci) * hw..(s * g.c + ci + 1) * hw];
            g.pad_plane(plane, &mut pad);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * np + s * p..row * np + (s + 1) * p];
                    for oy in 0..g.oh {
                        let src = g.tap_row(oy, ky, kx);
                        let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            out.copy_from_slice(&pad[src..src + g.ow]);
                        } else {
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = pad[src + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold column gradients back onto the (unpadded) input batch.
fn col2im(cols: &[f32], n: usize, g: &Geom, dx: &mut [f32]) {
    let (p, hw, np) = (g.positions(), g.h * g.w, n * g.positions());
    let mut pad = vec![0.0; g.padded_len()];
    for s in 0..n {
        for ci in 0..g.c {
            pad.fill(0.0);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let src = &cols[row * np + s * p..row * np + (s + 1) * p];
                    for oy in 0..g.oh {
                        let base = g.tap_row(oy, ky, kx);
                        let sr = &src[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            for (d, v) in pad[base..base + g.ow].iter_mut().zip(sr) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in sr.iter().enumerate() {
                                pad[base + ox * g.stride] += v;
                            }
                        }
                    }
                }
            }
            g.unpad_add(&pad, &mut dx[(s * g.c + ci) * hw..(s * g.c + ci + 1) * hw]);
        }
    }
}

fn conv_geom(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: Padding) -> Result<(usize, usize, Geom)> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let (o, wc, kh, kw) = weight.dims4("conv2d")?;
    if wc != c || kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((n, o, Geom::new(c, h, w, kh, stride, padding)?))
}

/// Standard 2-D convolution. `weight` is `O×I×K×K`, `bias` is `O`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (n, o, g) = conv_geom(input, weight, bias, stride, padding)?;
    let (pk, p) = (g.patch(), g.positions());
    let np = n * p;
    let mut cols = vec![0.0; pk * np];
    im2col(input.data(), n, &g, &mut cols);
    let mut tmp = vec![0.0; o * np];
    gemm(o, pk, np, weight.data(), false, &cols, false, 0.0, &mut tmp);
    let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
    let y = out.data_mut();
    for oc in 0..o {
        let b = bias.data()[oc];
        for s in 0..n {
            let dst = &mut y[(s * o + oc) * p..(s * o + oc + 1) * p];
            for (d, v) in dst.iter_mut().zip(&tmp[oc * np + s * p..oc * np + (s + 1) * p]) {
                *d = v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Accumulates into `grad_w` / `grad_b`; returns
/// the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_input: bool,
) -> Result<Option<Tensor>> {
    let bias_shape = Tensor::zeros(&[weight.shape()[0]]);
    let (n, o, g) = conv_geom(input, weight, &bias_shape, stride, padding)?;
    let (pk, p) = (g.patch(), g.positions());
    let np = n * p;
    // output gradient regrouped channel-major: o × (n · p)
    let mut dy = vec![0.0; o * np];
    for s in 0..n {
        for oc in 0..o {
            dy[oc * np + s * p..oc * np + (s + 1) * p].copy_from_slice(&grad_out.data()[(s * o + oc) * p..(s * o + oc + 1) * p]);
        }
    }
    for (oc, row) in dy.chunks_exact(np).enumerate() {
        grad_b.data_mut()[oc] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
    let mut cols = vec![0.0; pk * np];
    im2col(input.data(), n, &g, &mut cols);
    gemm(o, np, pk, &dy, false, &cols, true, 1.0, grad_w.data_mut());
    if !want_input {
        return Ok(None);
    }
    gemm(pk, o, np, weight.data(), true, &dy, false, 0.0, &mut cols);
    let mut grad_in = Tensor::zeros(input.shape());
    col2im(&cols, n, &g, grad_in.data_mut());
    Ok(Some(grad_in))
}

fn depthwise_geom(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: Padding) -> Result<(usize, Geom)> {
    let (n, c, h, w) = input.dims4("depthwise_conv2d")?;
    let (wc, one, kh, kw) = weight.dims4("depthwise_conv2d")?;
    if wc != c || one != 1 || kh != kw || bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    Ok((n, Geom::new(c, h, w, kh, stride, padding)?))
}

/// One `K×K` filter per channel. `weight` is `C×1×K×K`, `bias` is `C`.
pub fn depthwise_conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (n, g) = depthwise_geom(input, weight, bias, stride, padding)?;
    let (hw, p, kk) = (g.h * g.w, g.positions(), g.k * g.k);
    let mut out = Tensor::zeros(&[n, g.c, g.oh, g.ow]);
    let x = input.data();
    let y = out.data_mut();
    let mut pad = vec![0.0; g.padded_len()];
    for s in 0..n {
        for ch in 0..g.c {
            let plane = &x[(s * g.c + ch) * hw..(s * g.c + ch + 1) * hw];
            g.pad_plane(plane, &mut pad);
            let ker = &weight.data()[ch * kk..(ch + 1) * kk];
            let dst = &mut y[(s * g.c + ch) * p..(s * g.c + ch + 1) * p];
            dst.fill(bias.data()[ch]);
            for oy in 0..g.oh {
                let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let kv = ker[ky * g.k + kx];
                        let src = g.tap_row(oy, ky, kx);
                        if g.stride == 1 {
                            for (d, &v) in row.iter_mut().zip(&pad[src..src + g.ow]) {
                                *d += kv * v;
                            }
                        } else {
                            for (ox, d) in row.iter_mut().enumerate() {
                                *d += kv * pad[src + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`].
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_input: bool,
) -> Result<Option<Tensor>> {
    let bias_shape = Tensor::zeros(&[weight.shape()[0]]);
    let (n, g) = depthwise_geom(input, weight, &bias_shape, stride, padding)?;
    let (hw, p, kk) = (g.h * g.w, g.positions(), g.k * g.k);
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    let x = input.data();
    let dy_all = grad_out.data();
    let mut pad = vec![0.0; g.padded_len()];
    let mut dpad = vec![0.0; g.padded_len()];
    let mut dw = vec![0.0f64; g.c * kk];
    let mut db = vec![0.0f64; g.c];
    for s in 0..n {
        for ch in 0..g.c {
            let base = (s * g.c + ch) * hw;
            g.pad_plane(&x[base..base + hw], &mut pad);
            let ker = &weight.data()[ch * kk..(ch + 1) * kk];
            let dy = &dy_all[(s * g.c + ch) * p..(s * g.c + ch + 1) * p];
            db[ch] += dy.iter().map(|&v| v as f64).sum::<f64>();
            dpad.fill(0.0);
            for oy in 0..g.oh {
                let drow = &dy[oy * g.ow..(oy + 1) * g.ow];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let t = ky * g.k + kx;
                        let src = g.tap_row(oy, ky, kx);
                        let mut acc = 0.0f32;
                        if g.stride == 1 {
                            for (&d, &v) in drow.iter().zip(&pad[src..src + g.ow]) {
                                acc += d * v;
                            }
                            if want_input {
                                let kv = ker[t];
                                for (o, &d) in dpad[src..src + g.ow].iter_mut().zip(drow) {
                                    *o += kv * d;
                                }
                            }
                        } else {
                            for (ox, &d) in drow.iter().enumerate() {
                                acc += d * pad[src + ox * g.stride];
                                if want_input {
                                    dpad[src + ox * g.stride] += ker[t] * d;
                                }
                            }
                        }
                        dw[ch * kk + t] += acc as f64;
                    }
                }
            }
            if let Some(gi) = grad_in.as_mut() {
                g.unpad_add(&dpad, &mut gi.data_mut()[base..base + hw]);
            }
        }
    }
    for (gv, v) in grad_w.data_mut().iter_mut().zip(&dw) {
        *gv += *v as f32;
    }
    for (gv, v) in grad_b.data_mut().iter_mut().zip(&db) {
        *gv += *v as f32;
    }
    Ok(grad_in)
}

fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let n = input.batch();
    let f = input.row_len();
    match weight.shape() {
        &[wf, l] if wf == f && bias.shape() == [l] => Ok((n, f, l)),
        _ => Err(Error::ShapeMismatch {
            op: "dense",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        }),
    }
}

/// `out = input · weight + bias`; `input` is flattened to `N×F`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, _, l) = dense_dims(input, weight, bias)?;
    let w = weight.data();
    let mut out = Vec::with_capacity(n * l);
    let mut acc = vec![0.0f64; l];
    for s in 0..n {
        acc.iter_mut().zip(bias.data()).for_each(|(a, &b)| *a = b as f64);
        for (fi, &xv) in input.row(s).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            for (a, &wv) in acc.iter_mut().zip(&w[fi * l..(fi + 1) * l]) {
                *a += xv * wv as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Tensor::new(vec![n, l], out)
}

/// Gradients of [`dense`]; the input gradient keeps the input's shape.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_input: bool,
) -> Result<Option<Tensor>> {
    let bias_shape = Tensor::zeros(&[weight.shape()[1]]);
    let (n, f, l) = dense_dims(input, weight, &bias_shape)?;
    let w = weight.data();
    let mut dw = vec![0.0f64; f * l];
    let mut db = vec![0.0f64; l];
    for s in 0..n {
        let dy = grad_out.row(s);
        for (b, &d) in db.iter_mut().zip(dy) {
            *b += d as f64;
        }
        for (fi, &xv) in input.row(s).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            for (a, &d) in dw[fi * l..(fi + 1) * l].iter_mut().zip(dy) {
                *a += xv * d as f64;
            }
        }
    }
    for (g, v) in grad_w.data_mut().iter_mut().zip(&dw) {
        *g += *v as f32;
    }
    for (g, v) in grad_b.data_mut().iter_mut().zip(&db) {
        *g += *v as f32;
    }
    if !want_input {
        return Ok(None);
    }
    let mut dx = Vec::with_capacity(n * f);
    for s in 0..n {
        let dy = grad_out.row(s);
        for fi in 0..f {
            let row = &w[fi * l..(fi + 1) * l];
            let v: f64 = row.iter().zip(dy).map(|(&a, &b)| a as f64 * b as f64).sum();
            dx.push(v as f32);
        }
    }
    Tensor::new(input.shape().to_vec(), dx).map(Some)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    g
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
/// Returns the output and, per output element, the flat input index of the max.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4("max_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!("max_pool2 on {h}x{w} input")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &d) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i as usize] += d;
    }
    g
}

/// Mean over the spatial dimensions: `N×C×H×W → N×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let data = input
        .data()
        .chunks_exact(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let hw: usize = input_shape[2..].iter().product();
    let inv = 1.0 / hw as f32;
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &d in grad_out.data() {
        data.extend(std::iter::repeat_n(d * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), data).expect("shape derived from input")
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f32, rng: &mut Rng) -> Vec<f32> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len).map(|_| if rng.next_f32() < keep { scale } else { 0.0 }).collect()
}

pub fn apply_mask(input: &Tensor, mask: &[f32]) -> Tensor {
    let mut out = input.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}

/// Row-wise softmax of an `N×L` tensor with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let l = logits.row_len();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(l.max(1)) {
        out.extend(softmax_row(row).into_iter().map(|v| v as f32));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// 64-bit softmax of one row.
pub fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-ln p[n][label_n]` over the batch.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let l = probs.row_len();
    if probs.batch() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        if y >= l {
            return Err(Error::LabelOutOfRange { label: y, classes: l });
        }
        total -= (probs.row(n)[y] as f64).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Softmax cross-entropy on logits. Returns the mean loss and
/// `weight · d(loss)/d(logits)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], weight: f32) -> Result<(f64, Tensor)> {
    let (n, l) = (logits.batch(), logits.row_len());
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * l);
    let scale = weight as f64 / n.max(1) as f64;
    for (s, &y) in labels.iter().enumerate() {
        if y >= l {
            return Err(Error::LabelOutOfRange { label: y, classes: l });
        }
        let p = softmax_row(logits.row(s));
        loss -= p[y].max(PROB_FLOOR).ln();
        grad.extend(p.iter().enumerate().map(|(j, &pj)| {
            let t = if j == y { 1.0 } else { 0.0 };
            ((pj - t) * scale) as f32
        }));
    }
    Ok((loss / n.max(1) as f64, Tensor::new(vec![n, l], grad)?))
}
