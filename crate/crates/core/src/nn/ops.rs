//! Differentiable layer primitives on single `[C, H, W]` feature maps.
//!
//! Convolutions lower to one matrix product over an im2col buffer. Kernels
//! are stored `[out, in, k, k]` for convolutions and `[in, out, k, k]` for
//! transposed convolutions, so a transposed convolution with kernel `K` is
//! exactly the adjoint of the strided convolution with the same `K`.

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

use super::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` on row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
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

/// Geometry of one strided, zero-padded window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sweep {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Sweep {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unrolls every window into a column: `rows() × cols()`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let (h, w, ow) = (self.height as isize, self.width as isize, self.out_w);
        let ncols = self.cols();
        let mut cols = vec![0.0; self.rows() * ncols];
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters columns back, summing overlaps.
    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let (h, w, ow) = (self.height as isize, self.width as isize, self.out_w);
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match weight.shape()[..] {
        [a, b, k, k2] if k == k2 && k > 0 => Ok((a, b, k)),
        _ => Err(Error::ShapeMismatch(format!(
            "expected a square 4-d kernel, got {:?}",
            weight.shape()
        ))),
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::ShapeMismatch(format!(
            "bias has {} entries for {channels} channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias(y: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in y.chunks_exact_mut(plane).zip(b.values()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(dy: &[f64], plane: usize) -> Vec<f64> {
    dy.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

fn conv_sweep(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(Sweep, usize)> {
    let (c, h, w) = x.chw()?;
    let (out_c, in_c, k) = square_kernel(weight)?;
    if in_c != c {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {in_c} input channels, input has {c}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::ShapeMismatch(format!(
            "{h}×{w} input is smaller than the {k}×{k} kernel"
        )));
    }
    let sweep = Sweep {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
        out_h: (h + 2 * pad - k) / stride + 1,
        out_w: (w + 2 * pad - k) / stride + 1,
    };
    Ok((sweep, out_c))
}

/// Cross-correlation with explicit zero padding.
pub fn conv2d_padded(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (sweep, out_c) = conv_sweep(x, weight, stride, pad)?;
    check_bias(bias, out_c)?;
    let cols = sweep.im2col(x.values());
    let mut y = vec![0.0; out_c * sweep.cols()];
    gemm(out_c, sweep.rows(), sweep.cols(), weight.values(), false, &cols, false, 0.0, &mut y);
    add_bias(&mut y, bias, sweep.cols());
    Tensor::from_vec(&[out_c, sweep.out_h, sweep.out_w], y)
}

/// "Same" convolution: odd kernel, padding `(k - 1) / 2`, output side `ceil(in / stride)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (_, _, k) = square_kernel(weight)?;
    if k % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "same padding needs an odd kernel, got {k}"
        )));
    }
    conv2d_padded(x, weight, bias, stride, (k - 1) / 2)
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward_padded(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<LayerGrads> {
    let (sweep, out_c) = conv_sweep(x, weight, stride, pad)?;
    if dy.shape() != [out_c, sweep.out_h, sweep.out_w] {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} does not match conv output [{out_c}, {}, {}]",
            dy.shape(),
            sweep.out_h,
            sweep.out_w
        )));
    }
    let (rows, ncols) = (sweep.rows(), sweep.cols());
    let cols = sweep.im2col(x.values());

    let mut dw = vec![0.0; out_c * rows];
    gemm(out_c, ncols, rows, dy.values(), false, &cols, true, 0.0, &mut dw);

    let mut dcols = vec![0.0; rows * ncols];
    gemm(rows, out_c, ncols, weight.values(), true, dy.values(), false, 0.0, &mut dcols);
    let mut dx = vec![0.0; x.len()];
    sweep.col2im(&dcols, &mut dx);

    Ok(LayerGrads {
        input: Tensor::from_vec(x.shape(), dx)?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(&[out_c], channel_sums(dy.values(), ncols))?,
    })
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, stride: usize, dy: &Tensor) -> Result<LayerGrads> {
    let (_, _, k) = square_kernel(weight)?;
    conv2d_backward_padded(x, weight, stride, (k - 1) / 2, dy)
}

/// Output sweep of a transposed convolution viewed as the convolution it is
/// the adjoint of.
fn deconv_sweep(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(Sweep, usize)> {
    let (c, h, w) = x.chw()?;
    let (in_c, out_c, k) = square_kernel(weight)?;
    if in_c != c {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {in_c} input channels, input has {c}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    let span = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    let (Some(out_h), Some(out_w)) = (span(h), span(w)) else {
        return Err(Error::ShapeMismatch(format!(
            "padding {pad} crops away the whole {k}×{k} transposed output"
        )));
    };
    let sweep = Sweep {
        channels: out_c,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        pad,
        out_h: h,
        out_w: w,
    };
    Ok((sweep, out_c))
}

/// Transposed convolution: output side `(in - 1)·stride + k - 2·pad`.
pub fn deconv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (sweep, out_c) = deconv_sweep(x, weight, stride, pad)?;
    check_bias(bias, out_c)?;
    let (in_c, _, _) = x.chw()?;
    let (rows, ncols) = (sweep.rows(), sweep.cols());
    let mut cols = vec![0.0; rows * ncols];
    gemm(rows, in_c, ncols, weight.values(), true, x.values(), false, 0.0, &mut cols);
    let mut y = vec![0.0; out_c * sweep.height * sweep.width];
    sweep.col2im(&cols, &mut y);
    add_bias(&mut y, bias, sweep.height * sweep.width);
    Tensor::from_vec(&[out_c, sweep.height, sweep.width], y)
}

pub fn deconv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<LayerGrads> {
    let (sweep, out_c) = deconv_sweep(x, weight, stride, pad)?;
    if dy.shape() != [out_c, sweep.height, sweep.width] {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} does not match transposed output [{out_c}, {}, {}]",
            dy.shape(),
            sweep.height,
            sweep.width
        )));
    }
    let (in_c, _, _) = x.chw()?;
    let (rows, ncols) = (sweep.rows(), sweep.cols());
    let dcols = sweep.im2col(dy.values());

    let mut dx = vec![0.0; in_c * ncols];
    gemm(in_c, rows, ncols, weight.values(), false, &dcols, false, 0.0, &mut dx);

    let mut dw = vec![0.0; in_c * rows];
    gemm(in_c, ncols, rows, x.values(), false, &dcols, true, 0.0, &mut dw);

    Ok(LayerGrads {
        input: Tensor::from_vec(x.shape(), dx)?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(&[out_c], channel_sums(dy.values(), sweep.height * sweep.width))?,
    })
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub output: Tensor,
    /// Flat input index of the maximum that produced each output element.
    pub argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Ties go to the first maximum in row-major
/// window order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<PoolOutput> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs even spatial dims, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = x.values();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::from_vec(&[c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if dy.len() != argmax.len() {
        return Err(Error::ShapeMismatch(
            "pooling gradient does not match recorded argmax".into(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dxv = dx.values_mut();
    for (&i, &g) in argmax.iter().zip(dy.values()) {
        dxv[i] += g;
    }
    Ok(dx)
}

pub fn relu_inplace(x: &mut Tensor) {
    x.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &v) in dy.values_mut().iter_mut().zip(y.values()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {ha}×{wa} with {hb}×{wb} feature maps"
        )));
    }
    let mut values = Vec::with_capacity(a.len() + b.len());
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    Tensor::from_vec(&[ca + cb, ha, wa], values)
}

/// Splits a concatenated gradient back into its first `channels` and the rest.
pub fn split_channels(g: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = g.chw()?;
    if channels > c {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {channels} channels off a {c}-channel map"
        )));
    }
    let cut = channels * h * w;
    Ok((
        Tensor::from_vec(&[channels, h, w], g.values()[..cut].to_vec())?,
        Tensor::from_vec(&[c - channels, h, w], g.values()[cut..].to_vec())?,
    ))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.chw()?;
    let plane = h * w;
    let lv = logits.values();
    let mut probs = vec![0.0; lv.len()];
    for i in 0..plane {
        let max = (0..c).map(|k| lv[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (lv[k * plane + i] - max).exp();
            probs[k * plane + i] = e;
            sum += e;
        }
        for k in 0..c {
            probs[k * plane + i] /= sum;
        }
    }
    Tensor::from_vec(logits.shape(), probs)
}

/// Class index of an object pixel; background is class 1.
pub const OBJECT_CLASS: usize = 0;
pub const BACKGROUND_CLASS: usize = 1;

#[derive(Debug, Clone)]
pub struct XentOutput {
    pub loss: f64,
    pub probs: Tensor,
    pub grad: Tensor,
}

/// Mean per-pixel cross-entropy of a two-class softmax against a mask.
///
/// Object pixels are scaled by `object_weight` (1.0 leaves the loss
/// unweighted); the mean is always over the pixel count.
pub fn softmax_xent(logits: &Tensor, target: &BinaryMask, object_weight: f64) -> Result<XentOutput> {
    let (c, h, w) = logits.chw()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "two-class loss needs 2 logit channels, got {c}"
        )));
    }
    if (target.width(), target.height()) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} target for {w}×{h} logits",
            target.width(),
            target.height()
        )));
    }
    let probs = softmax_channels(logits)?;
    let plane = h * w;
    let n = plane as f64;
    let pv = probs.values();
    let mut grad = pv.to_vec();
    let mut loss = 0.0;
    for (i, &is_object) in target.bits().iter().enumerate() {
        let (class, weight) = if is_object {
            (OBJECT_CLASS, object_weight)
        } else {
            (BACKGROUND_CLASS, 1.0)
        };
        let p = pv[class * plane + i];
        loss -= weight * p.max(f64::MIN_POSITIVE).ln();
        grad[class * plane + i] -= 1.0;
        for k in 0..2 {
            grad[k * plane + i] *= weight / n;
        }
    }
    Ok(XentOutput {
        loss: loss / n,
        grad: Tensor::from_vec(logits.shape(), grad)?,
        probs,
    })
}
