//! Forward and backward kernels for the handful of operations the networks use.
//!
//! Convolutions are 3x3, stride 1, "same" zero padding of `dilation` pixels, computed
//! as im2col followed by a GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Dilations the layer tables use.
pub const SUPPORTED_DILATIONS: core::ops::RangeInclusive<usize> = 1..=4;

/// `c = a * b + beta * c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid destination range along one axis for a tap displaced by `offset`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

#[inline]
fn tap_offsets(tap: usize, dilation: usize) -> (isize, isize) {
    let d = dilation as isize;
    ((tap / KERNEL_SIZE) as isize * d - d, (tap % KERNEL_SIZE) as isize * d - d)
}

/// Unfolds one image `(C, H, W)` into a `(C*9, H*W)` column matrix.
fn im2col(img: &[f64], channels: usize, h: usize, w: usize, dilation: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for tap in 0..TAPS {
            let (dy, dx) = tap_offsets(tap, dilation);
            let row = &mut cols[(c * TAPS + tap) * hw..(c * TAPS + tap + 1) * hw];
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                row.fill(0.0);
                continue;
            }
            row[..y0 * w].fill(0.0);
            row[y1 * w..].fill(0.0);
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                let dst = &mut row[y * w..(y + 1) * w];
                dst[..x0].fill(0.0);
                dst[x0..x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                dst[x1..].fill(0.0);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, dilation: usize, img: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for tap in 0..TAPS {
            let (dy, dx) = tap_offsets(tap, dilation);
            let row = &cols[(c * TAPS + tap) * hw..(c * TAPS + tap + 1) * hw];
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                    *d += s;
                }
            }
        }
    }
}

fn check_conv(input: Shape, kernel: Shape, bias: &[f64], dilation: usize) -> Result<()> {
    if kernel.height != KERNEL_SIZE || kernel.width != KERNEL_SIZE || kernel.channels != input.channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.describe(),
            right: kernel.describe(),
        });
    }
    if bias.len() != kernel.batch {
        return Err(invalid!(
            "conv2d bias has {} entries, kernel {} has {} output channels",
            bias.len(),
            kernel,
            kernel.batch
        ));
    }
    if !SUPPORTED_DILATIONS.contains(&dilation) {
        return Err(invalid!("conv2d dilation {dilation} outside 1..=4"));
    }
    Ok(())
}

/// From this many input channels a convolution runs as nine GEMMs over shifted
/// views of a zero-padded copy of the input, one per tap, instead of one GEMM
/// over an im2col matrix nine times the size of the input.
const SHIFTED_MIN_CHANNELS: usize = 16;

/// Geometry of the padded layout. Padded planes are `(H+2d) x (W+2d)`; a
/// "wide" plane keeps output pixel `(y, x)` at `y * (W+2d) + x`, so tap
/// `(ky, kx)` reads the padded input at a constant offset from it.
#[derive(Clone, Copy)]
struct Padded {
    h: usize,
    w: usize,
    d: usize,
}

impl Padded {
    fn row(&self) -> usize {
        self.w + 2 * self.d
    }

    fn plane(&self) -> usize {
        (self.h + 2 * self.d) * self.row()
    }

    fn wide_plane(&self) -> usize {
        self.h * self.row()
    }

    /// Wide positions covering every output pixel.
    fn span(&self) -> usize {
        (self.h - 1) * self.row() + self.w
    }

    fn tap_offset(&self, tap: usize) -> usize {
        (tap / KERNEL_SIZE) * self.d * self.row() + (tap % KERNEL_SIZE) * self.d
    }

    /// Copies `(C, H, W)` into the interior of a zero-bordered padded buffer.
    fn pad(&self, img: &[f64], channels: usize, out: &mut [f64]) {
        let (hw, plane, row) = (self.h * self.w, self.plane(), self.row());
        for c in 0..channels {
            for y in 0..self.h {
                let dst = c * plane + (y + self.d) * row + self.d;
                out[dst..dst + self.w].copy_from_slice(&img[c * hw + y * self.w..][..self.w]);
            }
        }
    }
}

fn use_shifted(shape: Shape) -> bool {
    shape.channels >= SHIFTED_MIN_CHANNELS && shape.plane() > 0
}

/// Dilated 3x3 convolution with same-size zero padding.
///
/// `kernel` is laid out as `(out_channels, in_channels, 3, 3)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f64], dilation: usize) -> Result<Tensor> {
    check_conv(input.shape(), kernel.shape(), bias, dilation)?;
    if use_shifted(input.shape()) {
        Ok(conv2d_shifted(input, kernel, bias, dilation))
    } else {
        Ok(conv2d_im2col(input, kernel, bias, dilation))
    }
}

fn conv2d_im2col(input: &Tensor, kernel: &Tensor, bias: &[f64], dilation: usize) -> Tensor {
    let (is, ks) = (input.shape(), kernel.shape());
    let out_shape = is.with_channels(ks.batch);
    let hw = is.plane();
    let ck = is.channels * TAPS;
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![0.0; ck * hw];
    let in_per = is.channels * hw;
    let out_per = ks.batch * hw;
    for b in 0..is.batch {
        im2col(&input.data()[b * in_per..(b + 1) * in_per], is.channels, is.height, is.width, dilation, &mut cols);
        let dst = &mut out.data_mut()[b * out_per..(b + 1) * out_per];
        for (o, &bv) in bias.iter().enumerate() {
            dst[o * hw..(o + 1) * hw].fill(bv);
        }
        // out^T (HW, O) = cols^T (HW, C*9) * K^T (C*9, O), written through transposed strides
        gemm(hw, ck, ks.batch, &cols, (1, hw), kernel.data(), (1, ck), 1.0, dst, (1, hw));
    }
    out
}

fn conv2d_shifted(input: &Tensor, kernel: &Tensor, bias: &[f64], dilation: usize) -> Tensor {
    let (is, ks) = (input.shape(), kernel.shape());
    let p = Padded {
        h: is.height,
        w: is.width,
        d: dilation,
    };
    let (hw, ck, row) = (is.plane(), is.channels * TAPS, p.row());
    let mut out = Tensor::zeros(is.with_channels(ks.batch));
    let mut padded = vec![0.0; is.channels * p.plane()];
    let mut wide = vec![0.0; ks.batch * p.wide_plane()];
    for b in 0..is.batch {
        p.pad(&input.data()[b * is.channels * hw..], is.channels, &mut padded);
        for tap in 0..TAPS {
            // wide (O, span) += K[:, :, tap] (O, C) * shifted input (C, span)
            let beta = if tap == 0 { 0.0 } else { 1.0 };
            let shifted = &padded[p.tap_offset(tap)..];
            gemm(ks.batch, is.channels, p.span(), &kernel.data()[tap..], (ck, TAPS), shifted, (p.plane(), 1), beta, &mut wide, (p.wide_plane(), 1));
        }
        let dst = &mut out.data_mut()[b * ks.batch * hw..(b + 1) * ks.batch * hw];
        for (o, &bv) in bias.iter().enumerate() {
            for y in 0..is.height {
                let src = &wide[o * p.wide_plane() + y * row..][..is.width];
                for (d, s) in dst[o * hw + y * is.width..][..is.width].iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input (when requested), kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f64>)> {
    let (is, ks) = (input.shape(), kernel.shape());
    if grad_out.shape() != is.with_channels(ks.batch) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: is.with_channels(ks.batch).describe(),
            right: grad_out.shape().describe(),
        });
    }
    if use_shifted(is) {
        Ok(conv2d_backward_shifted(input, kernel, dilation, grad_out, need_input_grad))
    } else {
        Ok(conv2d_backward_im2col(input, kernel, dilation, grad_out, need_input_grad))
    }
}

fn bias_grad(grad_out: &Tensor) -> Vec<f64> {
    let s = grad_out.shape();
    let hw = s.plane();
    let mut grad_b = vec![0.0; s.channels];
    for b in 0..s.batch {
        let g = &grad_out.data()[b * s.channels * hw..];
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    grad_b
}

fn conv2d_backward_im2col(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let (is, ks) = (input.shape(), kernel.shape());
    let hw = is.plane();
    let ck = is.channels * TAPS;
    let in_per = is.channels * hw;
    let out_per = ks.batch * hw;
    let mut grad_k = Tensor::zeros(ks);
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(is));
    let mut cols = vec![0.0; ck * hw];
    let mut dcols = if need_input_grad { vec![0.0; ck * hw] } else { Vec::new() };
    for b in 0..is.batch {
        let g = &grad_out.data()[b * out_per..(b + 1) * out_per];
        im2col(&input.data()[b * in_per..(b + 1) * in_per], is.channels, is.height, is.width, dilation, &mut cols);
        // dK += dOut (O, HW) * cols^T (HW, C*9)
        gemm(ks.batch, hw, ck, g, (hw, 1), &cols, (1, hw), 1.0, grad_k.data_mut(), (ck, 1));
        if let Some(gi) = grad_in.as_mut() {
            // dcols^T (HW, C*9) = dOut^T (HW, O) * K (O, C*9)
            gemm(hw, ks.batch, ck, g, (1, hw), kernel.data(), (ck, 1), 0.0, &mut dcols, (1, hw));
            col2im(&dcols, is.channels, is.height, is.width, dilation, &mut gi.data_mut()[b * in_per..(b + 1) * in_per]);
        }
    }
    (grad_in, grad_k, bias_grad(grad_out))
}

fn conv2d_backward_shifted(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let (is, ks) = (input.shape(), kernel.shape());
    let p = Padded {
        h: is.height,
        w: is.width,
        d: dilation,
    };
    let (hw, ck, row, w) = (is.plane(), is.channels * TAPS, p.row(), is.width);
    let in_per = is.channels * hw;
    let mut grad_k = Tensor::zeros(ks);
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(is));
    let mut padded = vec![0.0; is.channels * p.plane()];
    // the columns between rows stay zero, so they contribute nothing below
    let mut wide = vec![0.0; ks.batch * p.wide_plane()];
    let mut grad_padded = if need_input_grad { vec![0.0; is.channels * p.plane()] } else { Vec::new() };
    for b in 0..is.batch {
        p.pad(&input.data()[b * in_per..], is.channels, &mut padded);
        let g = &grad_out.data()[b * ks.batch * hw..];
        for o in 0..ks.batch {
            for y in 0..is.height {
                wide[o * p.wide_plane() + y * row..][..w].copy_from_slice(&g[o * hw + y * w..][..w]);
            }
        }
        grad_padded.fill(0.0);
        for tap in 0..TAPS {
            let off = p.tap_offset(tap);
            // dK[:, :, tap] += dOut (O, span) * shifted input^T (span, C)
            gemm(ks.batch, p.span(), is.channels, &wide, (p.wide_plane(), 1), &padded[off..], (1, p.plane()), 1.0, &mut grad_k.data_mut()[tap..], (ck, TAPS));
            if need_input_grad {
                // shifted dInput (C, span) += K[:, :, tap]^T (C, O) * dOut (O, span)
                gemm(is.channels, ks.batch, p.span(), &kernel.data()[tap..], (TAPS, ck), &wide, (p.wide_plane(), 1), 1.0, &mut grad_padded[off..], (p.plane(), 1));
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[b * in_per..(b + 1) * in_per];
            for c in 0..is.channels {
                for y in 0..is.height {
                    let src = c * p.plane() + (y + dilation) * row + dilation;
                    dst[c * hw + y * w..][..w].copy_from_slice(&grad_padded[src..src + w]);
                }
            }
        }
    }
    (grad_in, grad_k, bias_grad(grad_out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(libm::tanh)
}

pub fn tanh_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| g * (1.0 - y * y))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Applies `f` to every pixel's channel vector, reading from `x` and writing `out`.
fn per_pixel(x: &Tensor, out: &mut Tensor, mut f: impl FnMut(&[f64], &mut [f64])) {
    let s = x.shape();
    let hw = s.plane();
    let mut buf_in = vec![0.0; s.channels];
    let mut buf_out = vec![0.0; s.channels];
    for b in 0..s.batch {
        let base = b * s.channels * hw;
        for p in 0..hw {
            for (c, v) in buf_in.iter_mut().enumerate() {
                *v = x.data()[base + c * hw + p];
            }
            f(&buf_in, &mut buf_out);
            for (c, v) in buf_out.iter().enumerate() {
                out.data_mut()[base + c * hw + p] = *v;
            }
        }
    }
}

/// Softmax across the channel axis, independently at each pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    per_pixel(x, &mut out, |v, o| {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &vi) in o.iter_mut().zip(v) {
            *oi = libm::exp(vi - max);
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    });
    out
}

/// Log-softmax across the channel axis.
pub fn log_softmax_channels(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    per_pixel(x, &mut out, |v, o| {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(v.iter().map(|&vi| libm::exp(vi - max)).sum::<f64>());
        for (oi, &vi) in o.iter_mut().zip(v) {
            *oi = vi - lse;
        }
    });
    out
}

/// Given softmax output `y`, maps `dy` to `y * (dy - sum_c y dy)`.
pub fn softmax_channels_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let s = y.shape();
    let mut out = Tensor::zeros(s);
    let hw = s.plane();
    for b in 0..s.batch {
        let base = b * s.channels * hw;
        for p in 0..hw {
            let dot: f64 = (0..s.channels)
                .map(|c| y.data()[base + c * hw + p] * grad.data()[base + c * hw + p])
                .sum();
            for c in 0..s.channels {
                let i = base + c * hw + p;
                out.data_mut()[i] = y.data()[i] * (grad.data()[i] - dot);
            }
        }
    }
    out
}

/// Given log-softmax output `y`, maps `dy` to `dy - softmax * sum_c dy`.
pub fn log_softmax_channels_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let s = y.shape();
    let hw = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        let base = b * s.channels * hw;
        for p in 0..hw {
            let total: f64 = (0..s.channels).map(|c| grad.data()[base + c * hw + p]).sum();
            for c in 0..s.channels {
                let i = base + c * hw + p;
                out.data_mut()[i] = grad.data()[i] - libm::exp(y.data()[i]) * total;
            }
        }
    }
    out
}

/// Picks channel `index[b, y, x]` at every pixel; output has one channel.
pub fn gather_channels(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    let hw = s.plane();
    if index.len() != s.batch * hw {
        return Err(invalid!(
            "gather_channels: {} indices for tensor {}",
            index.len(),
            s
        ));
    }
    let mut out = Tensor::zeros(s.with_channels(1));
    for b in 0..s.batch {
        for p in 0..hw {
            let c = index[b * hw + p];
            if c >= s.channels {
                return Err(invalid!("gather_channels: channel {c} out of range for {s}"));
            }
            out.data_mut()[b * hw + p] = x.data()[(b * s.channels + c) * hw + p];
        }
    }
    Ok(out)
}

pub fn gather_channels_backward(shape: Shape, index: &[usize], grad: &Tensor) -> Tensor {
    let hw = shape.plane();
    let mut out = Tensor::zeros(shape);
    for b in 0..shape.batch {
        for p in 0..hw {
            let c = index[b * hw + p];
            out.data_mut()[(b * shape.channels + c) * hw + p] += grad.data()[b * hw + p];
        }
    }
    out
}

/// Sums over the channel axis, keeping a single channel.
pub fn sum_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.plane();
    let mut out = Tensor::zeros(s.with_channels(1));
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = &x.data()[(b * s.channels + c) * hw..(b * s.channels + c + 1) * hw];
            for (o, v) in out.data_mut()[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out
}

/// Broadcasts a single-channel gradient back over `shape.channels`.
pub fn sum_channels_backward(shape: Shape, grad: &Tensor) -> Tensor {
    let hw = shape.plane();
    Tensor::from_fn(shape, |b, _, y, x| grad.data()[b * hw + y * shape.width + x])
}
