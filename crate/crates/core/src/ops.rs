//! Forward kernels and their hand-written adjoints.
//!
//! Every backward function takes the forward inputs plus the upstream
//! gradient and returns gradients for the inputs. They are composed by the
//! linear tape in [`crate::autodiff`].

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvKernel, FeatureMap, Real};

const NORM_EPS: f64 = 1e-5;

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(shape_err!(
            "padded input size {padded} is smaller than kernel size {k}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn transpose_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let full = (size - 1) * stride + k;
    if full <= 2 * pad {
        return Err(shape_err!(
            "transposed convolution output would be empty (input {size}, kernel {k}, padding {pad})"
        ));
    }
    Ok(full - 2 * pad)
}

fn check_in_channels<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<T>) -> Result<()> {
    if input.channels() != kernel.in_channels() {
        return Err(shape_err!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels()
        ));
    }
    Ok(())
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (y, &xv) in acc.iter_mut().zip(x) {
        *y += a * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Source index for tap `k` of output `o`, or `None` inside the zero padding.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let idx = (o * stride + k).checked_sub(pad)?;
    (idx < size).then_some(idx)
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap<T>> {
    check_in_channels(input, kernel)?;
    let (h, w, ci) = input.shape();
    let (kh, kw, co) = (
        kernel.kernel_height(),
        kernel.kernel_width(),
        kernel.out_channels(),
    );
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let packed = kernel.packed_hwio();
    let mut out = FeatureMap::zeros(oh, ow, co);
    let src = input.data();
    let dst = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut dst[(oy * ow + ox) * co..][..co];
            acc.copy_from_slice(kernel.bias());
            for ky in 0..kh {
                let Some(iy) = tap(oy, ky, stride, padding, h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = tap(ox, kx, stride, padding, w) else {
                        continue;
                    };
                    let px = &src[(iy * w + ix) * ci..][..ci];
                    let wk = &packed[(ky * kw + kx) * ci * co..][..ci * co];
                    for (i, &v) in px.iter().enumerate() {
                        axpy(acc, v, &wk[i * co..(i + 1) * co]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d input, d kernel)`. The input gradient is
/// skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: usize,
    grad_out: &FeatureMap<T>,
    need_input: bool,
) -> (Option<FeatureMap<T>>, ConvKernel<T>) {
    let (h, w, ci) = input.shape();
    let (kh, kw, co) = (
        kernel.kernel_height(),
        kernel.kernel_width(),
        kernel.out_channels(),
    );
    let (oh, ow, _) = grad_out.shape();
    let packed = kernel.packed_hwio();
    let mut grad_packed = vec![T::zero(); packed.len()];
    let mut grad_bias = vec![T::zero(); co];
    let mut grad_in = need_input.then(|| FeatureMap::zeros(h, w, ci));
    let src = input.data();
    let g = grad_out.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * co..][..co];
            for (b, &gv) in grad_bias.iter_mut().zip(go) {
                *b += gv;
            }
            for ky in 0..kh {
                let Some(iy) = tap(oy, ky, stride, padding, h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = tap(ox, kx, stride, padding, w) else {
                        continue;
                    };
                    let base = (ky * kw + kx) * ci * co;
                    let px = &src[(iy * w + ix) * ci..][..ci];
                    for (i, &v) in px.iter().enumerate() {
                        axpy(&mut grad_packed[base + i * co..base + (i + 1) * co], v, go);
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let gpx = gi.pixel_mut(iy, ix);
                        for (i, gp) in gpx.iter_mut().enumerate() {
                            *gp += dot(&packed[base + i * co..base + (i + 1) * co], go);
                        }
                    }
                }
            }
        }
    }
    (grad_in, kernel.from_packed_hwio(&grad_packed, grad_bias))
}

/// Transposed convolution (the adjoint of [`conv2d`] plus bias).
///
/// Output size is `(in − 1)·stride + k − 2·padding`; kernel 4, stride 2,
/// padding 1 gives exactly twice the input size.
pub fn conv_transpose2d<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap<T>> {
    check_in_channels(input, kernel)?;
    let (h, w, ci) = input.shape();
    let (kh, kw, co) = (
        kernel.kernel_height(),
        kernel.kernel_width(),
        kernel.out_channels(),
    );
    let oh = transpose_out_dim(h, kh, stride, padding)?;
    let ow = transpose_out_dim(w, kw, stride, padding)?;
    let packed = kernel.packed_hwio();
    let mut out = FeatureMap::zeros(oh, ow, co);
    let dst = out.data_mut();
    for px in dst.chunks_exact_mut(co) {
        px.copy_from_slice(kernel.bias());
    }
    for iy in 0..h {
        for ky in 0..kh {
            let Some(oy) = tap(iy, ky, stride, padding, oh) else {
                continue;
            };
            for ix in 0..w {
                let px = input.pixel(iy, ix);
                for kx in 0..kw {
                    let Some(ox) = tap(ix, kx, stride, padding, ow) else {
                        continue;
                    };
                    let acc = &mut dst[(oy * ow + ox) * co..][..co];
                    let wk = &packed[(ky * kw + kx) * ci * co..][..ci * co];
                    for (i, &v) in px.iter().enumerate() {
                        axpy(acc, v, &wk[i * co..(i + 1) * co]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: usize,
    grad_out: &FeatureMap<T>,
    need_input: bool,
) -> (Option<FeatureMap<T>>, ConvKernel<T>) {
    let (h, w, ci) = input.shape();
    let (kh, kw, co) = (
        kernel.kernel_height(),
        kernel.kernel_width(),
        kernel.out_channels(),
    );
    let (oh, ow, _) = grad_out.shape();
    let packed = kernel.packed_hwio();
    let mut grad_packed = vec![T::zero(); packed.len()];
    let mut grad_bias = vec![T::zero(); co];
    for go in grad_out.data().chunks_exact(co) {
        for (b, &gv) in grad_bias.iter_mut().zip(go) {
            *b += gv;
        }
    }
    let mut grad_in = need_input.then(|| FeatureMap::zeros(h, w, ci));
    let g = grad_out.data();
    for iy in 0..h {
        for ky in 0..kh {
            let Some(oy) = tap(iy, ky, stride, padding, oh) else {
                continue;
            };
            for ix in 0..w {
                for kx in 0..kw {
                    let Some(ox) = tap(ix, kx, stride, padding, ow) else {
                        continue;
                    };
                    let go = &g[(oy * ow + ox) * co..][..co];
                    let base = (ky * kw + kx) * ci * co;
                    let px = input.pixel(iy, ix);
                    for (i, &v) in px.iter().enumerate() {
                        axpy(&mut grad_packed[base + i * co..base + (i + 1) * co], v, go);
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let gpx = gi.pixel_mut(iy, ix);
                        for (i, gp) in gpx.iter_mut().enumerate() {
                            *gp += dot(&packed[base + i * co..base + (i + 1) * co], go);
                        }
                    }
                }
            }
        }
    }
    (grad_in, kernel.from_packed_hwio(&grad_packed, grad_bias))
}

fn check_pointwise<T: Real>(kernel: &ConvKernel<T>) -> Result<()> {
    if kernel.kernel_height() != 1 || kernel.kernel_width() != 1 {
        return Err(shape_err!(
            "1x1 convolution needs a 1x1 kernel, got {}x{}",
            kernel.kernel_height(),
            kernel.kernel_width()
        ));
    }
    Ok(())
}

/// Per-position linear map `in_channels → out_channels`.
pub fn conv1x1<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<T>) -> Result<FeatureMap<T>> {
    check_pointwise(kernel)?;
    conv2d(input, kernel, 1, 0)
}

pub fn conv1x1_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    grad_out: &FeatureMap<T>,
    need_input: bool,
) -> (Option<FeatureMap<T>>, ConvKernel<T>) {
    conv2d_backward(input, kernel, 1, 0, grad_out, need_input)
}

/// Numerically stable softmax over the channel axis at every position.
pub fn softmax_lastdim<T: Real>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = input.clone();
    let c = out.channels();
    for px in out.data_mut().chunks_exact_mut(c) {
        let m = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in px.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Gradient of softmax given its output `y`.
pub fn softmax_backward<T: Real>(output: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
    let c = output.channels();
    let mut grad = grad_out.clone();
    for (g, y) in grad.data_mut().chunks_exact_mut(c).zip(output.data().chunks_exact(c)) {
        let inner = dot(g, y);
        for (gv, &yv) in g.iter_mut().zip(y) {
            *gv = yv * (*gv - inner);
        }
    }
    grad
}

fn nearest_index(dst: usize, in_size: usize, out_size: usize) -> usize {
    dst * in_size / out_size
}

/// Nearest-neighbour resampling with `src = floor(dst · in / out)`.
pub fn nearest_resize<T: Real>(input: &FeatureMap<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let (h, w, c) = input.shape();
    let mut out = FeatureMap::zeros(out_h, out_w, c);
    for i in 0..out_h {
        let si = nearest_index(i, h, out_h);
        for j in 0..out_w {
            let sj = nearest_index(j, w, out_w);
            out.pixel_mut(i, j).copy_from_slice(input.pixel(si, sj));
        }
    }
    out
}

pub fn nearest_resize_backward<T: Real>(
    in_shape: (usize, usize, usize),
    grad_out: &FeatureMap<T>,
) -> FeatureMap<T> {
    let (h, w, c) = in_shape;
    let (out_h, out_w, _) = grad_out.shape();
    let mut grad = FeatureMap::zeros(h, w, c);
    for i in 0..out_h {
        let si = nearest_index(i, h, out_h);
        for j in 0..out_w {
            let sj = nearest_index(j, w, out_w);
            for (g, &gv) in grad.pixel_mut(si, sj).iter_mut().zip(grad_out.pixel(i, j)) {
                *g += gv;
            }
        }
    }
    grad
}

/// Two-tap linear interpolation table for one axis, half-pixel centres.
fn linear_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling, align-corners-false convention.
pub fn bilinear_resize<T: Real>(input: &FeatureMap<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let (h, w, c) = input.shape();
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut out = FeatureMap::zeros(out_h, out_w, c);
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        let (wr0, wr1) = (T::lit(1.0 - fr), T::lit(fr));
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let (wc0, wc1) = (T::lit(1.0 - fc), T::lit(fc));
            let taps = [
                (input.pixel(r0, c0), wr0 * wc0),
                (input.pixel(r0, c1), wr0 * wc1),
                (input.pixel(r1, c0), wr1 * wc0),
                (input.pixel(r1, c1), wr1 * wc1),
            ];
            let px = out.pixel_mut(i, j);
            for (src, wt) in taps {
                axpy(px, wt, src);
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Real>(
    in_shape: (usize, usize, usize),
    grad_out: &FeatureMap<T>,
) -> FeatureMap<T> {
    let (h, w, c) = in_shape;
    let (out_h, out_w, _) = grad_out.shape();
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut grad = FeatureMap::zeros(h, w, c);
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        let (wr0, wr1) = (T::lit(1.0 - fr), T::lit(fr));
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let (wc0, wc1) = (T::lit(1.0 - fc), T::lit(fc));
            let g = grad_out.pixel(i, j);
            for ((si, sj), wt) in [
                ((r0, c0), wr0 * wc0),
                ((r0, c1), wr0 * wc1),
                ((r1, c0), wr1 * wc0),
                ((r1, c1), wr1 * wc1),
            ] {
                axpy(grad.pixel_mut(si, sj), wt, g);
            }
        }
    }
    grad
}

pub fn relu<T: Real>(input: &FeatureMap<T>) -> FeatureMap<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real>(input: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}

pub fn add<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if !a.same_shape(b) {
        return Err(shape_err!("cannot add {:?} and {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Stack two maps along the channel axis, `a` first.
pub fn concat_channels<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(shape_err!(
            "cannot concatenate {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = FeatureMap::zeros(a.height(), a.width(), ca + cb);
    for ((dst, pa), pb) in out
        .data_mut()
        .chunks_exact_mut(ca + cb)
        .zip(a.data().chunks_exact(ca))
        .zip(b.data().chunks_exact(cb))
    {
        dst[..ca].copy_from_slice(pa);
        dst[ca..].copy_from_slice(pb);
    }
    Ok(out)
}

pub fn split_channels<T: Real>(grad: &FeatureMap<T>, first: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let (h, w, c) = grad.shape();
    let mut a = FeatureMap::zeros(h, w, first);
    let mut b = FeatureMap::zeros(h, w, c - first);
    for ((src, da), db) in grad
        .data()
        .chunks_exact(c)
        .zip(a.data_mut().chunks_exact_mut(first))
        .zip(b.data_mut().chunks_exact_mut(c - first))
    {
        da.copy_from_slice(&src[..first]);
        db.copy_from_slice(&src[first..]);
    }
    (a, b)
}

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// One mean/variance per channel, over all positions of the map.
    Spatial,
    /// One mean/variance per position, over its channels.
    Channel,
}

/// Gather the index groups that share statistics.
fn norm_groups(shape: (usize, usize, usize), axis: NormAxis) -> (usize, usize, usize, usize) {
    // (groups, members, group stride, member stride)
    let (h, w, c) = shape;
    match axis {
        NormAxis::Spatial => (c, h * w, 1, c),
        NormAxis::Channel => (h * w, c, c, 1),
    }
}

fn group_stats<T: Real>(x: &[T], start: usize, members: usize, stride: usize) -> (T, T) {
    let n = T::lit(members as f64);
    let mut mean = T::zero();
    for m in 0..members {
        mean += x[start + m * stride];
    }
    mean = mean / n;
    let mut var = T::zero();
    for m in 0..members {
        let d = x[start + m * stride] - mean;
        var += d * d;
    }
    (mean, (var / n + T::lit(NORM_EPS)).sqrt().recip())
}

/// Normalize then apply a per-channel affine `gamma·x̂ + beta`.
pub fn normalize<T: Real>(
    input: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    axis: NormAxis,
) -> Result<FeatureMap<T>> {
    let c = input.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "normalization affine has {} / {} entries for {c} channels",
            gamma.len(),
            beta.len()
        ));
    }
    let (groups, members, gstride, mstride) = norm_groups(input.shape(), axis);
    let x = input.data();
    let mut out = FeatureMap::zeros(input.height(), input.width(), c);
    let y = out.data_mut();
    for g in 0..groups {
        let start = g * gstride;
        let (mean, inv_std) = group_stats(x, start, members, mstride);
        for m in 0..members {
            let idx = start + m * mstride;
            let ch = idx % c;
            y[idx] = gamma[ch] * (x[idx] - mean) * inv_std + beta[ch];
        }
    }
    Ok(out)
}

/// Gradients of [`normalize`]: `(d input, d gamma, d beta)`.
pub fn normalize_backward<T: Real>(
    input: &FeatureMap<T>,
    gamma: &[T],
    axis: NormAxis,
    grad_out: &FeatureMap<T>,
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let c = input.channels();
    let (groups, members, gstride, mstride) = norm_groups(input.shape(), axis);
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = FeatureMap::zeros(input.height(), input.width(), c);
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let n = T::lit(members as f64);
    let gi = grad_in.data_mut();
    for grp in 0..groups {
        let start = grp * gstride;
        let (mean, inv_std) = group_stats(x, start, members, mstride);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for m in 0..members {
            let idx = start + m * mstride;
            let ch = idx % c;
            let xhat = (x[idx] - mean) * inv_std;
            let dxhat = g[idx] * gamma[ch];
            grad_gamma[ch] += g[idx] * xhat;
            grad_beta[ch] += g[idx];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for m in 0..members {
            let idx = start + m * mstride;
            let ch = idx % c;
            let xhat = (x[idx] - mean) * inv_std;
            let dxhat = g[idx] * gamma[ch];
            gi[idx] = inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

/// Mean of squared elementwise differences.
pub fn l2_loss<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<T> {
    if !a.same_shape(b) {
        return Err(shape_err!(
            "loss operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut sum = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        sum += d * d;
    }
    Ok(sum / T::lit(a.len() as f64))
}

/// Gradient of [`l2_loss`] with respect to `a`, scaled by `upstream`.
/// The gradient with respect to `b` is its negation.
pub fn l2_loss_backward<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, upstream: T) -> FeatureMap<T> {
    let scale = upstream * T::lit(2.0 / a.len() as f64);
    let mut grad = a.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(b.data()) {
        *g = (*g - y) * scale;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(h, w, c, |i, j, k| (i * w * c + j * c + k) as f64)
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let x = FeatureMap::<f32>::filled(1, 1, 1, 3.5);
        let k = ConvKernel::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);

        let ones = FeatureMap::<f32>::filled(4, 4, 1, 1.0);
        let k = ConvKernel::new(1, 1, 2, 2, vec![1.0; 4], vec![0.0]).unwrap();
        let y = conv2d(&ones, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), (2, 2, 1));
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = FeatureMap::<f32>::zeros(3, 3, 2);
        let k = ConvKernel::<f32>::zeros(1, 3, 3, 3);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::Shape(_))));
        let k = ConvKernel::<f32>::zeros(1, 2, 5, 5);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &ConvKernel::zeros(1, 2, 1, 1), 0, 0).is_err());
    }

    #[test]
    fn transpose_broadcast_and_shape() {
        let x = FeatureMap::<f32>::filled(1, 1, 1, 2.5);
        let k = ConvKernel::new(1, 1, 2, 2, vec![1.0; 4], vec![0.0]).unwrap();
        let y = conv_transpose2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), (2, 2, 1));
        assert!(y.data().iter().all(|&v| v == 2.5));

        for size in 1..7 {
            let x = FeatureMap::<f32>::zeros(size, size + 1, 3);
            let mut k = ConvKernel::<f32>::zeros(2, 3, 4, 4);
            k.bias_mut().copy_from_slice(&[0.5, -1.0]);
            let y = conv_transpose2d(&x, &k, 2, 1).unwrap();
            assert_eq!(y.shape(), (2 * size, 2 * size + 2, 2));
            assert!(y.pixel(0, 0) == [0.5, -1.0]);
        }
    }

    #[test]
    fn pointwise_channel_sum() {
        let x = ramp(2, 2, 2);
        let k = ConvKernel::new(1, 2, 1, 1, vec![1.0, 1.0], vec![0.0]).unwrap();
        let y = conv1x1(&x, &k).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.get(i, j, 0), x.get(i, j, 0) + x.get(i, j, 1));
            }
        }
        assert!(conv1x1(&x, &ConvKernel::zeros(1, 2, 3, 3)).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_lastdim(&FeatureMap::<f32>::filled(1, 1, 4, 0.3));
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let x = FeatureMap::<f32>::from_vec(1, 1, 2, vec![1000.0, 0.0]).unwrap();
        let y = softmax_lastdim(&x);
        assert!((y.get(0, 0, 0) - 1.0).abs() < 1e-6 && y.get(0, 0, 1).abs() < 1e-6);
        assert!(y.is_finite());
    }

    #[test]
    fn nearest_index_rule() {
        let x = ramp(4, 4, 1);
        let y = nearest_resize(&x, 2, 2);
        for (i, si) in [(0, 0), (1, 2)] {
            for (j, sj) in [(0, 0), (1, 2)] {
                assert_eq!(y.get(i, j, 0), x.get(si, sj, 0));
            }
        }
        let small = ramp(2, 2, 1);
        let big = nearest_resize(&small, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(big.get(i, j, 0), small.get(i / 2, j / 2, 0));
            }
        }
        assert_eq!(nearest_resize(&x, 4, 4), x);
    }

    #[test]
    fn bilinear_hand_weights() {
        // Half-pixel centres: output 0 → src −0.25 (clamped 0), 1 → 0.25,
        // 2 → 0.75, 3 → 1.25 (upper tap clamped).
        let x = FeatureMap::<f64>::from_vec(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4);
        let axis = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let expected = 2.0 * axis[i] + axis[j];
                assert!((y.get(i, j, 0) - expected).abs() < 1e-12, "({i},{j})");
            }
        }
        let c = FeatureMap::<f32>::filled(3, 5, 2, 0.7);
        assert!(bilinear_resize(&c, 6, 10)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-6));
        let r = ramp(3, 3, 2);
        assert_eq!(bilinear_resize(&r, 3, 3), r);
    }

    #[test]
    fn bilinear_halving_is_box_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = FeatureMap::<f64>::random_uniform(6, 8, 2, 1.0, &mut rng);
        let y = bilinear_resize(&x, 3, 4);
        for i in 0..3 {
            for j in 0..4 {
                for c in 0..2 {
                    let avg = (x.get(2 * i, 2 * j, c)
                        + x.get(2 * i + 1, 2 * j, c)
                        + x.get(2 * i, 2 * j + 1, c)
                        + x.get(2 * i + 1, 2 * j + 1, c))
                        / 4.0;
                    assert!((y.get(i, j, c) - avg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn l2_cases() {
        let a = FeatureMap::<f32>::zeros(3, 2, 5);
        let b = FeatureMap::<f32>::filled(3, 2, 5, 1.0);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_loss(&a, &b).unwrap(), 1.0);
        assert!(l2_loss(&a, &FeatureMap::zeros(2, 3, 5)).is_err());
        let g = l2_loss_backward(&b, &a, 1.0);
        assert!(g.data().iter().all(|&v| (v - 2.0 / 30.0).abs() < 1e-7));
    }

    #[test]
    fn normalize_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap::<f64>::random_uniform(4, 5, 3, 2.0, &mut rng);
        let gamma = vec![1.0; 3];
        let beta = vec![0.0; 3];
        let y = normalize(&x, &gamma, &beta, NormAxis::Spatial).unwrap();
        for m in y.channel_means() {
            assert!(m.abs() < 1e-12);
        }
        let y = normalize(&x, &gamma, &beta, NormAxis::Channel).unwrap();
        for px in y.data().chunks_exact(3) {
            assert!(px.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = ramp(2, 3, 2);
        let b = ramp(2, 3, 3).map(|v| -v);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.channels(), 5);
        let (a2, b2) = split_channels(&ab, 2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
        assert!(concat_channels(&a, &ramp(3, 3, 1)).is_err());
    }
}
