//! Differentiable tensor primitives on `(batch, channels, height, width)` activations.
//!
//! Every forward function has a matching backward that returns exact
//! gradients. Convolutions lower to im2col followed by a single GEMM per
//! sample; column buffers are rebuilt in the backward pass rather than cached.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output side length of a convolution.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [T],
) {
    let positions = out_h * out_w;
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    x: &mut [T],
) {
    let positions = out_h * out_w;
    for c in 0..channels {
        let plane = &mut x[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
    pub const DOWN3: ConvSpec = ConvSpec { stride: 2, pad: 1 };
    pub const POINTWISE: ConvSpec = ConvSpec { stride: 1, pad: 0 };
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kc != c || kh != kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {:?} does not match input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let oh = conv_out_len(h, kh, spec.stride, spec.pad);
    let ow = conv_out_len(w, kw, spec.stride, spec.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((n, c, h, w, o, kh, oh, ow)),
        _ => Err(Error::Shape(format!(
            "conv2d: kernel {:?} too large for input {:?} with {spec:?}",
            kernel.shape(),
            x.shape()
        ))),
    }
}

/// Cross-correlation of `x (N,C,H,W)` with `kernel (O,C,k,k)` plus optional bias `(O)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o, k, oh, ow) = conv_geometry(x, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "conv2d: bias {:?} does not match {o} output channels",
                b.shape()
            )));
        }
    }
    let ckk = c * k * k;
    let positions = oh * ow;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let pointwise = k == 1 && spec.stride == 1 && spec.pad == 0;
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * positions]
    };
    for s in 0..n {
        let xs = x.sample(s);
        let cols: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, w, k, spec.stride, spec.pad, oh, ow, &mut col);
            &col
        };
        let ys = out.sample_mut(s);
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                ys[oc * positions..(oc + 1) * positions].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            ckk,
            positions,
            T::one(),
            kernel.data(),
            ckk as isize,
            1,
            cols,
            positions as isize,
            1,
            beta,
            ys,
            positions as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w, o, k, oh, ow) = conv_geometry(x, kernel, spec)?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv2d backward: gradient {:?} does not match output [{n}, {o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let ckk = c * k * k;
    let positions = oh * ow;
    let pointwise = k == 1 && spec.stride == 1 && spec.pad == 0;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut col = vec![T::zero(); if pointwise { 0 } else { ckk * positions }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { ckk * positions }];
    for s in 0..n {
        let gy = grad_out.sample(s);
        for (oc, acc) in db.data_mut().iter_mut().enumerate() {
            *acc = *acc
                + gy[oc * positions..(oc + 1) * positions]
                    .iter()
                    .copied()
                    .sum();
        }
        let xs = x.sample(s);
        let cols: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, w, k, spec.stride, spec.pad, oh, ow, &mut col);
            &col
        };
        // dK (O, CKK) += dY (O, P) * cols^T (P, CKK)
        T::gemm(
            o,
            positions,
            ckk,
            T::one(),
            gy,
            positions as isize,
            1,
            cols,
            1,
            positions as isize,
            T::one(),
            dk.data_mut(),
            ckk as isize,
            1,
        );
        // dcols (CKK, P) = K^T (CKK, O) * dY (O, P)
        if pointwise {
            T::gemm(
                ckk,
                o,
                positions,
                T::one(),
                kernel.data(),
                1,
                ckk as isize,
                gy,
                positions as isize,
                1,
                T::zero(),
                dx.sample_mut(s),
                positions as isize,
                1,
            );
        } else {
            T::gemm(
                ckk,
                o,
                positions,
                T::one(),
                kernel.data(),
                1,
                ckk as isize,
                gy,
                positions as isize,
                1,
                T::zero(),
                &mut dcol,
                positions as isize,
                1,
            );
            col2im(
                &dcol,
                c,
                h,
                w,
                k,
                spec.stride,
                spec.pad,
                oh,
                ow,
                dx.sample_mut(s),
            );
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

fn deconv_geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (kc, o, kh, kw) = kernel.dims4()?;
    if kc != c || kh != kw || stride == 0 {
        return Err(Error::Shape(format!(
            "deconv2d: kernel {:?} does not match input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let oh = (h.max(1) - 1) * stride + kh;
    let ow = (w.max(1) - 1) * stride + kw;
    Ok((n, c, h, w, o, kh, oh, ow))
}

/// Transposed convolution of `x (N,C,H,W)` with `kernel (C,O,k,k)`, no padding.
///
/// With `k == stride == 2` every input value paints its own 2x2 output block,
/// doubling both spatial dimensions.
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o, k, oh, ow) = deconv_geometry(x, kernel, stride)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "deconv2d: bias {:?} does not match {o} output channels",
                b.shape()
            )));
        }
    }
    let okk = o * k * k;
    let positions = h * w;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut col = vec![T::zero(); okk * positions];
    for s in 0..n {
        // cols (OKK, HW) = K^T (OKK, C) * X (C, HW)
        T::gemm(
            okk,
            c,
            positions,
            T::one(),
            kernel.data(),
            1,
            okk as isize,
            x.sample(s),
            positions as isize,
            1,
            T::zero(),
            &mut col,
            positions as isize,
            1,
        );
        let ys = out.sample_mut(s);
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                ys[oc * oh * ow..(oc + 1) * oh * ow].fill(bv);
            }
        }
        col2im(&col, o, oh, ow, k, stride, 0, h, w, ys);
    }
    Ok(out)
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w, o, k, oh, ow) = deconv_geometry(x, kernel, stride)?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "deconv2d backward: gradient {:?} does not match output [{n}, {o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let okk = o * k * k;
    let positions = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dcol = vec![T::zero(); okk * positions];
    for s in 0..n {
        let gy = grad_out.sample(s);
        for (oc, acc) in db.data_mut().iter_mut().enumerate() {
            *acc = *acc + gy[oc * oh * ow..(oc + 1) * oh * ow].iter().copied().sum();
        }
        im2col(gy, o, oh, ow, k, stride, 0, h, w, &mut dcol);
        // dX (C, HW) = K (C, OKK) * dcols (OKK, HW)
        T::gemm(
            c,
            okk,
            positions,
            T::one(),
            kernel.data(),
            okk as isize,
            1,
            &dcol,
            positions as isize,
            1,
            T::zero(),
            dx.sample_mut(s),
            positions as isize,
            1,
        );
        // dK (C, OKK) += X (C, HW) * dcols^T (HW, OKK)
        T::gemm(
            c,
            positions,
            okk,
            T::one(),
            x.sample(s),
            positions as isize,
            1,
            &dcol,
            1,
            positions as isize,
            T::one(),
            dk.data_mut(),
            okk as isize,
            1,
        );
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

/// Saved state of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the value folded into running statistics.
    pub batch_var_unbiased: Vec<f64>,
}

/// Per-channel normalization with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch norm: affine params {:?} do not match {c} channels",
            scale.shape()
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            mean[ch] += xs[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += xs[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let ns = normalized.sample_mut(s);
        for ch in 0..c {
            let m = T::from_f64(mean[ch]);
            let r = ch * plane..(ch + 1) * plane;
            for (d, &v) in ns[r.clone()].iter_mut().zip(&xs[r]) {
                *d = (v - m) * inv_std[ch];
            }
        }
        let os = out.sample_mut(s);
        for ch in 0..c {
            let (g, b) = (scale.data()[ch], shift.data()[ch]);
            let r = ch * plane..(ch + 1) * plane;
            for (d, &v) in os[r.clone()].iter_mut().zip(&ns[r]) {
                *d = g * v + b;
            }
        }
    }
    let unbiased = if count > 1.0 {
        count / (count - 1.0)
    } else {
        1.0
    };
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var.iter().map(|v| v * unbiased).collect(),
        },
    ))
}

/// Per-channel normalization with stored running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || running_mean.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch norm: statistics {:?} do not match {c} channels",
            running_mean.shape()
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for ch in 0..c {
            let inv = T::from_f64(1.0 / (running_var.data()[ch].as_f64() + eps).sqrt());
            let g = scale.data()[ch] * inv;
            let b = shift.data()[ch] - running_mean.data()[ch] * g;
            let r = ch * plane..(ch + 1) * plane;
            for (d, &v) in os[r.clone()].iter_mut().zip(&xs[r]) {
                *d = g * v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batch_norm_train`]: `(input, scale, shift)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    scale: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.check_same_shape(&cache.normalized)?;
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for s in 0..n {
        let gy = grad_out.sample(s);
        let xh = cache.normalized.sample(s);
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for (&g, &v) in gy[r.clone()].iter().zip(&xh[r]) {
                sum_dy[ch] += g.as_f64();
                sum_dy_xhat[ch] += g.as_f64() * v.as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for s in 0..n {
        let gy = grad_out.sample(s);
        let xh = cache.normalized.sample(s);
        let ds = dx.sample_mut(s);
        for ch in 0..c {
            let k = scale.data()[ch] * cache.inv_std[ch];
            let mean_dy = T::from_f64(sum_dy[ch] / count);
            let mean_dy_xhat = T::from_f64(sum_dy_xhat[ch] / count);
            let r = ch * plane..(ch + 1) * plane;
            for ((d, &g), &v) in ds[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&xh[r]) {
                *d = k * (g - mean_dy - v * mean_dy_xhat);
            }
        }
    }
    let dscale = Tensor::from_vec(&[c], sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect())?;
    let dshift = Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::from_f64(v)).collect())?;
    Ok((dx, dscale, dshift))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data).expect("relu backward keeps shape")
}

/// Inverted-dropout mask: kept entries hold `1/(1-rate)`, dropped entries 0.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("mask length matches shape")
}

pub fn mul_elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.check_same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.check_same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Concatenate rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
        .dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat: {:?} incompatible with batch {n} and {h}x{w}",
                p.shape()
            )));
        }
        total += pc;
    }
    let mut out = Vec::with_capacity(n * total * h * w);
    for s in 0..n {
        for p in parts {
            out.extend_from_slice(p.sample(s));
        }
    }
    Tensor::from_vec(&[n, total, h, w], out)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!(
            "split: sizes {sizes:?} do not sum to {c} channels"
        )));
    }
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = sizes
        .iter()
        .map(|&s| Vec::with_capacity(n * s * plane))
        .collect();
    for s in 0..n {
        let xs = x.sample(s);
        let mut offset = 0;
        for (out, &size) in outs.iter_mut().zip(sizes) {
            out.extend_from_slice(&xs[offset * plane..(offset + size) * plane]);
            offset += size;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &size)| Tensor::from_vec(&[n, size, h, w], d))
        .collect()
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        let xs = logits.sample(s);
        let os = out.sample_mut(s);
        for p in 0..plane {
            let max = (0..c)
                .map(|ch| xs[ch * plane + p])
                .fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for ch in 0..c {
                let e = (xs[ch * plane + p] - max).exp();
                os[ch * plane + p] = e;
                total += e.as_f64();
            }
            let inv = T::from_f64(1.0 / total);
            for ch in 0..c {
                os[ch * plane + p] = os[ch * plane + p] * inv;
            }
        }
    }
    Ok(out)
}

/// Linear interpolation taps for one axis, half-pixel centers, edge clamped.
fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = input * factor;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::Argument("upsampling factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for ch in 0..c {
            let src = &xs[ch * h * w..(ch + 1) * h * w];
            let dst = &mut os[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top =
                        src[y0 * w + x0].as_f64() * (1.0 - fx) + src[y0 * w + x1].as_f64() * fx;
                    let bot =
                        src[y1 * w + x0].as_f64() * (1.0 - fx) + src[y1 * w + x1].as_f64() * fx;
                    dst[oy * ow + ox] = T::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!(
            "upsample backward: {:?} not divisible by factor {factor}",
            grad_out.shape()
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![0.0f64; n * c * h * w];
    for s in 0..n {
        let gs = grad_out.sample(s);
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let src = &gs[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = src[oy * ow + ox].as_f64();
                    dx[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dx[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                    dx[base + y1 * w + x0] += g * fy * (1.0 - fx);
                    dx[base + y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx.into_iter().map(T::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn all_ones_convolution_counts_neighbours() {
        let x = Tensor::<f32>::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, ConvSpec::SAME3).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random(&[2, 1, 5, 4], 1);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, ConvSpec::SAME3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[3, 5, 3, 3]);
        let msg = conv2d(&x, &k, None, ConvSpec::SAME3)
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("[3, 5, 3, 3]") && msg.contains("[1, 2, 4, 4]"),
            "{msg}"
        );
    }

    #[test]
    fn strided_conv_output_size() {
        let x = Tensor::<f32>::zeros(&[1, 2, 96, 96]);
        let k = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &k, None, ConvSpec::DOWN3).unwrap();
        assert_eq!(y.shape(), &[1, 4, 48, 48]);
    }

    #[test]
    fn deconv_paints_two_by_two_blocks() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f32>::filled(&[1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &k, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
        let zero = deconv2d(&Tensor::<f32>::zeros(&[1, 1, 2, 2]), &k, None, 2).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    // Linear maps: <A x, y> == <x, A^T y> checks the backward passes are exact adjoints.
    #[test]
    fn conv_backward_is_adjoint() {
        for spec in [ConvSpec::SAME3, ConvSpec::DOWN3] {
            let x = random(&[2, 3, 7, 6], 2);
            let k = random(&[4, 3, 3, 3], 3);
            let y = conv2d(&x, &k, None, spec).unwrap();
            let gy = random(y.shape(), 4);
            let g = conv2d_backward(&x, &k, &gy, spec).unwrap();
            assert!((dot(&y, &gy) - dot(&x, &g.input)).abs() < 1e-9);
            assert!((dot(&y, &gy) - dot(&k, &g.kernel)).abs() < 1e-9);
        }
    }

    #[test]
    fn deconv_backward_is_adjoint() {
        let x = random(&[2, 3, 4, 5], 5);
        let k = random(&[3, 2, 2, 2], 6);
        let y = deconv2d(&x, &k, None, 2).unwrap();
        let gy = random(y.shape(), 7);
        let g = deconv2d_backward(&x, &k, &gy, 2).unwrap();
        assert!((dot(&y, &gy) - dot(&x, &g.input)).abs() < 1e-9);
        assert!((dot(&y, &gy) - dot(&k, &g.kernel)).abs() < 1e-9);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        for factor in [1, 2, 4, 8] {
            let x = random(&[1, 2, 3, 3], 8);
            let y = upsample_bilinear(&x, factor).unwrap();
            let gy = random(y.shape(), 9);
            let gx = upsample_bilinear_backward(&gy, factor).unwrap();
            assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::<f32>::filled(&[1, 1, 3, 3], 0.7);
        let y = upsample_bilinear(&x, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn softmax_normalizes_each_pixel() {
        let x = random(&[2, 5, 3, 3], 10);
        let p = softmax_channels(&x).unwrap();
        for s in 0..2 {
            for px in 0..9 {
                let total: f64 = (0..5).map(|c| p.sample(s)[c * 9 + px]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = random(&[2, 1, 2, 2], 11);
        let b = random(&[2, 3, 2, 2], 12);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn batch_norm_output_has_zero_mean_unit_variance() {
        let x = random(&[3, 2, 4, 4], 13);
        let scale = Tensor::filled(&[2], 1.0);
        let shift = Tensor::zeros(&[2]);
        let (y, _) = batch_norm_train(&x, &scale, &shift, 0.0).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| y.sample(s)[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 48.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }
}
