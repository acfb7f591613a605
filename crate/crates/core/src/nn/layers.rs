//! Forward and backward passes of the individual layers.
//!
//! Feature maps are `[height, width, channels]`, row-major with channels
//! innermost. Convolution kernels are `[kh, kw, in, out]` and dense weights
//! `[in, out]`, so the innermost loops of every hot path run over a
//! contiguous output-channel slice.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Real, Tensor};

fn hwc(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what} expects [h, w, c], got {s:?}"))),
    }
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers, `src = (dst + 0.5) * in / out - 0.5`.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be at least 1x1".into()));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xd = x.data();
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let od = out.data_mut();
    for (i, ry) in ty.iter().enumerate() {
        for (j, rx) in tx.iter().enumerate() {
            let weights = [
                ((1.0 - ry.frac) * (1.0 - rx.frac), ry.lo, rx.lo),
                ((1.0 - ry.frac) * rx.frac, ry.lo, rx.hi),
                (ry.frac * (1.0 - rx.frac), ry.hi, rx.lo),
                (ry.frac * rx.frac, ry.hi, rx.hi),
            ];
            for ch in 0..c {
                let mut acc = T::zero();
                for &(wt, sy, sx) in &weights {
                    acc = acc + T::from_f64_lossy(wt) * xd[(sy * w + sx) * c + ch];
                }
                od[(i * out_w + j) * c + ch] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters each output cotangent back onto
/// its four source pixels with the forward weights.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (out_h, out_w, c) = hwc(dy, "resize backward")?;
    let ty = resize_taps(in_h, out_h);
    let tx = resize_taps(in_w, out_w);
    let mut dx = Tensor::zeros(&[in_h, in_w, c]);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for (i, ry) in ty.iter().enumerate() {
        for (j, rx) in tx.iter().enumerate() {
            let weights = [
                ((1.0 - ry.frac) * (1.0 - rx.frac), ry.lo, rx.lo),
                ((1.0 - ry.frac) * rx.frac, ry.lo, rx.hi),
                (ry.frac * (1.0 - rx.frac), ry.hi, rx.lo),
                (ry.frac * rx.frac, ry.hi, rx.hi),
            ];
            for ch in 0..c {
                let g = dyd[(i * out_w + j) * c + ch];
                for &(wt, sy, sx) in &weights {
                    let slot = &mut dxd[(sy * in_w + sx) * c + ch];
                    *slot = *slot + T::from_f64_lossy(wt) * g;
                }
            }
        }
    }
    Ok(dx)
}

pub const NORM_EPSILON: f64 = 1e-6;

/// `(x - mean) / sqrt(variance + 1e-6)`, elementwise.
pub fn normalize_apply<T: Real>(x: &Tensor<T>, mean: f64, variance: f64) -> Tensor<T> {
    let m = T::from_f64_lossy(mean);
    let inv = T::from_f64_lossy(1.0 / (variance + NORM_EPSILON).sqrt());
    x.map(|v| (v - m) * inv)
}

pub fn normalize_backward<T: Real>(dy: &Tensor<T>, variance: f64) -> Tensor<T> {
    let inv = T::from_f64_lossy(1.0 / (variance + NORM_EPSILON).sqrt());
    dy.map(|g| g * inv)
}

fn conv_dims<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, w, cin) = hwc(x, "conv2d")?;
    let (kh, kw, kin, cout) = match *k.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::Shape(format!("conv2d kernel must be [kh, kw, in, out], got {s:?}"))),
    };
    if kin != cin {
        return Err(Error::Shape(format!(
            "conv2d input has {cin} channels, kernel expects {kin}"
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "conv2d input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    Ok((h, w, cin, kh, kw, cout))
}

/// Valid-padding, stride-1 cross-correlation:
/// `y[i,j,o] = b[o] + sum_{di,dj,c} x[i+di, j+dj, c] k[di,dj,c,o]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin, kh, kw, cout) = conv_dims(x, k)?;
    bias.expect_shape(&[cout])?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut y = Tensor::zeros(&[oh, ow, cout]);
    let (xd, kd, bd) = (x.data(), k.data(), bias.data());
    let yd = y.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let out = &mut yd[(i * ow + j) * cout..(i * ow + j + 1) * cout];
            out.copy_from_slice(bd);
            for di in 0..kh {
                for dj in 0..kw {
                    let xo = ((i + di) * w + j + dj) * cin;
                    let ko = (di * kw + dj) * cin * cout;
                    for c in 0..cin {
                        axpy(xd[xo + c], &kd[ko + c * cout..ko + (c + 1) * cout], out);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Kernel and bias gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dk: Tensor<T>,
    pub dbias: Tensor<T>,
}

fn check_conv_dy<T: Real>(x: &Tensor<T>, k: &Tensor<T>, dy: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let dims = conv_dims(x, k)?;
    let (h, w, _, kh, kw, cout) = dims;
    dy.expect_shape(&[h - kh + 1, w - kw + 1, cout])?;
    Ok(dims)
}

/// Accumulates `dk += sum x (x) dy` and `dbias += sum dy` without touching `dx`.
pub(crate) fn conv2d_accumulate_param_grads<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    dk: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Result<()> {
    let (h, w, cin, kh, kw, cout) = check_conv_dy(x, k, dy)?;
    dk.expect_shape(k.shape())?;
    dbias.expect_shape(&[cout])?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, dyd) = (x.data(), dy.data());
    let dkd = dk.data_mut();
    for di in 0..kh {
        for dj in 0..kw {
            for i in 0..oh {
                for j in 0..ow {
                    let g = &dyd[(i * ow + j) * cout..(i * ow + j + 1) * cout];
                    let xo = ((i + di) * w + j + dj) * cin;
                    let ko = (di * kw + dj) * cin * cout;
                    for c in 0..cin {
                        let xv = xd[xo + c];
                        if xv != T::zero() {
                            axpy(xv, g, &mut dkd[ko + c * cout..ko + (c + 1) * cout]);
                        }
                    }
                }
            }
        }
    }
    let dbd = dbias.data_mut();
    for pix in dyd.chunks_exact(cout) {
        for (b, &g) in dbd.iter_mut().zip(pix) {
            *b = *b + g;
        }
    }
    Ok(())
}

/// Input gradient: full correlation of `dy` with the spatially flipped kernel,
/// written as the equivalent scatter `dx[i+di, j+dj, c] += k[di,dj,c,:] . dy[i,j,:]`.
pub(crate) fn conv2d_input_grad<T: Real>(x_shape: &[usize], k: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w, cin) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dx = Tensor::zeros(x_shape);
    let (kd, dyd) = (k.data(), dy.data());
    let dxd = dx.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let g = &dyd[(i * ow + j) * cout..(i * ow + j + 1) * cout];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for di in 0..kh {
                for dj in 0..kw {
                    let xo = ((i + di) * w + j + dj) * cin;
                    let ko = (di * kw + dj) * cin * cout;
                    for c in 0..cin {
                        let kk = &kd[ko + c * cout..ko + (c + 1) * cout];
                        dxd[xo + c] = dxd[xo + c] + dot(kk, g);
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_backward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    check_conv_dy(x, k, dy)?;
    let mut dk = Tensor::zeros(k.shape());
    let mut dbias = Tensor::zeros(&[k.shape()[3]]);
    conv2d_accumulate_param_grads(x, k, dy, &mut dk, &mut dbias)?;
    let dx = conv2d_input_grad(x.shape(), k, dy);
    Ok(ConvGrads { dx, dk, dbias })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Passes `dy` where `x > 0`, zero elsewhere (including at 0).
///
/// `x` may be either the pre- or post-activation values since both are
/// positive at exactly the same positions.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape(x.shape())?;
    let mut dx = dy.clone();
    relu_mask_in_place(x, &mut dx);
    Ok(dx)
}

pub(crate) fn relu_mask_in_place<T: Real>(x: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &v) in dy.data_mut().iter_mut().zip(x.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
}

/// 2x2, stride-2 max pooling. Also returns, for every output element, the
/// flat input index it was taken from (first maximum in row-major window
/// order on ties).
pub fn maxpool2d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = hwc(x, "maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2d needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut arg = vec![0usize; oh * ow * c];
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * i) * w + 2 * j) * c + ch;
                let mut best = xd[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                let o = (i * ow + j) * c + ch;
                od[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Real>(dy: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape(format!(
            "maxpool backward: {} argmax entries for {} gradients",
            argmax.len(),
            dy.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        let slot = dxd
            .get_mut(idx)
            .ok_or_else(|| Error::Shape(format!("argmax index {idx} outside input")))?;
        *slot = *slot + g;
    }
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

pub fn check_drop_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. In training mode each element survives with
/// probability `1 - rate` and is scaled by `1 / (1 - rate)`; the returned
/// mask holds that per-element factor (0 or the scale) for the backward pass.
/// Inference is the identity and returns no mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_drop_rate(rate)?;
    if mode == DropoutMode::Infer {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(1.0 / keep);
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Real>(dy: &Tensor<T>, mask: Option<&[T]>) -> Result<Tensor<T>> {
    let mut dx = dy.clone();
    if let Some(mask) = mask {
        if mask.len() != dy.len() {
            return Err(Error::Shape("dropout mask length mismatch".into()));
        }
        for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
            *g = *g * m;
        }
    }
    Ok(dx)
}

fn dense_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, m) = match *w.shape() {
        [n, m] => (n, m),
        ref s => return Err(Error::Shape(format!("dense weight must be [in, out], got {s:?}"))),
    };
    if x.len() != n {
        return Err(Error::Shape(format!("dense layer expects {n} inputs, got {}", x.len())));
    }
    Ok((n, m))
}

/// `y = x^T w + b`
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = dense_dims(x, w)?;
    b.expect_shape(&[m])?;
    let mut y = b.clone();
    let wd = w.data();
    for (r, &xv) in x.data().iter().enumerate().take(n) {
        if xv != T::zero() {
            axpy(xv, &wd[r * m..(r + 1) * m], y.data_mut());
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn dense_accumulate_param_grads<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<()> {
    let (n, m) = dense_dims(x, dw)?;
    dy.expect_shape(&[m])?;
    db.expect_shape(&[m])?;
    let g = dy.data();
    let dwd = dw.data_mut();
    for (r, &xv) in x.data().iter().enumerate().take(n) {
        if xv != T::zero() {
            axpy(xv, g, &mut dwd[r * m..(r + 1) * m]);
        }
    }
    for (b, &gv) in db.data_mut().iter_mut().zip(g) {
        *b = *b + gv;
    }
    Ok(())
}

pub(crate) fn dense_input_grad<T: Real>(w: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let g = dy.data();
    Tensor::from_fn(&[n], |r| dot(&wd[r * m..(r + 1) * m], g))
}

/// `dx = w dy`, `dw = x (x) dy`, `db = dy`.
pub fn dense_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (_, m) = dense_dims(x, w)?;
    dy.expect_shape(&[m])?;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[m]);
    dense_accumulate_param_grads(x, dy, &mut dw, &mut db)?;
    let dx = dense_input_grad(w, dy).reshape(x.shape())?;
    Ok(DenseGrads { dx, dw, db })
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against `label`, in log-sum-exp form,
/// with its gradient `softmax(z) - onehot(label)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Label {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
    let loss = sum.ln() - (z[label] - max);
    let mut grad = Tensor::from_vec(logits.shape(), softmax(z))?;
    let g = grad.data_mut();
    g[label] = g[label] - T::one();
    Ok((loss, grad))
}
